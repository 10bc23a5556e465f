import json
import os

import pytest
import torch

from cdun import dataio
from cdun.degrade import DegradationField, MotionSpec, VideoClip, synth_clip, synth_meta
from cdun.errors import IngestError


def test_clip_round_trip(tmp_path, gen):
    clip = VideoClip(torch.rand(4, 3, 9, 7, generator=gen))
    dataio.save_clip(clip, tmp_path / "c")
    back = dataio.load_clip(tmp_path / "c")
    assert torch.equal(back.frames, dataio.quantize16(clip.frames))


def test_degraded_range_round_trip(tmp_path, gen):
    x = 1.5 * torch.rand(3, 3, 5, 5, generator=gen)
    dataio.save_clip(VideoClip(x), tmp_path / "d", dataio.DEGRADED_RANGE)
    back = dataio.load_frames(tmp_path / "d", dataio.DEGRADED_RANGE)
    assert torch.equal(back, dataio.quantize16(x, dataio.DEGRADED_RANGE))


def test_fields_and_flows_round_trip(tmp_path, gen):
    f = DegradationField(torch.rand(3, 1, 6, 5, generator=gen), torch.rand(3, 1, 6, 5, generator=gen))
    dataio.save_fields(f, tmp_path)
    back = dataio.load_fields(tmp_path)
    assert torch.equal(back.T, f.T) and torch.equal(back.D, f.D)
    raw = (tmp_path / "T" / "0001.cdf").read_bytes()
    assert raw[:4] == b"CDF1" and int.from_bytes(raw[4:6], "little") == 6 and int.from_bytes(raw[6:8], "little") == 5
    _, _, _, flows = synth_clip(MotionSpec("rain", displacements=((1, -1),)), 3, 8, 8)
    dataio.save_flows(flows, tmp_path / "flow")
    assert sorted(os.listdir(tmp_path / "flow")) == ["0001_fwd.cfl", "0002_fwd.cfl"]
    fl = dataio.load_flows(tmp_path / "flow")
    assert torch.equal(fl[1].displacement, flows[1].displacement) and fl[1].source_index == 1


def test_frame_gap_names_missing_index(tmp_path):
    dataio.save_clip(VideoClip(torch.rand(3, 3, 4, 4)), tmp_path)
    (tmp_path / "0002.png").unlink()
    with pytest.raises(IngestError, match="missing frame 2"):
        dataio.load_clip(tmp_path)


def test_mixed_sizes_rejected(tmp_path):
    dataio.save_clip(VideoClip(torch.rand(3, 3, 4, 4)), tmp_path)
    dataio.write_png16(tmp_path / "0003.png", torch.rand(3, 5, 4))
    with pytest.raises(IngestError, match="frame 3"):
        dataio.load_clip(tmp_path)


def test_bad_raster_magic(tmp_path):
    dataio.write_raster(tmp_path / "x.cdf", torch.rand(1, 2, 2), magic=b"XXXX")
    with pytest.raises(IngestError, match="magic"):
        dataio.read_raster(tmp_path / "x.cdf")


def test_sample_round_trip(tmp_path):
    spec = MotionSpec("haze", displacements=((1, 2),), seed=4)
    clean, deg, f, flows = synth_clip(spec, 5, 16, 16)
    dataio.write_sample(tmp_path, "clip", clean, deg, f, flows, synth_meta(spec, 5))
    s = dataio.read_sample(tmp_path / "clip")
    meta = json.loads((tmp_path / "clip" / "meta.json").read_text())
    assert meta["kind"] == "haze" and meta["frames"] == 5 and "severity" in meta and meta["seed"] == 4
    assert s.kind == "haze"
    assert torch.equal(s.offsets(), torch.tensor(spec.offsets(5), dtype=torch.float32))
    assert (s.degraded - deg.frames).abs().max() < 2e-5
    assert dataio.list_samples(tmp_path) == [tmp_path / "clip"]


def test_synth_dataset_deterministic(tmp_path):
    dataio.synth_dataset(tmp_path / "a", ["rain", "lowlight"], 1, 3, 16, seed=2)
    dataio.synth_dataset(tmp_path / "b", ["rain", "lowlight"], 1, 3, 16, seed=2)
    for rel in ("rain_0000/degraded/0002.png", "lowlight_0000/T/0001.cdf", "rain_0000/meta.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
