"""Reading and writing the paired dataset layout.

::

    <root>/<clip_id>/clean/0001.png ...      16-bit RGB, range [0, 1]
    <root>/<clip_id>/degraded/0001.png ...   16-bit RGB, range [0, 1.5]
    <root>/<clip_id>/T/0001.cdf ...          float32 raster, magic CDF1
    <root>/<clip_id>/D/0001.cdf ...
    <root>/<clip_id>/flow/0001_fwd.cfl ...   float32 2-channel raster, magic CFL1
    <root>/<clip_id>/meta.json

Frame numbers are 1-based. Raster files carry an 8-byte little-endian
header (4-byte magic, u16 H, u16 W) followed by planar float32 data.
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

from .degrade import DegradationField, FlowField, VideoClip
from .errors import IngestError

CLEAN_RANGE = 1.0
DEGRADED_RANGE = 1.5
FIELD_MAGIC = b"CDF1"
FLOW_MAGIC = b"CFL1"
_HEADER = struct.Struct("<4sHH")


def quantize16(x, vrange=CLEAN_RANGE):
    """Values a 16-bit PNG round-trip of ``x`` produces."""
    q = torch.round(x.double().clamp(0, vrange) / vrange * 65535)
    return (q * (vrange / 65535)).to(x.dtype)


def write_png16(path, img, vrange=CLEAN_RANGE):
    arr = np.round(img.detach().double().clamp(0, vrange).numpy() / vrange * 65535).astype(np.uint16)
    arr = np.ascontiguousarray(arr.transpose(1, 2, 0)[..., ::-1])
    if not cv2.imwrite(str(path), arr):
        raise IOError(f"could not write {path}")


def read_png16(path, vrange=CLEAN_RANGE, dtype=torch.float32):
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise IngestError(f"could not read image {path}")
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.dtype != np.uint16:
        raise IngestError(f"{path} is not a 16-bit PNG")
    arr = arr[..., :3][..., ::-1].transpose(2, 0, 1).astype(np.float64)
    return (torch.from_numpy(arr * (vrange / 65535))).to(dtype)


def write_raster(path, data, magic=FIELD_MAGIC):
    data = np.asarray(data.detach().cpu() if torch.is_tensor(data) else data, dtype="<f4")
    if data.ndim == 2:
        data = data[None]
    _, H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, H, W))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_raster(path, magic=FIELD_MAGIC, channels=1):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise IngestError(f"{path}: truncated header")
    got, H, W = _HEADER.unpack_from(raw)
    if got != magic:
        raise IngestError(f"{path}: bad magic {got!r}, expected {magic!r}")
    expect = _HEADER.size + 4 * channels * H * W
    if len(raw) != expect:
        raise IngestError(f"{path}: expected {expect} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(channels, H, W)
    return torch.from_numpy(arr.astype(np.float32))


def _numbered(directory, suffix):
    """Sorted [(index, path)] of ``%04d<suffix>`` files, checking for gaps."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestError(f"missing directory {directory}")
    pat = re.compile(r"^(\d{4})" + re.escape(suffix) + "$")
    found = {}
    for p in directory.iterdir():
        m = pat.match(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise IngestError(f"no '%04d{suffix}' files in {directory}")
    for want in range(1, max(found) + 1):
        if want not in found:
            raise IngestError(f"{directory}: missing frame {want} (frames must be numbered 0001..{max(found):04d})")
    return [(i, found[i]) for i in sorted(found)]


def _stack(directory, items, reader):
    frames, shape = [], None
    for idx, path in items:
        f = reader(path)
        if shape is None:
            shape = f.shape
        elif f.shape != shape:
            raise IngestError(f"{directory}: frame {idx} has shape {tuple(f.shape)}, expected {tuple(shape)}")
        frames.append(f)
    return torch.stack(frames)


def save_clip(clip: VideoClip, directory, vrange=CLEAN_RANGE):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames, start=1):
        write_png16(directory / f"{i:04d}.png", frame, vrange)


def load_frames(directory, vrange=CLEAN_RANGE):
    """Frames of a directory as an (l, 3, H, W) tensor, without length checks."""
    return _stack(directory, _numbered(directory, ".png"), lambda p: read_png16(p, vrange))


def load_clip(directory, vrange=CLEAN_RANGE):
    return VideoClip(load_frames(directory, vrange))


def save_fields(fields: DegradationField, directory):
    directory = Path(directory)
    for name, maps in (("T", fields.T), ("D", fields.D)):
        (directory / name).mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(maps, start=1):
            write_raster(directory / name / f"{i:04d}.cdf", m)


def load_fields(directory):
    directory = Path(directory)
    T = _stack(directory / "T", _numbered(directory / "T", ".cdf"), read_raster)
    D = _stack(directory / "D", _numbered(directory / "D", ".cdf"), read_raster)
    if T.shape != D.shape:
        raise IngestError(f"{directory}: T has shape {tuple(T.shape)} but D has {tuple(D.shape)}")
    return DegradationField(T, D)


def save_flows(flows, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f in flows:
        write_raster(directory / f"{f.source_index + 1:04d}_fwd.cfl", f.displacement, FLOW_MAGIC)


def load_flows(directory):
    items = _numbered(directory, "_fwd.cfl")
    return [FlowField(read_raster(p, FLOW_MAGIC, channels=2), i - 1, i) for i, p in items]


@dataclass
class Sample:
    clip_id: str
    clean: torch.Tensor | None  # (l, 3, H, W)
    degraded: torch.Tensor
    fields: DegradationField | None
    meta: dict

    @property
    def kind(self):
        return self.meta.get("kind")

    def offsets(self):
        """Cumulative per-frame offsets (l, 2) from the recorded displacement steps."""
        steps = torch.tensor(self.meta["displacements"], dtype=torch.float64).reshape(-1, 2)
        return torch.cat([torch.zeros(1, 2, dtype=torch.float64), steps.cumsum(0)]).float()


def write_sample(root, clip_id, clean, degraded, fields, flows, meta):
    d = Path(root) / clip_id
    save_clip(clean, d / "clean", CLEAN_RANGE)
    save_clip(degraded, d / "degraded", DEGRADED_RANGE)
    save_fields(fields, d)
    save_flows(flows, d / "flow")
    meta = {**meta, "frames": len(clean), "size": list(clean.size),
            "png_range": {"clean": CLEAN_RANGE, "degraded": DEGRADED_RANGE}}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_sample(directory):
    d = Path(directory)
    meta_path = d / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    rng = meta.get("png_range", {})
    degraded = load_frames(d / "degraded", rng.get("degraded", DEGRADED_RANGE))
    clean = load_frames(d / "clean", rng.get("clean", CLEAN_RANGE)) if (d / "clean").is_dir() else None
    fields = load_fields(d) if (d / "T").is_dir() else None
    for name, t in (("clean", clean), ("T", fields.T if fields else None)):
        if t is not None and (t.shape[0] != degraded.shape[0] or t.shape[-2:] != degraded.shape[-2:]):
            raise IngestError(f"{d}: {name} frames {tuple(t.shape)} do not match degraded {tuple(degraded.shape)}")
    return Sample(d.name, clean, degraded, fields, meta)


def list_samples(root):
    root = Path(root)
    return sorted(p for p in root.iterdir() if (p / "degraded").is_dir())


def synth_dataset(out, kinds, clips, frames, size, seed=0):
    """Write ``clips`` synthetic clips per kind under ``out``; returns the clip ids."""
    from .degrade import random_motion_spec, synth_clip, synth_meta

    H, W = (size, size) if isinstance(size, int) else size
    ids = []
    for k, kind in enumerate(kinds):
        for c in range(clips):
            spec = random_motion_spec(kind, frames, H, W, seed=seed * 1_000_003 + k * 10_007 + c)
            clean, degraded, fields, flows = synth_clip(spec, frames, H, W)
            cid = f"{kind}_{c:04d}"
            write_sample(out, cid, clean, degraded, fields, flows, synth_meta(spec, frames))
            ids.append(cid)
    return ids
