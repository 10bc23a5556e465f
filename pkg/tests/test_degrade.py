import numpy as np
import pytest
import torch

from cdun import diagnostics
from cdun.degrade import (KINDS, TAU_MIN, MotionSpec, VideoClip, apply_degradation, invert_degradation,
                          random_motion_spec, synth_clip)
from cdun.errors import ContractError
from cdun.motion import warp


def test_apply_identity_and_scalar():
    B = torch.rand(3, 5, 6)
    assert torch.equal(apply_degradation(B, torch.ones(1, 5, 6), torch.zeros(1, 5, 6)), B)
    out = apply_degradation(torch.full((3, 1, 1), 0.2), torch.full((1, 1, 1), 0.5), torch.full((1, 1, 1), 0.5))
    assert torch.allclose(out, torch.full((3, 1, 1), 0.6))


def test_apply_matches_elementwise_loop(gen):
    B, T, D = torch.rand(3, 8, 8, generator=gen), torch.rand(1, 8, 8, generator=gen), torch.rand(1, 8, 8, generator=gen)
    out = apply_degradation(B, T, D)
    ref = np.empty((3, 8, 8))
    for c in range(3):
        for y in range(8):
            for x in range(8):
                ref[c, y, x] = float(T[0, y, x]) * float(B[c, y, x]) + float(D[0, y, x])
    assert np.abs(out.numpy() - ref).max() < 1e-7


def test_apply_shape_mismatch():
    with pytest.raises(ContractError):
        apply_degradation(torch.rand(3, 4, 4), torch.rand(1, 4, 5), torch.rand(1, 4, 4))
    with pytest.raises(ContractError):
        apply_degradation(torch.rand(3, 4, 4), torch.rand(3, 4, 4), torch.rand(1, 4, 4))


def test_invert_round_trip(gen):
    B = torch.rand(3, 16, 16, generator=gen, dtype=torch.float64)
    T = 0.1 + 0.9 * torch.rand(1, 16, 16, generator=gen, dtype=torch.float64)
    D = torch.rand(1, 16, 16, generator=gen, dtype=torch.float64)
    assert (invert_degradation(apply_degradation(B, T, D), T, D) - B).abs().max() < 1e-6
    assert torch.equal(invert_degradation(B, torch.ones_like(T), torch.zeros_like(D)), B)
    assert not diagnostics.tripped()


def test_invert_clamps_and_counts():
    F, D = torch.rand(3, 4, 5), torch.rand(1, 4, 5) * 0.1
    out = invert_degradation(F, torch.zeros(1, 4, 5), D)
    assert torch.allclose(out, (F - D) / TAU_MIN)
    assert diagnostics.counters["invert_clamp"] == 20


def test_videoclip_contract():
    with pytest.raises(ContractError):
        VideoClip(torch.rand(2, 3, 4, 4))
    with pytest.raises(ContractError):
        VideoClip(torch.full((3, 3, 4, 4), float("nan")))


@pytest.mark.parametrize("kind", KINDS)
def test_synth_consistency(kind):
    spec = random_motion_spec(kind, 6, 32, 32, seed=3)
    clean, deg, f, flows = synth_clip(spec, 6, 32, 32)
    assert (deg.frames - (f.T * clean.frames + f.D)).abs().max() < 1e-6
    assert clean.frames.min() >= 0 and clean.frames.max() <= 1
    assert f.T.min() >= TAU_MIN and f.D.min() >= 0
    assert len(flows) == 5


def test_synth_kind_parameterisations():
    _, _, f, _ = synth_clip(MotionSpec("rain", seed=1), 4, 32, 32)
    assert torch.equal(f.T, torch.ones_like(f.T))
    _, _, f, _ = synth_clip(MotionSpec("snow", seed=1), 4, 32, 32)
    assert torch.equal(f.T, torch.ones_like(f.T)) and f.D.max() > 0
    _, _, f, _ = synth_clip(MotionSpec("haze", seed=1), 4, 32, 32)
    assert f.T.min() >= 0.3 - 1e-6 and f.T.max() <= 0.95 + 1e-6
    A = (f.D / (1 - f.T)).flatten()
    assert (A - A[0]).abs().max() < 1e-5  # D = A (1 - t) with one airlight
    clean, deg, f, _ = synth_clip(MotionSpec("lowlight", seed=1, severity={"level": 0.25, "variation": 0.0}), 4, 32, 32)
    assert torch.equal(f.D, torch.zeros_like(f.D))
    assert (deg.frames - 0.25 * clean.frames).abs().max() < 1e-7
    _, _, f, _ = synth_clip(MotionSpec("lowlight", seed=2), 4, 32, 32)
    assert f.T.min() >= 0.1 - 1e-6 and f.T.max() <= 0.5 + 1e-6


@pytest.mark.parametrize("sparsity", [0.03, 0.08])
def test_rain_sparsity_within_band(sparsity):
    spec = MotionSpec("rain", seed=5, severity={"sparsity": sparsity})
    _, _, f, _ = synth_clip(spec, 4, 64, 64)
    frac = float((f.D > 0).float().mean())
    assert abs(frac - sparsity) <= 0.2 * sparsity


def test_global_shift_flows_and_exact_warp():
    spec = MotionSpec("rain", displacements=((2, 0),), seed=0)
    clean, _, _, flows = synth_clip(spec, 4, 32, 32)
    assert torch.equal(flows[0].displacement, torch.tensor([2.0, 0.0]).view(2, 1, 1).expand(2, 32, 32))
    for t in range(3):
        w = warp(clean.frames[t], flows[t].displacement)
        assert torch.equal(w[..., :-2], clean.frames[t + 1][..., :-2])


def test_subpixel_and_bound():
    clean, _, _, _ = synth_clip(MotionSpec("haze", displacements=((0.5, -0.5),)), 3, 16, 16)
    assert clean.frames.shape == (3, 3, 16, 16)
    with pytest.raises(ContractError):
        synth_clip(MotionSpec("rain", displacements=((5, 0),)), 3, 16, 16)
    with pytest.raises(ContractError):
        synth_clip(MotionSpec("fog"), 3, 16, 16)
    with pytest.raises(ContractError):
        synth_clip(MotionSpec("rain"), 2, 16, 16)


def test_synth_deterministic():
    a = synth_clip(random_motion_spec("snow", 5, 32, 32, 9), 5, 32, 32)
    b = synth_clip(random_motion_spec("snow", 5, 32, 32, 9), 5, 32, 32)
    assert torch.equal(a[1].frames, b[1].frames)
