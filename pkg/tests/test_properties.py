"""Randomised invariants checked with hypothesis."""
import torch
from hypothesis import given, settings, strategies as st

from cdun.degrade import apply_degradation, invert_degradation
from cdun.motion import warp
from cdun.oracle import brute_z_min, random_window
from cdun.sade import combine_experts, sample_frames
from cdun.solver import window_indices, z_update

f64 = torch.float64
seeds = st.integers(0, 2**31 - 1)
fast = settings(max_examples=40, deadline=None)


def _rand(seed, *shape):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=f64)


@fast
@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_warp_is_linear_in_the_image(seed, a, b):
    x, y = _rand(seed, 2, 3, 9, 7), _rand(seed + 1, 2, 3, 9, 7)
    flow = 4 * _rand(seed + 2, 2, 2, 9, 7) - 2
    torch.testing.assert_close(warp(a * x + b * y, flow), a * warp(x, flow) + b * warp(y, flow))


@fast
@given(seeds, st.integers(-3, 3), st.integers(-3, 3))
def test_integer_warp_is_a_clamped_shift(seed, dx, dy):
    x = _rand(seed, 1, 1, 8, 6)
    flow = torch.tensor([float(dx), float(dy)], dtype=f64).view(1, 2, 1, 1).expand(1, 2, 8, 6)
    ys = (torch.arange(8) + dy).clamp(0, 7)
    xs = (torch.arange(6) + dx).clamp(0, 5)
    torch.testing.assert_close(warp(x, flow), x[:, :, ys][:, :, :, xs])


@fast
@given(seeds, st.integers(1, 6), st.integers(1, 40))
def test_combine_experts_is_linear(seed, n, P):
    bank = _rand(seed, n, P)
    w1, w2 = _rand(seed + 1, 3, n), _rand(seed + 2, 3, n)
    torch.testing.assert_close(combine_experts(w1 + 2 * w2, bank),
                               combine_experts(w1, bank) + 2 * combine_experts(w2, bank))
    onehot = torch.eye(n, dtype=f64)
    torch.testing.assert_close(combine_experts(onehot, bank), bank)


@given(st.integers(1, 200), st.integers(1, 20))
def test_sample_frames_properties(l, m):
    idx = sample_frames(l, m)
    assert len(idx) == min(l, m)
    assert idx[0] == 1 and all(1 <= i <= l for i in idx)
    assert all(a < b for a, b in zip(idx, idx[1:]))
    gaps = {b - a for a, b in zip(idx, idx[1:])}
    assert len(gaps) <= 1  # equidistant


@given(st.integers(3, 100), st.data())
def test_window_members_are_three_distinct_neighbours(l, data):
    i = data.draw(st.integers(1, l))
    w = window_indices(i, l)
    assert w[1] == i and len(set(w)) == 3
    assert all(1 <= j <= l and abs(j - i) <= 2 for j in w)


@fast
@given(seeds)
def test_degradation_round_trip(seed):
    B = _rand(seed, 2, 3, 5, 5)
    T = 0.05 + 0.95 * _rand(seed + 1, 2, 1, 5, 5)
    D = 0.5 * _rand(seed + 2, 2, 1, 5, 5)
    torch.testing.assert_close(invert_degradation(apply_degradation(B, T, D), T, D), B)


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_z_update_matches_brute_force(seed):
    w = random_window(torch.Generator().manual_seed(seed), 6, 5)
    z = z_update(w["b_prev"], w["frames"], w["T"], w["D"], w["flows"], w["weights"], w["gamma"])
    ref = brute_z_min(*(w[k] for k in ("b_prev", "frames", "T", "D", "flows", "weights", "gamma")))
    assert float((z - torch.as_tensor(ref)).abs().max()) < 1e-10 * max(1.0, float(abs(ref).max()))
