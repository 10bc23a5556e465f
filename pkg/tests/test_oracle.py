import numpy as np
import pytest
import torch

from cdun.errors import ContractError
from cdun.oracle import (brute_z_min, check_grad, fd_grad, influence_probe, max_rel_err, oracle_suite,
                         quadratic_gradient, random_window, receptive_field)
from cdun.solver import CDUN, SolverConfig
from cdun.motion import ExactFlow

f64 = torch.float64


def test_single_frame_identity_instance():
    B = np.full((3, 2, 2), 0.3)
    F = np.full((3, 2, 2), 0.8)
    z = brute_z_min(B, [F], [np.ones((1, 2, 2))], [np.zeros((1, 2, 2))], [np.zeros((2, 2, 2))], [np.ones((1, 2, 2))], 0.1)
    assert np.abs(z - (0.1 * 0.3 + 0.8) / 1.1).max() < 1e-14


def test_gradient_vanishes_at_minimiser(gen):
    w = random_window(gen)
    args = [w[k] for k in ("b_prev", "frames", "T", "D", "flows", "weights", "gamma")]
    z = brute_z_min(*args)
    assert np.abs(quadratic_gradient(z, *args)).max() < 1e-9
    assert np.abs(quadratic_gradient(z + 0.01, *args)).max() > 1e-4


def test_rejects_non_permutation_warp(gen):
    w = random_window(gen)
    w["flows"][0] = w["flows"][0] + 0.5
    with pytest.raises(ContractError):
        brute_z_min(*[w[k] for k in ("b_prev", "frames", "T", "D", "flows", "weights", "gamma")])


def test_oracle_suite_rows():
    rows = oracle_suite(instances=4, seed=3)
    assert [r["instance"] for r in rows] == [0, 1, 2, 3]
    assert all(r["max_rel_err"] < 1e-10 and r["grad_norm"] < 1e-9 for r in rows)


def test_fd_on_quadratic():
    x = torch.randn(10, dtype=f64)
    g = fd_grad(lambda v: 0.5 * (v**2).sum(), x)
    assert max_rel_err(g, x) < 1e-9
    assert check_grad(lambda v: 0.5 * (v**2).sum(), x) < 1e-9


def test_fd_subset_leaves_nan():
    g = fd_grad(lambda v: v.sum(), torch.zeros(4, dtype=f64), index=[1, 3])
    assert torch.isnan(g[0]) and g[1] == pytest.approx(1.0)


def test_probe_zero_delta_and_n1():
    l, H = 7, 8
    torch.manual_seed(0)
    F = torch.rand(1, l, 3, H, H, dtype=f64)
    T, D = torch.ones(1, l, 1, H, H, dtype=f64), torch.zeros(1, l, 1, H, H, dtype=f64)
    model = CDUN(SolverConfig(N=1)).double().eval()
    prov = ExactFlow(torch.zeros(l, 2, dtype=f64))
    assert float(influence_probe(model, F, T, D, prov, 3, 0.0).abs().max()) == 0.0
    s = influence_probe(model, F, T, D, prov, 3, 0.1)[0]
    assert [j for j in range(l) if s[j] > 0] == [2, 3, 4]


def test_receptive_field_n2_reach():
    sens = receptive_field(N=2, l=9, size=16)
    reach = sorted(j - 4 for j, v in sens.items() if v > 1e-9)
    assert reach == [-2, -1, 0, 1, 2]
    assert all(v <= 1e-9 for j, v in sens.items() if abs(j - 4) > 2)


def test_kink_tolerant_fd_still_rejects_wrong_gradients():
    # a ReLU kink 3e-6 away from x: central differences straddle it
    x = torch.tensor([1.0, -2.0], dtype=f64)
    fn = lambda v: torch.relu(v[0] - (1.0 - 3e-6)) * 5 + v[1] ** 2
    assert check_grad(fn, x) > 0.1
    assert check_grad(fn, x, kinks=True) < 1e-6
    wrong = lambda v: fn(v) + 0 * v.sum()
    g = torch.tensor([10.0, -4.0], dtype=f64)  # first entry off by 2x
    assert max_rel_err(fd_grad(wrong, x, reference=g), g) > 0.3
