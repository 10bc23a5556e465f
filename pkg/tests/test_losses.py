import pytest
import torch

from cdun.degrade import MotionSpec, synth_clip
from cdun.errors import ContractError
from cdun.losses import charbonnier, loss_cdun, loss_sade, loss_sup, psnr, ssim
from cdun.oracle import check_grad, fd_grad

f64 = torch.float64


def test_ssim_identity_symmetry_and_anticorrelation(gen):
    x = torch.rand(1, 3, 16, 16, generator=gen, dtype=f64)
    y = torch.rand(1, 3, 16, 16, generator=gen, dtype=f64)
    assert float(ssim(x, x)) == 1.0
    assert abs(float(ssim(x, y) - ssim(y, x))) < 1e-9
    half = torch.zeros(1, 3, 16, 16, dtype=f64)
    half[..., :, 8:] = 1
    assert float(ssim(half, 1 - half)) < 0


def test_ssim_too_small():
    with pytest.raises(ContractError):
        ssim(torch.rand(1, 3, 10, 10), torch.rand(1, 3, 10, 10))


def test_charbonnier_values(gen):
    x = torch.rand(2, 3, 8, 8, generator=gen, dtype=f64)
    assert float(charbonnier(x, x, 0.001)) == pytest.approx(0.001, abs=1e-15)
    vals = [float(charbonnier(x + d, x)) for d in (0.0, 0.01, 0.1, 0.5)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_charbonnier_smooth_at_zero(gen):
    x = torch.rand(1, 3, 8, 8, generator=gen, dtype=f64)
    y = x.clone()
    g = fd_grad(lambda v: charbonnier(v, y), x)
    assert float(g.norm()) < 1e-6
    xr = x.clone().requires_grad_(True)
    (ga,) = torch.autograd.grad(charbonnier(xr, y), xr)
    assert torch.isfinite(ga).all() and float(ga.norm()) < 1e-6


def test_loss_sup_values(gen):
    x = torch.rand(1, 3, 12, 12, generator=gen, dtype=f64)
    assert float(loss_sup(x, x)) == pytest.approx(0.001, abs=1e-12)
    assert float(loss_sup(x, 1 - x)) > 0.001


def test_loss_sade_at_ground_truth():
    clean, deg, f, _ = synth_clip(MotionSpec("haze", seed=1), 5, 16, 16, dtype=f64)
    assert float(loss_sade(f.T, f.D, deg.frames, clean.frames)) == pytest.approx(5 * 0.001, abs=1e-6)


def test_loss_cdun_ordering(gen):
    Y = 0.2 + torch.rand(2, 3, 3, 12, 12, generator=gen)
    assert loss_cdun(torch.zeros_like(Y), Y) > loss_cdun(Y, Y)
    assert float(loss_cdun(Y, Y)) == pytest.approx(0.001, abs=1e-6)


def test_psnr():
    x = torch.rand(3, 8, 8)
    assert psnr(x, x) == 100.0
    assert psnr(torch.zeros(3, 8, 8, dtype=f64), torch.full((3, 8, 8), 0.1, dtype=f64)) == pytest.approx(20.0, abs=1e-9)


@pytest.mark.parametrize("name", ["ssim", "charbonnier", "loss_sup"])
def test_loss_gradients_fd(name, gen):
    y = torch.rand(1, 3, 12, 12, generator=gen, dtype=f64)
    x = torch.rand(1, 3, 12, 12, generator=gen, dtype=f64)
    fn = {"ssim": ssim, "charbonnier": charbonnier, "loss_sup": loss_sup}[name]
    assert check_grad(lambda v: fn(v, y), x) < 1e-4


def test_loss_sade_gradient_fd(gen):
    F = torch.rand(3, 3, 12, 12, generator=gen, dtype=f64)
    Y = torch.rand(3, 3, 12, 12, generator=gen, dtype=f64)
    D = 0.1 * torch.rand(3, 1, 12, 12, generator=gen, dtype=f64)
    T = 0.5 + 0.5 * torch.rand(3, 1, 12, 12, generator=gen, dtype=f64)
    idx = torch.randperm(T.numel(), generator=gen)[:20].tolist()
    assert check_grad(lambda t: loss_sade(t, D, F, Y), T, index=idx) < 1e-4
