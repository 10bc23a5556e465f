"""Training losses and quality metrics.

Images are (..., C, H, W) tensors in [0, 1]; leading dimensions are folded
into the batch.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as Fn

from .degrade import invert_degradation
from .errors import ContractError

EPS = 1e-3
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _gauss(size, sigma, dtype, device):
    x = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(x, y, data_range=1.0, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    if x.shape != y.shape:
        raise ContractError(f"ssim inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    H, W = x.shape[-2:]
    if H < window or W < window:
        raise ContractError(f"ssim needs images at least {window}x{window}, got {H}x{W}")
    C = x.shape[-3]
    x = x.reshape(-1, C, H, W)
    y = y.reshape(-1, C, H, W)
    g = _gauss(window, sigma, x.dtype, x.device)
    kx = g.view(1, 1, 1, -1).expand(C, 1, 1, window)
    ky = g.view(1, 1, -1, 1).expand(C, 1, window, 1)

    def blur(t):
        return Fn.conv2d(Fn.conv2d(t, kx, groups=C), ky, groups=C)

    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))


def ssim(x, y, data_range=1.0):
    """Mean structural similarity (11x11 Gaussian window, sigma 1.5, valid region)."""
    return ssim_map(x, y, data_range).mean()


def charbonnier(x, y, eps=EPS):
    """Mean over pixels of sqrt(diff^2 + eps^2)."""
    if x.shape != y.shape:
        raise ContractError(f"charbonnier inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    return torch.sqrt((x - y) ** 2 + eps**2).mean()


def loss_sup(x, y, eps=EPS):
    return (1 - ssim(x, y)) + charbonnier(x, y, eps)


def loss_cdun(B, Y, eps=EPS):
    """Frame-mean of ``loss_sup``; ``B``, ``Y``: (b, l, 3, H, W) or (l, 3, H, W)."""
    l = B.shape[-4]
    return sum(loss_sup(B[..., i, :, :, :], Y[..., i, :, :, :], eps) for i in range(l)) / l


def loss_sade(T, D, F, Y, eps=EPS):
    """Frame-sum of ``loss_sup`` between the inverted degradation and the target."""
    X = invert_degradation(F, T, D)
    return sum(loss_sup(X[..., i, :, :, :], Y[..., i, :, :, :], eps) for i in range(F.shape[-4]))


def psnr(x, y, data_range=1.0):
    """Peak signal-to-noise ratio in dB, capped at 100 for near-identical inputs."""
    mse = float(((x.double() - y.double()) ** 2).mean())
    if mse < 1e-10:
        return 100.0
    return 10 * math.log10(data_range**2 / mse)
