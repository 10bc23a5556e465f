"""Multiplicative/additive degradation model and synthetic clip generation.

A degraded frame is ``F = T * B + D`` where ``T`` and ``D`` are single-channel
maps broadcast over the three colour channels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from . import diagnostics
from .errors import ContractError

TAU_MIN = 0.05
KINDS = ("rain", "haze", "snow", "lowlight")


@dataclass
class VideoClip:
    frames: torch.Tensor  # (l, 3, H, W)
    frame_rate: Optional[float] = None

    def __post_init__(self):
        f = self.frames
        if f.dim() != 4 or f.shape[1] != 3:
            raise ContractError(f"clip frames must be (l, 3, H, W), got {tuple(f.shape)}")
        if f.shape[0] < 3:
            raise ContractError(f"clip length must be >= 3, got {f.shape[0]}")
        if not torch.isfinite(f).all():
            raise ContractError("clip contains non-finite values")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def size(self):
        return tuple(self.frames.shape[-2:])


@dataclass
class DegradationField:
    T: torch.Tensor  # (l, 1, H, W)
    D: torch.Tensor  # (l, 1, H, W)

    def __post_init__(self):
        if self.T.shape != self.D.shape or self.T.dim() != 4 or self.T.shape[1] != 1:
            raise ContractError(
                f"T and D must both be (l, 1, H, W); got {tuple(self.T.shape)} and {tuple(self.D.shape)}"
            )

    def __len__(self):
        return self.T.shape[0]


@dataclass
class FlowField:
    displacement: torch.Tensor  # (2, H, W), channels (dx, dy)
    source_index: int
    target_index: int


@dataclass
class MotionSpec:
    """Recipe for one synthetic clip.

    ``displacements`` holds one (dx, dy) step per adjacent frame pair, or a
    single step reused for every pair. The flow from frame t to t+1 equals
    the t-th step: ``warp(clean[t], step) == clean[t + 1]`` on the overlap.
    """

    kind: str
    displacements: Sequence[Sequence[float]] = ((1, 0),)
    seed: int = 0
    severity: dict = field(default_factory=dict)

    def steps(self, length):
        d = [tuple(float(v) for v in s) for s in self.displacements]
        if len(d) == 1:
            d = d * (length - 1)
        if len(d) != length - 1:
            raise ContractError(f"need 1 or {length - 1} displacement steps, got {len(d)}")
        return d

    def offsets(self, length):
        """Cumulative camera offset of each frame, shape (l, 2) as (x, y)."""
        steps = np.asarray(self.steps(length), dtype=np.float64).reshape(-1, 2)
        return np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)], axis=0)


def _check_broadcast(img, t, d):
    if img.shape[-3] != 3 and img.shape[-3] != 1:
        raise ContractError(f"image must have 1 or 3 channels, got shape {tuple(img.shape)}")
    for name, m in (("T", t), ("D", d)):
        if m.shape[-3] != 1 or m.shape[-2:] != img.shape[-2:] or m.dim() != img.dim():
            raise ContractError(f"{name} of shape {tuple(m.shape)} does not broadcast onto image {tuple(img.shape)}")


def apply_degradation(B, T, D):
    """Return ``T * B + D`` (no clamping)."""
    _check_broadcast(B, T, D)
    return T * B + D


def invert_degradation(F, T, D, tau_min=TAU_MIN):
    """Return ``(F - D) / T`` with ``T`` floored at ``tau_min``.

    Elements of ``T`` below the floor are counted under the
    ``invert_clamp`` diagnostic.
    """
    _check_broadcast(F, T, D)
    low = T < tau_min
    n_low = int(low.sum())
    if n_low:
        diagnostics.bump("invert_clamp", n_low)
    return (F - D) / T.clamp(min=tau_min)


# ---------------------------------------------------------------------------
# procedural scenes


def _band_noise(rng, shape, sigmas=(1.0, 3.0, 8.0), weights=(0.25, 0.45, 0.8)):
    out = np.zeros(shape)
    for s, w in zip(sigmas, weights):
        n = ndimage.gaussian_filter(rng.standard_normal(shape), s, mode="wrap")
        out += w * n / (n.std() + 1e-12)
    return out


def make_texture(rng, H, W):
    """Band-limited colour noise with a few flat geometric shapes on top."""
    img = np.stack([_band_noise(rng, (H, W)) for _ in range(3)])
    img = 0.5 + 0.12 * img
    yy, xx = np.mgrid[0:H, 0:W]
    n_shapes = max(3, (H * W) // 400)
    for _ in range(n_shapes):
        colour = rng.uniform(0.1, 0.9, size=3)[:, None]
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = rng.uniform(2, max(3, min(H, W) / 6))
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < rng.uniform(0.5, 1.5) * r)
        img[:, mask] = 0.6 * colour + 0.4 * img[:, mask]
    return np.clip(img, 0.02, 0.98)


def _crop(canvas, ox, oy, H, W):
    """Sample ``canvas[..., oy:oy+H, ox:ox+W]`` with bilinear subpixel support."""
    ix, iy = int(np.floor(ox)), int(np.floor(oy))
    fx, fy = ox - ix, oy - iy
    if fx == 0 and fy == 0:
        return canvas[..., iy:iy + H, ix:ix + W].copy()
    a = canvas[..., iy:iy + H + 1, ix:ix + W + 1]
    top = (1 - fx) * a[..., :H, :W] + fx * a[..., :H, 1:W + 1]
    bot = (1 - fx) * a[..., 1:H + 1, :W] + fx * a[..., 1:H + 1, 1:W + 1]
    return (1 - fy) * top + fy * bot


def _draw_streaks(rng, H, W, sparsity, length, angle, intensity):
    """Additive streak map whose non-zero fraction just reaches ``sparsity``."""
    d = np.zeros((H, W))
    target = max(1, int(round(sparsity * H * W)))
    dx, dy = np.sin(angle), np.cos(angle)
    while np.count_nonzero(d) < target:
        x0, y0 = rng.uniform(0, W), rng.uniform(0, H)
        L = rng.integers(max(2, length // 2), length + 1)
        val = intensity * rng.uniform(0.7, 1.0)
        for s in range(L):
            x, y = int(round(x0 + s * dx)), int(round(y0 + s * dy))
            if 0 <= x < W and 0 <= y < H and np.count_nonzero(d) < target + 2:
                d[y, x] = max(d[y, x], val * (1.0 - 0.4 * s / L))
    return d


def _draw_flakes(rng, H, W, sparsity, max_radius, intensity):
    d = np.zeros((H, W))
    target = max(1, int(round(sparsity * H * W)))
    yy, xx = np.mgrid[0:H, 0:W]
    while np.count_nonzero(d) < target:
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = rng.uniform(0.6, max_radius)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        blob = np.where(dist <= r, intensity * rng.uniform(0.7, 1.0) * (1 - 0.5 * dist / r), 0.0)
        d = np.maximum(d, blob)
    return d


def default_severity(kind, rng):
    """Draw a random severity dictionary for ``kind``."""
    if kind == "rain":
        return {"sparsity": float(rng.uniform(0.03, 0.07)), "length": int(rng.integers(5, 11)),
                "angle": float(rng.uniform(-0.35, 0.35)), "intensity": float(rng.uniform(0.3, 0.5))}
    if kind == "snow":
        return {"sparsity": float(rng.uniform(0.03, 0.07)), "max_radius": float(rng.uniform(1.0, 2.2)),
                "intensity": float(rng.uniform(0.35, 0.55))}
    if kind == "haze":
        return {"beta": float(rng.uniform(0.6, 1.6)), "airlight": float(rng.uniform(0.75, 0.95))}
    if kind == "lowlight":
        return {"level": float(rng.uniform(0.12, 0.45)), "variation": float(rng.uniform(0.0, 0.2))}
    raise ContractError(f"unknown degradation kind {kind!r}; expected one of {KINDS}")


def random_motion_spec(kind, length, H, W, seed):
    rng = np.random.default_rng(seed)
    bound = max(1, min(H, W) // 16)
    step = rng.integers(-bound, bound + 1, size=2)
    if not step.any():
        step[0] = 1
    return MotionSpec(kind=kind, displacements=[tuple(int(v) for v in step)], seed=seed,
                      severity=default_severity(kind, rng))


def synth_clip(spec: MotionSpec, l: int, H: int, W: int, dtype=torch.float32):
    """Generate a paired synthetic clip.

    Returns ``(clean, degraded, fields, flows)`` where ``flows[t]`` is the
    ground-truth flow from frame t to t+1.
    """
    if l < 3:
        raise ContractError(f"clip length must be >= 3, got {l}")
    if spec.kind not in KINDS:
        raise ContractError(f"unknown degradation kind {spec.kind!r}; expected one of {KINDS}")
    steps = spec.steps(l)
    for dx, dy in steps:
        if abs(dx) > W / 4 or abs(dy) > H / 4:
            raise ContractError(f"displacement ({dx}, {dy}) exceeds bound ({W / 4}, {H / 4})")

    rng = np.random.default_rng(spec.seed)
    sev = resolved_severity(spec)
    offsets = spec.offsets(l)
    lo = np.floor(offsets.min(axis=0)).astype(int)
    hi = np.ceil(offsets.max(axis=0)).astype(int)
    CH, CW = H + hi[1] - lo[1] + 2, W + hi[0] - lo[0] + 2
    canvas = make_texture(rng, CH, CW)

    crops = lambda arr: np.stack([_crop(arr, ox - lo[0], oy - lo[1], H, W) for ox, oy in offsets])
    clean = crops(canvas)

    ones = np.ones((l, 1, H, W))
    if spec.kind in ("rain", "snow"):
        T = ones
        maps = []
        for _ in range(l):
            if spec.kind == "rain":
                maps.append(_draw_streaks(rng, H, W, sev["sparsity"], int(sev["length"]), sev["angle"], sev["intensity"]))
            else:
                maps.append(_draw_flakes(rng, H, W, sev["sparsity"], sev["max_radius"], sev["intensity"]))
        D = np.stack(maps)[:, None]
    elif spec.kind == "haze":
        yy = np.linspace(0, 1, CH)[:, None] * np.ones((1, CW))
        bumps = ndimage.gaussian_filter(rng.standard_normal((CH, CW)), 6, mode="wrap")
        depth = 0.3 + 0.7 * (1 - yy) + 0.15 * bumps / (bumps.std() + 1e-12)
        t = np.clip(np.exp(-sev["beta"] * np.clip(depth, 0, None)), 0.3, 0.95)
        T = crops(t[None])
        D = sev["airlight"] * (1 - T)
    else:
        level, var = sev["level"], sev.get("variation", 0.0)
        if var > 0:
            vig = ndimage.gaussian_filter(rng.standard_normal((H, W)), max(H, W) / 4, mode="wrap")
            vig = vig / (np.abs(vig).max() + 1e-12)
            tmap = np.clip(level * (1 + var * vig), 0.1, 0.5)
        else:
            tmap = np.full((H, W), float(level))
        T = np.broadcast_to(tmap, (l, 1, H, W)).copy()
        D = np.zeros((l, 1, H, W))

    to_t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
    clean_t, T_t, D_t = to_t(clean), to_t(T), to_t(D)
    degraded = apply_degradation(clean_t, T_t, D_t)
    flows = [
        FlowField(torch.as_tensor(np.array(s), dtype=dtype).view(2, 1, 1).expand(2, H, W).clone(), t, t + 1)
        for t, s in enumerate(steps)
    ]
    return VideoClip(clean_t), VideoClip(degraded), DegradationField(T_t, D_t), flows


def resolved_severity(spec: MotionSpec):
    """Severity of ``spec`` with unspecified entries filled from seeded defaults."""
    sev = {**default_severity(spec.kind, np.random.default_rng(spec.seed + 7919)), **spec.severity}
    return {k: sev[k] for k in sorted(sev)}


def synth_meta(spec: MotionSpec, l):
    return {
        "kind": spec.kind,
        "severity": resolved_severity(spec),
        "displacements": [list(s) for s in spec.steps(l)],
        "seed": spec.seed,
    }
