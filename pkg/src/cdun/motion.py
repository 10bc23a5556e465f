"""Flow estimation, backward warping, robust warping and motion weights.

Flow convention: a flow ``m`` from ``src`` to ``dst`` satisfies
``warp(src, m) ~= dst``, i.e. ``dst(p) = src(p + m(p))``. Channel 0 is the
horizontal displacement, channel 1 the vertical one, both in pixels.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as Fn
from torch import nn

from .errors import ConfigError, ContractError

PROVIDERS = ("exact", "coarse", "learned")


def warp(x, flow):
    """Backward-warp ``x`` (..., C, H, W) by ``flow`` (..., 2, H, W).

    Bilinear sampling with clamp-to-edge borders. Integer flows reduce to
    exact pixel copies.
    """
    if x.shape[:-3] != flow.shape[:-3] or x.shape[-2:] != flow.shape[-2:] or flow.shape[-3] != 2:
        raise ContractError(f"cannot warp {tuple(x.shape)} with flow {tuple(flow.shape)}")
    lead = x.shape[:-3]
    C, H, W = x.shape[-3:]
    x = x.reshape(-1, C, H * W)
    flow = flow.reshape(-1, 2, H, W).to(x.dtype)
    gy, gx = torch.meshgrid(
        torch.arange(H, dtype=x.dtype, device=x.device),
        torch.arange(W, dtype=x.dtype, device=x.device),
        indexing="ij",
    )
    px = (gx + flow[:, 0]).clamp(0, W - 1)
    py = (gy + flow[:, 1]).clamp(0, H - 1)
    x0 = px.floor().clamp(max=max(W - 2, 0))
    y0 = py.floor().clamp(max=max(H - 2, 0))
    wx, wy = px - x0, py - y0
    x0, y0 = x0.long(), y0.long()
    x1, y1 = (x0 + 1).clamp(max=W - 1), (y0 + 1).clamp(max=H - 1)

    def tap(yi, xi):
        idx = (yi * W + xi).reshape(-1, 1, H * W).expand(-1, C, -1)
        return x.gather(2, idx).reshape(-1, C, H, W)

    wx, wy = wx[:, None], wy[:, None]
    out = (1 - wy) * ((1 - wx) * tap(y0, x0) + wx * tap(y0, x1)) + wy * ((1 - wx) * tap(y1, x0) + wx * tap(y1, x1))
    return out.reshape(*lead, C, H, W)


def in_frame(flow, tol=1e-6):
    """(..., 1, H, W) mask of pixels whose backward-warp source lies inside the frame."""
    H, W = flow.shape[-2:]
    gy, gx = torch.meshgrid(
        torch.arange(H, dtype=flow.dtype, device=flow.device),
        torch.arange(W, dtype=flow.dtype, device=flow.device),
        indexing="ij",
    )
    px, py = gx + flow[..., 0, :, :], gy + flow[..., 1, :, :]
    ok = (px >= -tol) & (px <= W - 1 + tol) & (py >= -tol) & (py <= H - 1 + tol)
    return ok.unsqueeze(-3).to(flow.dtype)


# ---------------------------------------------------------------------------
# flow providers
#
# A provider is called as ``provider(src, dst, src_idx, dst_idx)`` with frame
# stacks of shape (b, k, 3, H, W) and frame-index tensors of shape (k,) into
# the clip. It returns flows of shape (b, k, 2, H, W).


class ExactFlow:
    """Ground-truth flow for globally translating clips.

    ``offsets`` has shape (b, l, 2): cumulative (x, y) offset of every frame,
    so the flow from frame i to frame j is ``offsets[j] - offsets[i]``.
    """

    def __init__(self, offsets):
        if offsets is None:
            raise ConfigError("flow provider 'exact' needs ground-truth motion for the clip")
        offsets = torch.as_tensor(offsets)
        self.offsets = offsets[None] if offsets.dim() == 2 else offsets

    def __call__(self, src, dst, src_idx, dst_idx):
        H, W = src.shape[-2:]
        d = self.offsets[:, dst_idx] - self.offsets[:, src_idx]
        return d.to(src.dtype)[..., None, None].expand(*d.shape, H, W).clone()


def _box(x, k):
    return Fn.avg_pool2d(x, k, stride=1, padding=k // 2, count_include_pad=False)


def _median(flow, k):
    n, c, H, W = flow.shape
    patches = Fn.unfold(Fn.pad(flow, (k // 2,) * 4, mode="replicate"), k)
    return patches.view(n, c, k * k, H, W).median(2).values


def _lk_step(s, d, flow, window):
    """One Lucas-Kanade update of ``flow`` with box-window normal equations."""
    w = warp(s, flow)
    it = w - d
    ix = 0.5 * (Fn.pad(w, (0, 2, 0, 0), mode="replicate")[..., 2:] - Fn.pad(w, (2, 0, 0, 0), mode="replicate")[..., :-2])
    iy = 0.5 * (Fn.pad(w, (0, 0, 0, 2), mode="replicate")[..., 2:, :] - Fn.pad(w, (0, 0, 2, 0), mode="replicate")[..., :-2, :])
    sxx = _box((ix * ix).sum(1, keepdim=True), window)
    sxy = _box((ix * iy).sum(1, keepdim=True), window)
    syy = _box((iy * iy).sum(1, keepdim=True), window)
    sxt = _box((ix * it).sum(1, keepdim=True), window)
    syt = _box((iy * it).sum(1, keepdim=True), window)
    reg = 1e-6
    det = (sxx + reg) * (syy + reg) - sxy**2
    du = -((syy + reg) * sxt - sxy * syt) / det
    dv = -((sxx + reg) * syt - sxy * sxt) / det
    return flow + torch.cat([du, dv], 1).clamp(-1, 1)


def _grid_search(s, d, flow, offsets, window):
    """Per-pixel best additive candidate from ``offsets`` (k,) on both axes."""
    k = len(offsets)
    n, _, H, W = s.shape
    costs = torch.empty(k * k, n, H, W, dtype=s.dtype)
    for a, dy in enumerate(offsets):
        for b, dx in enumerate(offsets):
            cand = flow + torch.stack([dx, dy]).view(1, 2, 1, 1)
            err = (warp(s, cand) - d).pow(2).sum(1, keepdim=True)
            costs[a * k + b] = _box(err, window)[:, 0]
    # ties resolve toward the current estimate
    centre = (k * k) // 2
    best = costs.argmin(0)
    best = torch.where(costs[centre] <= costs.gather(0, best[None])[0], torch.full_like(best, centre), best)
    return flow + torch.stack([offsets[best % k], offsets[best // k]], 1)


@torch.no_grad()
def coarse_flow(src, dst, levels=3, radius=3, window=7, median=5, subpixel=4, refine=0):
    """Multi-scale patch-matching flow from ``src`` (n, C, H, W) to ``dst``.

    At each pyramid level the residual integer displacement in a
    ``(2r+1)^2`` grid is chosen per pixel by box-filtered squared error and
    outliers are removed with a median filter. At full resolution a second
    search on a ``1/subpixel`` grid within half a pixel follows, then
    ``refine`` Lucas-Kanade steps.
    """
    pyr = [(src, dst)]
    for _ in range(levels - 1):
        s, d = pyr[-1]
        if min(s.shape[-2:]) < 8:
            break
        pyr.append((Fn.avg_pool2d(s, 2), Fn.avg_pool2d(d, 2)))
    flow = None
    offs = torch.arange(-radius, radius + 1, dtype=src.dtype)
    for s, d in reversed(pyr):
        n, _, H, W = s.shape
        if flow is None:
            flow = s.new_zeros(n, 2, H, W)
        else:
            flow = torch.round(2 * Fn.interpolate(flow, size=(H, W), mode="nearest"))
        flow = _grid_search(s, d, flow, offs, window)
        if median:
            flow = _median(flow, median)
    if subpixel > 1:
        fine = torch.arange(-subpixel // 2, subpixel // 2 + 1, dtype=src.dtype) / subpixel
        flow = _grid_search(src, dst, flow, fine, window)
        if median:
            flow = _median(flow, median)
    for _ in range(refine):
        flow = _lk_step(src, dst, flow, window)
    return flow


class CoarseFlow:
    def __init__(self, **kw):
        self.kw = kw

    def __call__(self, src, dst, src_idx=None, dst_idx=None):
        lead = src.shape[:-3]
        C, H, W = src.shape[-3:]
        f = coarse_flow(src.reshape(-1, C, H, W).detach(), dst.reshape(-1, C, H, W).detach(), **self.kw)
        return f.reshape(*lead, 2, H, W)


class LearnedFlow(nn.Module):
    """Small trainable correlation-based flow estimator.

    Shared conv features of both frames are correlated over a local search
    window at half resolution (cosine similarity), a soft-argmin with a
    learnable temperature turns the cost volume into a flow, and a
    zero-initialised conv head adds a full-resolution residual.
    """

    def __init__(self, width=16, radius=4):
        super().__init__()
        self.radius = radius
        self.feat = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
        )
        self.log_tau = nn.Parameter(torch.tensor(math.log(0.05)))
        self.refine = nn.Sequential(
            nn.Conv2d(2 + 6, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2, 3, padding=1),
        )
        nn.init.zeros_(self.refine[-1].weight)
        nn.init.zeros_(self.refine[-1].bias)
        r = torch.arange(-radius, radius + 1, dtype=torch.float32)
        dy, dx = torch.meshgrid(r, r, indexing="ij")
        self.register_buffer("disp", torch.stack([dx.flatten(), dy.flatten()], 1), persistent=False)

    def _features(self, x):
        f = self.feat(Fn.avg_pool2d(x, 2, ceil_mode=True))
        return f / f.norm(dim=1, keepdim=True).clamp(min=1e-6)

    def forward(self, src, dst, src_idx=None, dst_idx=None):
        lead = src.shape[:-3]
        C, H, W = src.shape[-3:]
        s, d = src.reshape(-1, C, H, W), dst.reshape(-1, C, H, W)
        fs, fd = self._features(s), self._features(d)
        r = self.radius
        h, w = fs.shape[-2:]
        padded = Fn.pad(fs, (r, r, r, r), mode="replicate")
        # cost[:, k] = <f_dst(p), f_src(p + disp[k])>
        cost = torch.stack([(fd * padded[:, :, r + int(dy):r + int(dy) + h, r + int(dx):r + int(dx) + w]).sum(1)
                            for dx, dy in self.disp.tolist()], 1)
        prob = torch.softmax(cost / self.log_tau.exp(), dim=1)
        flow = 2 * torch.einsum("bkhw,kc->bchw", prob, self.disp.to(prob.dtype))
        flow = Fn.interpolate(flow, size=(H, W), mode="bilinear", align_corners=False)
        flow = flow + self.refine(torch.cat([flow, warp(s, flow), d], 1))
        return flow.reshape(*lead, 2, H, W)


def fit_learned_flow(model: LearnedFlow, frames, offsets, steps=200, lr=1e-3, seed=0):
    """Supervised endpoint-error fit on clips with known global motion.

    ``frames``: (b, l, 3, H, W); ``offsets``: (b, l, 2). Returns final EPE.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    b, l = frames.shape[:2]
    epe = float("nan")
    for _ in range(steps):
        i = torch.randint(0, l, (b,), generator=gen)
        j = torch.randint(0, l, (b,), generator=gen)
        rows = torch.arange(b)
        src, dst = frames[rows, i], frames[rows, j]
        truth = (offsets[rows, j] - offsets[rows, i])[..., None, None].expand(-1, -1, *src.shape[-2:])
        loss = (model(src, dst) - truth).pow(2).sum(1).add(1e-8).sqrt().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        epe = float(loss.detach())
    return epe


def make_provider(name, offsets=None, learned: LearnedFlow | None = None):
    if name == "exact":
        return ExactFlow(offsets)
    if name == "coarse":
        return CoarseFlow()
    if name == "learned":
        return learned if learned is not None else LearnedFlow()
    raise ConfigError(f"unknown flow provider {name!r}; expected one of {PROVIDERS}")


def estimate_flow(src, dst, provider, src_index=0, dst_index=1):
    """Flow between two single images (C, H, W) using ``provider``."""
    if src.shape != dst.shape:
        raise ContractError(f"frame shapes differ: {tuple(src.shape)} vs {tuple(dst.shape)}")
    si, di = torch.tensor([src_index]), torch.tensor([dst_index])
    return provider(src[None, None], dst[None, None], si, di)[0, 0]


# ---------------------------------------------------------------------------
# robust warping module


class RobustWarp(nn.Module):
    """Warp an operand, then fuse it with structure features of the objective.

    ``S(X_i)`` concatenates three convolutions of the objective (3x3, 5x5 and
    5x5 with dilation 2) and mixes them with one more 3x3 convolution. The
    warped operand and ``S(X_i)`` are concatenated and fused by two 3x3
    convolutions.

    At construction the fusion is a pass-through: the first fusion layer
    carries ``+x`` and ``-x`` of the warped operand through the ReLU and the
    second recombines them, with zero weight on the structure branch.
    """

    def __init__(self, channels, features=8, hidden=16):
        super().__init__()
        if hidden < 2 * channels:
            raise ContractError("hidden width must hold the +/- identity channels")
        self.channels = channels
        self.s3 = nn.Conv2d(channels, features, 3, padding=1)
        self.s5 = nn.Conv2d(channels, features, 5, padding=2)
        self.s5d2 = nn.Conv2d(channels, features, 5, padding=4, dilation=2)
        self.s_fuse = nn.Conv2d(3 * features, features, 3, padding=1)
        self.fuse1 = nn.Conv2d(channels + features, hidden, 3, padding=1)
        self.fuse2 = nn.Conv2d(hidden, channels, 3, padding=1)
        self.reset_passthrough()

    @torch.no_grad()
    def reset_passthrough(self):
        c = self.channels
        self.fuse1.weight[: 2 * c].zero_()
        self.fuse1.bias[: 2 * c].zero_()
        self.fuse2.weight.zero_()
        self.fuse2.bias.zero_()
        for k in range(c):
            self.fuse1.weight[k, k, 1, 1] = 1.0
            self.fuse1.weight[c + k, k, 1, 1] = -1.0
            self.fuse2.weight[k, k, 1, 1] = 1.0
            self.fuse2.weight[k, c + k, 1, 1] = -1.0

    def structure(self, x):
        return self.s_fuse(torch.cat([self.s3(x), self.s5(x), self.s5d2(x)], 1))

    def _check(self, t, what):
        if t.shape[-3] != self.channels:
            raise ContractError(f"RobustWarp built for {self.channels} channels, got {what} {tuple(t.shape)}")

    def fuse(self, warped, structure):
        """Fuse warped operands (..., C, H, W) with structure features.

        ``structure`` may omit leading dimensions of ``warped``; it is
        broadcast, so one objective can serve several warped operands.
        """
        self._check(warped, "operand")
        C, H, W = warped.shape[-3:]
        s = structure.expand(*warped.shape[:-3], *structure.shape[-3:])
        x = torch.cat([warped.reshape(-1, C, H, W), s.reshape(-1, *s.shape[-3:])], 1)
        return self.fuse2(torch.relu(self.fuse1(x))).reshape(warped.shape)

    def forward(self, operand, objective, flow):
        self._check(operand, "operand")
        self._check(objective, "objective")
        lead = objective.shape[:-3]
        s = self.structure(objective.reshape(-1, *objective.shape[-3:]))
        return self.fuse(warp(operand, flow), s.reshape(*lead, *s.shape[-3:]))


def rwm(operand, objective, flow, params: RobustWarp | None = None):
    """Robust warp; ``params=None`` means plain explicit warping."""
    if params is None:
        return warp(operand, flow)
    return params(operand, objective, flow)


# ---------------------------------------------------------------------------
# spatial motion weight


class MotionWeight(nn.Module):
    """conv -> norm -> ReLU -> conv -> sigmoid on the squared flow magnitude.

    Initialised to a smooth monotone decreasing map of ``||m||^2`` so that
    long displacements start with low confidence.
    """

    def __init__(self, hidden=8, scale=64.0, bias=2.0, seed=0):
        super().__init__()
        self.conv1 = nn.Conv2d(1, hidden, 3, padding=1)
        self.norm = nn.BatchNorm2d(hidden)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.conv1.weight.copy_(1e-3 / scale * torch.randn(self.conv1.weight.shape, generator=gen))
            self.conv1.bias.zero_()
            gains = torch.linspace(0.5, 1.5, hidden)
            self.conv1.weight[:, 0, 1, 1] += gains / scale
            self.conv2.weight.copy_(1e-3 * torch.randn(self.conv2.weight.shape, generator=gen))
            self.conv2.weight[0, :, 1, 1] = -1.0 / hidden
            self.conv2.bias.fill_(bias)

    def forward(self, flow):
        lead = flow.shape[:-3]
        H, W = flow.shape[-2:]
        q = flow.reshape(-1, 2, H, W).pow(2).sum(1, keepdim=True)
        u = torch.sigmoid(self.conv2(torch.relu(self.norm(self.conv1(q)))))
        return u.reshape(*lead, 1, H, W)


def motion_weight(flow, params: MotionWeight):
    return params(flow)
