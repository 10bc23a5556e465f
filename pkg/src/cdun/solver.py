"""Half-quadratic-splitting unfolding solver.

Each iteration k = 1..N, for every frame i of the clip:

1. build the 3-frame temporal window around i,
2. estimate flows on the current re-degraded frames ``F^(k-1)``,
3. compute spatial motion weights from the squared flow magnitude, zeroed
   where the flow points outside the frame (no correspondence exists there),
4. solve the fidelity subproblem in closed form (``z_update``),
5. apply the k-th learned prior (``prior_step``).

Then the estimates are re-degraded (``redegrade``) and the penalty advances
by ``s``. Frame indices are 1-based in ``window_indices`` and 0-based
everywhere else.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator

import torch
import torch.nn.functional as Fn
from torch import nn

from . import diagnostics
from .degrade import DegradationField, VideoClip, apply_degradation
from .errors import ConfigError, ContractError
from .motion import PROVIDERS, MotionWeight, RobustWarp, in_frame, warp

log = logging.getLogger(__name__)

DENOM_FLOOR = 1e-6


@dataclass
class SolverConfig:
    N: int = 5
    gamma0: float = 0.1
    s: float = 0.05
    n_half: int = 1
    flow: str = "exact"
    prior_width: int = 16
    rwm_features: int = 8
    rwm_hidden: int = 16
    motion_hidden: int = 8
    frame_mask: bool = True  # drop window correspondences that leave the frame

    def __post_init__(self):
        if self.N < 1:
            raise ConfigError(f"solver.N must be >= 1, got {self.N}")
        if not self.gamma0 > 0:
            raise ConfigError(f"solver.gamma0 must be > 0, got {self.gamma0}")
        if self.s < 0:
            raise ConfigError(f"solver.s must be >= 0, got {self.s}")
        if self.n_half != 1:
            raise ConfigError("solver.n_half is fixed at 1 (3-frame windows)")
        if self.flow not in PROVIDERS:
            raise ConfigError(f"unknown flow provider {self.flow!r}; expected one of {PROVIDERS}")

    def gamma(self, k):
        """Penalty used at iteration k+1, i.e. gamma^(k) = gamma0 + k*s."""
        return round(self.gamma0 + k * self.s, 12)

    def gammas(self, n=None):
        return [self.gamma(k) for k in range(self.N if n is None else n)]


@dataclass
class SolverState:
    k: int
    gamma: float
    B: torch.Tensor  # (b, l, 3, H, W)
    F_cur: torch.Tensor  # frames the next data term will use
    Z: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


def window_indices(i, l):
    """1-based temporal window of frame ``i`` in a clip of length ``l``."""
    if l < 3:
        raise ContractError(f"clips shorter than 3 frames are unsupported (got {l})")
    if not 1 <= i <= l:
        raise ContractError(f"frame index {i} outside 1..{l}")
    if i == 1:
        return (2, 1, 3)
    if i == l:
        return (l - 2, l, l - 1)
    return (i - 1, i, i + 1)


def window_table(l, device=None):
    """(3, l) tensor of 0-based window members; row 1 is always the frame itself."""
    rows = [[j - 1 for j in window_indices(i, l)] for i in range(1, l + 1)]
    return torch.tensor(rows, dtype=torch.long, device=device).t().contiguous()


def z_update(b_prev, frames, T, D, flows, weights, gamma, rwm3=None, rwm1=None, center=None):
    """Closed-form minimiser of the fidelity subproblem for one frame.

    ``frames``, ``T``, ``D``, ``flows`` and ``weights`` are sequences over the
    window members j: ``flows[j]`` is the flow from frame j to the target
    frame i and ``weights[j]`` is the motion weight ``U_{i->j}``. ``center``
    is the position of frame i itself (default: middle of the window). With
    ``rwm3``/``rwm1`` left as None the motion operator is plain warping.
    """
    n = len(frames)
    if not (len(T) == len(D) == len(flows) == len(weights) == n) or n == 0:
        raise ContractError("window sequences must be non-empty and of equal length")
    if not gamma > 0:
        raise ContractError(f"gamma must be positive, got {gamma}")
    c = n // 2 if center is None else center
    Fw, Tw, Dw, Mw, Uw = (torch.stack(list(x)) for x in (frames, T, D, flows, weights))
    num = (Uw * _motion_op(Tw * (Fw - Dw), Tw[c] * (Fw[c] - Dw[c]), Mw, rwm3)).sum(0)
    den = (Uw * _motion_op(Tw**2, Tw[c] ** 2, Mw, rwm1)).sum(0) / n + gamma
    low = den < DENOM_FLOOR
    if low.any():
        diagnostics.bump("z_denominator", int(low.sum()))
        log.warning("z_update denominator fell to %.3g; clamping at %g", float(den.min().detach()), DENOM_FLOOR)
        den = den.clamp(min=DENOM_FLOOR)
    return (gamma * b_prev + num / n) / den


def _motion_op(operands, objective, flows, params):
    """Motion operator applied to stacked window operands (n, ..., C, H, W)."""
    warped = warp(operands, flows)
    if params is None:
        return warped
    lead = objective.shape[:-3]
    s = params.structure(objective.reshape(-1, *objective.shape[-3:]))
    return params.fuse(warped, s.reshape(*lead, *s.shape[-3:]))


def energy_data_term(z, frames, T, D, flows, weights, rwm3=None, rwm1=None, center=None, mask=None):
    """Motion-weighted fidelity energy of estimate ``z`` for one frame.

    Each window member contributes ``1/2 * sum U * (A z^2 - 2 b z + c)`` with
    ``A``, ``b`` the same warped quantities ``z_update`` uses and
    ``c = warp((F_j - D_j)^2)``. For permutation warps and pass-through
    warping this equals ``1/2 * sum U * (M(F_j - D_j) - M(T_j) z)^2``.
    Returns a tensor over the leading (batch) dimensions.
    """
    n = len(frames)
    c = n // 2 if center is None else center
    Fw, Tw, Dw, Mw, Uw = (torch.stack(list(x)) for x in (frames, T, D, flows, weights))
    a = _motion_op(Tw**2, Tw[c] ** 2, Mw, rwm1)
    b = _motion_op(Tw * (Fw - Dw), Tw[c] * (Fw[c] - Dw[c]), Mw, rwm3)
    r = warp((Fw - Dw) ** 2, Mw)
    e = 0.5 * Uw * (a * z**2 - 2 * b * z + r)
    if mask is not None:
        e = e * mask
    return e.sum((-3, -2, -1)).sum(0) / n


def redegrade(B, T, D):
    """Re-apply the degradation to the current estimates: ``T * B + D``."""
    return apply_degradation(B, T, D)


class PriorNet(nn.Module):
    """Three-level encoder-decoder with skips and a zero-initialised residual head."""

    def __init__(self, width=16, channels=3):
        super().__init__()
        w = width

        def block(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
                                 nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU())

        self.enc1 = block(channels, w)
        self.enc2 = block(w, 2 * w)
        self.enc3 = block(2 * w, 4 * w)
        self.dec2 = block(6 * w, 2 * w)
        self.dec1 = block(3 * w, w)
        self.head = nn.Conv2d(w, channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z):
        lead = z.shape[:-3]
        x = z.reshape(-1, *z.shape[-3:])
        e1 = self.enc1(x)
        e2 = self.enc2(Fn.avg_pool2d(e1, 2, ceil_mode=True))
        e3 = self.enc3(Fn.avg_pool2d(e2, 2, ceil_mode=True))
        up = lambda t, ref: Fn.interpolate(t, size=ref.shape[-2:], mode="bilinear", align_corners=False)
        d2 = self.dec2(torch.cat([up(e3, e2), e2], 1))
        d1 = self.dec1(torch.cat([up(d2, e1), e1], 1))
        return (x + self.head(d1)).reshape(*lead, *z.shape[-3:])


def prior_step(z, k, priors):
    """Apply the k-th (0-based) iteration's prior network."""
    if k >= len(priors):
        raise ConfigError(f"no prior parameters for iteration {k} (have {len(priors)})")
    return priors[k](z)


class CDUN(nn.Module):
    """All learnable parts of the unfolded solver.

    Per iteration stage: one prior network and two robust-warp instances
    (3-channel and 1-channel operands), shared across window members. One
    motion-weight network is shared by all stages.
    """

    def __init__(self, cfg: SolverConfig | None = None):
        super().__init__()
        self.cfg = cfg or SolverConfig()
        c = self.cfg
        self.priors = nn.ModuleList(PriorNet(c.prior_width) for _ in range(c.N))
        self.rwm3 = nn.ModuleList(RobustWarp(3, c.rwm_features, c.rwm_hidden) for _ in range(c.N))
        self.rwm1 = nn.ModuleList(RobustWarp(1, c.rwm_features, c.rwm_hidden) for _ in range(c.N))
        self.motion = MotionWeight(c.motion_hidden)

    def iterate(self, F, T, D, provider, iters=None) -> Iterator[SolverState]:
        """Yield the solver state after each iteration.

        ``F`` is (b, l, 3, H, W) (or unbatched (l, 3, H, W)); ``T``, ``D``
        match with one channel. ``provider`` follows the flow-provider call
        convention of :mod:`cdun.motion`.
        """
        if F.dim() == 4:
            F, T, D = F[None], T[None], D[None]
        if F.dim() != 5 or T.shape != D.shape or T.shape[:2] != F.shape[:2] or T.shape[2] != 1:
            raise ContractError(f"bad solver inputs F {tuple(F.shape)}, T {tuple(T.shape)}, D {tuple(D.shape)}")
        l = F.shape[1]
        N = self.cfg.N if iters is None else iters
        if N > len(self.priors):
            raise ConfigError(f"requested {N} iterations but only {len(self.priors)} prior stages exist")
        table = window_table(l, F.device)
        here = torch.arange(l, device=F.device)
        B, Fk = F, F
        for k in range(N):
            gamma = self.cfg.gamma(k)
            frames, Ts, Ds, flows, weights = [], [], [], [], []
            for slot in table:
                Fj = Fk[:, slot]
                m_ji = provider(Fj, Fk, slot, here)
                m_ij = provider(Fk, Fj, here, slot)
                frames.append(Fj)
                Ts.append(T[:, slot])
                Ds.append(D[:, slot])
                flows.append(m_ji)
                u = self.motion(m_ij)
                weights.append(u * in_frame(m_ji) if self.cfg.frame_mask else u)
            Z = z_update(B, frames, Ts, Ds, flows, weights, gamma, self.rwm3[k], self.rwm1[k], center=1)
            B = prior_step(Z, k, self.priors)
            Fk = redegrade(B, T, D)
            yield SolverState(k=k + 1, gamma=gamma, B=B, F_cur=Fk, Z=Z)

    def forward(self, F, T, D, provider, iters=None):
        state = None
        for state in self.iterate(F, T, D, provider, iters):
            pass
        return state.B


def restore(clip: VideoClip, fields: DegradationField, cfg: SolverConfig | None = None, model: CDUN | None = None,
            provider=None, offsets=None):
    """Run the full unfolded restoration on one clip and return the result."""
    from .motion import make_provider

    model = model or CDUN(cfg)
    cfg = cfg or model.cfg
    provider = provider or make_provider(cfg.flow, offsets)
    with torch.no_grad():
        out = model(clip.frames, fields.T, fields.D, provider, iters=cfg.N)
    return VideoClip(out[0])
