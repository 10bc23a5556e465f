"""Sequence-wise adaptive degradation estimation.

A handful of frames sampled from the clip are summarised into a descriptor
``P`` (one C-vector per sampled frame). Learnable queries attend over
``P`` to produce sigmoid expert weights, which mix an expert bank into a
single estimator parameter vector ``Theta``. Every frame of the clip is then
run through a small encoder-decoder under that one ``Theta`` to predict the
multiplicative map T and the additive map D.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as Fn
from torch import nn

from .degrade import TAU_MIN, DegradationField
from .errors import ConfigError, ContractError


def sample_frames(l, m):
    """1-based equidistant sample of at most ``m`` frame indices from ``l``."""
    if l < 1 or m < 1:
        raise ContractError(f"need l >= 1 and m >= 1, got l={l}, m={m}")
    step = max(1, l // m)
    return [min(1 + k * step, l) for k in range(min(m, l))]


@dataclass
class SadeConfig:
    n: int = 4  # experts
    m: int = 5  # sampled frames
    C: int = 32  # descriptor width
    width: int = 16  # estimator backbone width
    levels: int = 3  # encoder-decoder depth (2 or 3)
    tau_min: float = TAU_MIN
    framewise: bool = False  # ablation: one Theta per frame instead of per clip

    def __post_init__(self):
        for key in ("n", "m", "C", "width"):
            if getattr(self, key) < 1:
                raise ConfigError(f"sade.{key} must be >= 1")
        if self.levels not in (2, 3):
            raise ConfigError("sade.levels must be 2 or 3")
        if not self.tau_min > 0:
            raise ConfigError("sade.tau_min must be > 0")


class FeatureExtractor(nn.Module):
    """conv stack -> global average pool -> linear map, one C-vector per frame."""

    def __init__(self, C=32, width=16):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.proj = nn.Linear(2 * width, C)

    def forward(self, frames):
        lead = frames.shape[:-3]
        x = self.convs(frames.reshape(-1, *frames.shape[-3:]))
        return self.proj(x.mean((-2, -1))).reshape(*lead, -1)


class ExpertAttention(nn.Module):
    """Cross-attention of learnable queries over descriptor columns, sigmoid head."""

    def __init__(self, C=32, n=4, n_q=None):
        super().__init__()
        self.n_q = n if n_q is None else n_q
        self.C = C
        self.Q = nn.Parameter(torch.randn(self.n_q, C) / math.sqrt(C))
        self.Lq = nn.Linear(C, C)
        self.Lk = nn.Linear(C, C)
        self.Lv = nn.Linear(C, C)
        self.head = nn.Linear(self.n_q * C, n)
        self.sigma = math.sqrt(C)

    def forward(self, P):
        """``P``: (..., m, C) -> weights (..., n) in (0, 1)."""
        q = self.Lq(self.Q)
        k, v = self.Lk(P), self.Lv(P)
        attn = torch.softmax(q @ k.transpose(-1, -2) / self.sigma, dim=-1)
        ctx = attn @ v  # (..., n_q, C)
        return torch.sigmoid(self.head(ctx.flatten(-2)))


# estimator backbone: (name, out, in, kernel, stride)
def backbone_layout(width=16, levels=3):
    w = width
    if levels == 2:
        return [
            ("enc1", w, 3, 3, 1),
            ("enc2", 2 * w, w, 3, 2),
            ("mid", 2 * w, 2 * w, 3, 1),
            ("dec1", w, 3 * w, 3, 1),
            ("head", 2, w, 3, 1),
        ]
    return [
        ("enc1", w, 3, 3, 1),
        ("enc2", 2 * w, w, 3, 2),
        ("enc3", 2 * w, 2 * w, 3, 2),
        ("mid", 2 * w, 2 * w, 3, 1),
        ("dec2", 2 * w, 4 * w, 3, 1),
        ("dec1", w, 3 * w, 3, 1),
        ("head", 2, w, 3, 1),
    ]


def backbone_size(width=16, levels=3):
    return sum(o * i * k * k + o for _, o, i, k, _ in backbone_layout(width, levels))


def _unpack(theta, width, levels):
    """Split flat parameter vectors (U, P) into per-layer weights and biases."""
    out, pos = {}, 0
    for name, o, i, k, s in backbone_layout(width, levels):
        nw = o * i * k * k
        out[name] = (theta[:, pos:pos + nw].reshape(-1, i, k, k), theta[:, pos + nw:pos + nw + o].reshape(-1), s)
        pos += nw + o
    return out


def run_backbone(x, theta, width=16, levels=3):
    """Run the encoder-decoder on ``x`` (r, U, 3, H, W) with ``theta`` (U, P).

    Unit u of every replicate r is processed with parameter vector
    ``theta[u]``; the units are folded into channel groups so one grouped
    convolution serves all of them.
    """
    r, U, C, H, W = x.shape
    layers = _unpack(theta, width, levels)

    def conv(h, name):
        w, b, s = layers[name]
        return Fn.conv2d(h, w, b, stride=s, padding=w.shape[-1] // 2, groups=U)

    def up_cat(low, skip):
        # regroup so every unit sees its own [upsampled, skip] channels
        h, w = skip.shape[-2:]
        low = Fn.interpolate(low, size=(h, w), mode="bilinear", align_corners=False)
        return torch.cat([low.reshape(r, U, -1, h, w), skip.reshape(r, U, -1, h, w)], 2).reshape(r, -1, h, w)

    e1 = torch.relu(conv(x.reshape(r, U * C, H, W), "enc1"))
    e2 = torch.relu(conv(e1, "enc2"))
    if levels == 2:
        d2 = torch.relu(conv(e2, "mid"))
    else:
        e3 = torch.relu(conv(e2, "enc3"))
        d2 = torch.relu(conv(up_cat(torch.relu(conv(e3, "mid")), e2), "dec2"))
    d1 = torch.relu(conv(up_cat(d2, e1), "dec1"))
    return conv(d1, "head").reshape(r, U, 2, H, W)


def smooth_relu(x, eps=0.02):
    """Non-negative, approximately max(x, 0), with value eps/2 and slope 1/2 at 0."""
    return 0.5 * (x + torch.sqrt(x * x + eps * eps))


def combine_experts(W, bank):
    """Theta = sum_i w_i theta_i. ``W``: (..., n), ``bank``: (n, P) -> (..., P)."""
    if W.shape[-1] != bank.shape[0]:
        raise ContractError(f"{W.shape[-1]} expert weights for a bank of {bank.shape[0]} experts")
    return W @ bank


class SADE(nn.Module):
    def __init__(self, cfg: SadeConfig | None = None):
        super().__init__()
        self.cfg = cfg or SadeConfig()
        c = self.cfg
        self.features = FeatureExtractor(c.C)
        self.attention = ExpertAttention(c.C, c.n)
        self.bank = nn.Parameter(self._init_bank(c))
        # raw T channel of 0 maps to T = 1, i.e. "no attenuation"
        self.t_bias = math.log(math.expm1(1.0 - c.tau_min))

    @staticmethod
    def _init_bank(c):
        experts = []
        for _ in range(c.n):
            parts = []
            for _, o, i, k, _ in backbone_layout(c.width, c.levels):
                w = torch.empty(o, i, k, k)
                nn.init.kaiming_uniform_(w, a=math.sqrt(5))
                parts += [w.flatten(), torch.zeros(o)]
            experts.append(torch.cat(parts))
        # scaled so that the sigmoid-mixed sum starts near one expert's scale
        return torch.stack(experts) * (2.0 / c.n)

    def descriptor(self, frames):
        """(b, l, 3, H, W) -> (P (b, m', C), 0-based sampled indices)."""
        idx = [i - 1 for i in sample_frames(frames.shape[1], self.cfg.m)]
        return self.features(frames[:, idx]), idx

    def expert_weights(self, P):
        return self.attention(P)

    def theta(self, frames):
        """One parameter vector per clip (b, P), or per frame (b, l, P) if frame-wise."""
        if self.cfg.framewise:
            return combine_experts(self.expert_weights(self.features(frames)[..., None, :]), self.bank)
        P, _ = self.descriptor(frames)
        return combine_experts(self.expert_weights(P), self.bank)

    def maps(self, raw):
        T = self.cfg.tau_min + Fn.softplus(raw[..., :1, :, :] + self.t_bias)
        D = smooth_relu(raw[..., 1:, :, :])
        return T, D

    def forward(self, frames, return_theta=False):
        """``frames`` (b, l, 3, H, W) or (l, 3, H, W) -> T, D of shape (b, l, 1, H, W)."""
        single = frames.dim() == 4
        if single:
            frames = frames[None]
        b, l = frames.shape[:2]
        theta = self.theta(frames)
        if self.cfg.framewise:
            raw = run_backbone(frames.reshape(1, b * l, *frames.shape[2:]), theta.reshape(b * l, -1), self.cfg.width, self.cfg.levels)
            raw = raw.reshape(b, l, *raw.shape[2:])
        else:
            raw = run_backbone(frames.transpose(0, 1), theta, self.cfg.width, self.cfg.levels).transpose(0, 1)
        T, D = self.maps(raw)
        if single:
            T, D, theta = T[0], D[0], theta[0]
        return (T, D, theta) if return_theta else (T, D)

    def estimate(self, frames) -> DegradationField:
        """Degradation field for one unbatched clip (l, 3, H, W)."""
        with torch.no_grad():
            T, D = self(frames)
        return DegradationField(T, D)

    # checkpoints -----------------------------------------------------

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), d / "sade.pt")
        (d / "sade.json").write_text(json.dumps(asdict(self.cfg), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        if not (d / "sade.json").exists() or not (d / "sade.pt").exists():
            raise ConfigError(f"{d} is not a SADE checkpoint (need sade.pt and sade.json)")
        model = cls(SadeConfig(**json.loads((d / "sade.json").read_text())))
        model.load_state_dict(torch.load(d / "sade.pt", weights_only=True))
        return model
