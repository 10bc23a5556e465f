"""Desk-scale experiment: synthetic data, both training stages, several N.

Everything lands under one cache directory and finished pieces are reused,
so repeated runs (and the acceptance suite) only pay for training once.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from . import dataio
from .degrade import KINDS
from .sade import SADE
from .solver import SolverConfig
from .train import TrainConfig, load_cdun, load_dataset, train_cdun, train_sade

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    clips: int = 25  # per kind, training
    heldout: int = 4  # per kind
    frames: int = 12
    size: int = 64
    crop: int = 32
    steps: int = 2000
    Ns: tuple = (1, 2, 3, 5)
    seed: int = 0
    warm_start: bool = True  # each N starts from the trained model with the next smaller N


def _dataset(root, clips, cfg, seed):
    root = Path(root)
    done = root / ".complete"
    if not done.exists():
        root.mkdir(parents=True, exist_ok=True)
        dataio.synth_dataset(root, KINDS, clips, cfg.frames, cfg.size, seed)
        done.write_text("ok\n")
    return load_dataset(root)


def data(cache, cfg: DeskConfig | None = None):
    cfg = cfg or DeskConfig()
    cache = Path(cache)
    train = _dataset(cache / "data" / "train", cfg.clips, cfg, cfg.seed)
    held = _dataset(cache / "data" / "heldout", cfg.heldout, cfg, cfg.seed + 1)
    return train, held


def sade_model(cache, cfg: DeskConfig | None = None, train=None, held=None):
    cfg = cfg or DeskConfig()
    out = Path(cache) / "sade"
    if (out / "sade.json").exists():
        return SADE.load(out)
    if train is None:
        train, held = data(cache, cfg)
    tcfg = TrainConfig(stage="sade", steps=cfg.steps, crop=cfg.crop, seed=cfg.seed)
    return train_sade(train, tcfg, out, eval_samples=held)


def cdun_model(cache, N, cfg: DeskConfig | None = None, train=None, held=None):
    """Trained solver with N iterations (model, sade)."""
    cfg = cfg or DeskConfig()
    out = Path(cache) / f"cdun_N{N}"
    if (out / "solver.json").exists():
        model, sade, _ = load_cdun(out)
        return model, sade
    if train is None:
        train, held = data(cache, cfg)
    sade = sade_model(cache, cfg, train, held)
    smaller = [n for n in cfg.Ns if n < N]
    init = cdun_model(cache, max(smaller), cfg, train, held)[0] if cfg.warm_start and smaller else None
    tcfg = TrainConfig(stage="cdun", steps=cfg.steps, crop=cfg.crop, seed=cfg.seed, solver=SolverConfig(N=N))
    model = train_cdun(train, tcfg, out, sade=sade, eval_samples=held, init=init)
    return model, sade


def run_all(cache, cfg: DeskConfig | None = None):
    cfg = cfg or DeskConfig()
    train, held = data(cache, cfg)
    sade_model(cache, cfg, train, held)
    return {N: cdun_model(cache, N, cfg, train, held) for N in cfg.Ns}
