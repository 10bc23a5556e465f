"""Two-stage training: the degradation estimator first, then the unfolded solver.

The solver stage freezes the estimator (and any learned flow provider). The
estimator is run once on every full training clip and its fields are cached;
crops and flips are then applied identically to frames and fields.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import dataio
from .degrade import KINDS
from .errors import ConfigError
from .losses import loss_cdun, loss_sade, psnr, ssim
from .motion import ExactFlow, LearnedFlow, fit_learned_flow, make_provider
from .sade import SADE, SadeConfig
from .solver import CDUN, SolverConfig

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "stage", "task", "psnr", "ssim", "loss"]


@dataclass
class TrainConfig:
    stage: str = "sade"
    steps: int = 2000
    batch: int = 4
    lr: float = 2e-4
    weight_decay: float = 1e-2
    decay: float = 0.1
    decay_at: tuple = (0.4, 0.8)  # fractions of ``steps``
    crop: int = 32
    flip: bool = True
    l: int | None = None  # 7 for sade, 3 for cdun
    seed: int = 0
    eval_every: int = 200
    eval_clips: int = 2  # per kind
    flow: str = "exact"
    solver: SolverConfig = field(default_factory=SolverConfig)
    sade: SadeConfig = field(default_factory=SadeConfig)

    def __post_init__(self):
        if self.stage not in ("sade", "cdun"):
            raise ConfigError(f"train.stage must be 'sade' or 'cdun', got {self.stage!r}")
        if self.l is None:
            self.l = 7 if self.stage == "sade" else 3
        if self.stage == "cdun" and self.l < 3:
            raise ConfigError("cdun training clips need at least 3 frames")
        for key in ("steps", "batch", "crop", "eval_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"train.{key} must be >= 1")
        self.decay_at = tuple(self.decay_at)

    @property
    def milestones(self):
        return [max(1, int(round(f * self.steps))) for f in self.decay_at]


# data ---------------------------------------------------------------------


def load_dataset(root):
    samples = [dataio.read_sample(p) for p in dataio.list_samples(root)]
    if not samples:
        raise ConfigError(f"no samples found under {root}")
    for s in samples:
        if s.clean is None:
            raise ConfigError(f"{s.clip_id}: training needs clean frames")
    return samples


class BatchSampler:
    """Random (kind, clip, start frame, crop, flip) draws with a private generator."""

    def __init__(self, samples, cfg: TrainConfig, fields=None):
        self.cfg = cfg
        self.samples = samples
        self.fields = fields  # optional per-sample (T, D) overriding stored fields
        self.by_kind = {}
        for n, s in enumerate(samples):
            self.by_kind.setdefault(s.kind, []).append(n)
        self.kinds = [k for k in KINDS if k in self.by_kind] + sorted(k for k in self.by_kind if k not in KINDS)
        for s in samples:
            if s.degraded.shape[0] < cfg.l:
                raise ConfigError(f"{s.clip_id} has {s.degraded.shape[0]} frames, need {cfg.l}")
            if min(s.degraded.shape[-2:]) < cfg.crop:
                raise ConfigError(f"{s.clip_id} is smaller than the {cfg.crop}px crop")
        self.gen = torch.Generator().manual_seed(cfg.seed)

    def draw_kind(self):
        return self.kinds[int(torch.randint(len(self.kinds), (1,), generator=self.gen))]

    def _rand(self, n):
        return int(torch.randint(n, (1,), generator=self.gen))

    def draw(self):
        cfg = self.cfg
        out = {k: [] for k in ("clean", "degraded", "T", "D", "offsets", "kind")}
        for _ in range(cfg.batch):
            kind = self.draw_kind()
            idx = self.by_kind[kind][self._rand(len(self.by_kind[kind]))]
            s = self.samples[idx]
            L, _, H, W = s.degraded.shape
            t0 = self._rand(L - cfg.l + 1)
            y0, x0 = self._rand(H - cfg.crop + 1), self._rand(W - cfg.crop + 1)
            flip = cfg.flip and self._rand(2) == 1
            T, D = self.fields[idx] if self.fields is not None else (s.fields.T, s.fields.D)
            sl = (slice(t0, t0 + cfg.l), slice(None), slice(y0, y0 + cfg.crop), slice(x0, x0 + cfg.crop))
            offs = s.offsets()[t0:t0 + cfg.l].clone()
            parts = {"clean": s.clean[sl], "degraded": s.degraded[sl], "T": T[sl], "D": D[sl]}
            if flip:
                parts = {k: v.flip(-1) for k, v in parts.items()}
                offs[:, 0] = -offs[:, 0]
            for k, v in parts.items():
                out[k].append(v)
            out["offsets"].append(offs)
            out["kind"].append(kind)
        return {k: (v if k == "kind" else torch.stack(v)) for k, v in out.items()}


def eval_set(samples, cfg: TrainConfig, fields=None):
    """Fixed per-kind centre crops used for the metrics CSV."""
    by_kind = {}
    for n, s in enumerate(samples):
        by_kind.setdefault(s.kind, []).append(n)
    items = []
    for kind, idxs in by_kind.items():
        for idx in idxs[: cfg.eval_clips]:
            s = samples[idx]
            H, W = s.degraded.shape[-2:]
            y0, x0 = (H - cfg.crop) // 2, (W - cfg.crop) // 2
            sl = (slice(0, cfg.l), slice(None), slice(y0, y0 + cfg.crop), slice(x0, x0 + cfg.crop))
            T, D = fields[idx] if fields is not None else (s.fields.T, s.fields.D)
            items.append(dict(kind=kind, clean=s.clean[sl], degraded=s.degraded[sl], T=T[sl], D=D[sl],
                              offsets=s.offsets()[: cfg.l]))
    return items


# bookkeeping ----------------------------------------------------------------


class MetricsWriter:
    def __init__(self, path, fresh):
        self.path = Path(path)
        if fresh or not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def write(self, rows):
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for r in rows:
                w.writerow([r["step"], r["stage"], r["task"], f"{r['psnr']:.4f}", f"{r['ssim']:.6f}", f"{r['loss']:.6f}"])


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _summarise(step, stage, results):
    rows, by = [], {}
    for r in results:
        by.setdefault(r["task"], []).append(r)
    for task in sorted(by) + ["all"]:
        group = results if task == "all" else by[task]
        mean = lambda k: sum(g[k] for g in group) / len(group)
        rows.append(dict(step=step, stage=stage, task=task, psnr=mean("psnr"), ssim=mean("ssim"), loss=mean("loss")))
    return rows


def _optim(params, cfg):
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, cfg.milestones, gamma=cfg.decay)
    return opt, sched


def _config_dict(cfg: TrainConfig):
    d = asdict(cfg)
    d["decay_at"] = list(cfg.decay_at)
    return d


def _run(stage, model, params, sampler, cfg, out, step_fn, eval_fn, resume, until=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    opt, sched = _optim(params, cfg)
    state_path = out / "state.pt"
    start = 0
    if resume and state_path.exists():
        st = torch.load(state_path, weights_only=False)
        model.load_state_dict(st["model"])
        opt.load_state_dict(st["opt"])
        sched.load_state_dict(st["sched"])
        sampler.gen.set_state(st["gen"])
        torch.set_rng_state(st["torch_rng"])
        start = st["step"]
        log.info("resuming %s training at step %d", stage, start)
    metrics = MetricsWriter(out / "metrics.csv", fresh=start == 0)
    t0 = time.time()
    last = cfg.steps if until is None else min(until, cfg.steps)
    for step in range(start + 1, last + 1):
        model.train()
        loss = step_fn(sampler.draw())
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % cfg.eval_every == 0 or step == last:
            model.eval()
            rows = _summarise(step, stage, eval_fn())
            metrics.write(rows)
            log.info("%s step %d loss %.4f psnr(all) %.2f (%.0fs)", stage, step, float(loss.detach()), rows[-1]["psnr"],
                     time.time() - t0)
            torch.save(dict(model=model.state_dict(), opt=opt.state_dict(), sched=sched.state_dict(),
                            gen=sampler.gen.get_state(), torch_rng=torch.get_rng_state(), step=step), state_path)
    model.eval()
    (out / "train.json").write_text(json.dumps(_config_dict(cfg), indent=2, sort_keys=True, default=str) + "\n")
    return model


# stage 1 --------------------------------------------------------------------


def train_sade(samples, cfg: TrainConfig, out, resume=True, eval_samples=None, until=None):
    """Train the degradation estimator on (F - D) / T vs clean; returns the model."""
    if cfg.stage != "sade":
        raise ConfigError("train_sade needs a config with stage='sade'")
    torch.manual_seed(cfg.seed)
    model = SADE(cfg.sade)
    sampler = BatchSampler(samples, cfg)
    evals = eval_set(eval_samples or samples, cfg)

    def step_fn(batch):
        T, D = model(batch["degraded"])
        return loss_sade(T, D, batch["degraded"], batch["clean"]) / cfg.l

    def eval_fn():
        res = []
        with torch.no_grad():
            for it in evals:
                T, D = model(it["degraded"])
                X = (it["degraded"] - D) / T
                res.append(dict(task=it["kind"], psnr=psnr(X.clamp(0, 1), it["clean"]),
                                ssim=float(ssim(X.clamp(0, 1), it["clean"])),
                                loss=float(loss_sade(T, D, it["degraded"], it["clean"]))))
        return res

    _run("sade", model, model.parameters(), sampler, cfg, out, step_fn, eval_fn, resume, until)
    model.save(out)
    return model


# stage 2 --------------------------------------------------------------------


def sade_fields(sade: SADE, samples):
    """Frozen estimator output for every full clip: list of (T, D)."""
    sade.eval()
    with torch.no_grad():
        return [tuple(sade(s.degraded)) for s in samples]


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()} if module is not None else {}


def frozen_unchanged(module, snapshot):
    if module is None:
        return True
    now = module.state_dict()
    return now.keys() == snapshot.keys() and all(torch.equal(now[k], snapshot[k]) for k in now)


def _provider_for(name, offsets, learned):
    return ExactFlow(offsets) if name == "exact" else make_provider(name, offsets, learned)


def warm_start(model: CDUN, init: CDUN):
    """Copy the first stages and the motion-weight network of ``init`` into ``model``.

    Stages beyond ``init``'s iteration count keep their fresh (pass-through
    residual) initialisation.
    """
    if init.cfg.N > model.cfg.N:
        raise ConfigError(f"cannot warm-start {model.cfg.N} iterations from a {init.cfg.N}-iteration model")
    with torch.no_grad():
        for k in range(init.cfg.N):
            for mine, theirs in ((model.priors, init.priors), (model.rwm3, init.rwm3), (model.rwm1, init.rwm1)):
                mine[k].load_state_dict(theirs[k].state_dict())
        model.motion.load_state_dict(init.motion.state_dict())
    return model


def train_cdun(samples, cfg: TrainConfig, out, sade_ckpt=None, sade: SADE | None = None, flow: LearnedFlow | None = None,
               resume=True, eval_samples=None, until=None, init: CDUN | None = None):
    """Train the unfolded solver with a frozen estimator and flow provider.

    ``init`` optionally warm-starts the leading stages from a trained model
    with fewer iterations (see ``warm_start``).
    """
    if cfg.stage != "cdun":
        raise ConfigError("train_cdun needs a config with stage='cdun'")
    if sade is None:
        if sade_ckpt is None:
            raise ConfigError("stage cdun requires a trained SADE checkpoint (--sade-ckpt)")
        sade = SADE.load(sade_ckpt)
    for p in sade.parameters():
        p.requires_grad_(False)
    sade.eval()
    if cfg.flow == "learned" and flow is None:
        flow = LearnedFlow()
        clips = torch.stack([s.clean[: cfg.l] for s in samples])
        offs = torch.stack([s.offsets()[: cfg.l] for s in samples])
        fit_learned_flow(flow, clips, offs, seed=cfg.seed)
    if flow is not None:
        for p in flow.parameters():
            p.requires_grad_(False)
        flow.eval()
    frozen = (_snapshot(sade), _snapshot(flow))

    torch.manual_seed(cfg.seed)
    model = CDUN(cfg.solver)
    if init is not None:
        warm_start(model, init)
    fields = sade_fields(sade, samples)
    sampler = BatchSampler(samples, cfg, fields)
    ev = eval_samples or samples
    evals = eval_set(ev, cfg, sade_fields(sade, ev))

    def step_fn(batch):
        prov = _provider_for(cfg.flow, batch["offsets"], flow)
        B = model(batch["degraded"], batch["T"], batch["D"], prov)
        return loss_cdun(B, batch["clean"])

    def eval_fn():
        res = []
        with torch.no_grad():
            for it in evals:
                prov = _provider_for(cfg.flow, it["offsets"][None], flow)
                B = model(it["degraded"][None], it["T"][None], it["D"][None], prov)[0]
                res.append(dict(task=it["kind"], psnr=psnr(B.clamp(0, 1), it["clean"]),
                                ssim=float(ssim(B.clamp(0, 1), it["clean"])), loss=float(loss_cdun(B, it["clean"]))))
        return res

    _run("cdun", model, model.parameters(), sampler, cfg, out, step_fn, eval_fn, resume, until)
    if not (frozen_unchanged(sade, frozen[0]) and frozen_unchanged(flow, frozen[1])):
        raise RuntimeError("frozen estimator or flow parameters changed during solver training")
    save_cdun(model, out, sade, flow if cfg.flow == "learned" else None, cfg.flow)
    return model


# checkpoints ----------------------------------------------------------------


def save_cdun(model: CDUN, directory, sade: SADE | None = None, flow: LearnedFlow | None = None, provider="exact"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k in range(model.cfg.N):
        torch.save(model.priors[k].state_dict(), d / f"prior_{k}.pt")
        torch.save(model.rwm3[k].state_dict(), d / f"rwm3_{k}.pt")
        torch.save(model.rwm1[k].state_dict(), d / f"rwm1_{k}.pt")
    torch.save(model.motion.state_dict(), d / "motion_weight.pt")
    meta = asdict(model.cfg)
    meta["provider"] = provider
    (d / "solver.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if sade is not None:
        sade.save(d / "sade")
    if flow is not None:
        torch.save(flow.state_dict(), d / "flow.pt")


def load_cdun(directory):
    """Returns (model, sade or None, learned flow or None)."""
    d = Path(directory)
    if not (d / "solver.json").exists():
        raise ConfigError(f"{d} is not a solver checkpoint (missing solver.json)")
    meta = json.loads((d / "solver.json").read_text())
    meta.pop("provider", None)
    model = CDUN(SolverConfig(**meta))
    for k in range(model.cfg.N):
        model.priors[k].load_state_dict(torch.load(d / f"prior_{k}.pt", weights_only=True))
        model.rwm3[k].load_state_dict(torch.load(d / f"rwm3_{k}.pt", weights_only=True))
        model.rwm1[k].load_state_dict(torch.load(d / f"rwm1_{k}.pt", weights_only=True))
    model.motion.load_state_dict(torch.load(d / "motion_weight.pt", weights_only=True))
    model.eval()
    sade = SADE.load(d / "sade") if (d / "sade").is_dir() else None
    flow = None
    if (d / "flow.pt").exists():
        flow = LearnedFlow()
        flow.load_state_dict(torch.load(d / "flow.pt", weights_only=True))
        flow.eval()
    return model, sade, flow


# held-out evaluation --------------------------------------------------------


def evaluate(samples, sade: SADE, model: CDUN | None = None, provider="exact", flow=None, iters=None):
    """Per-clip metrics on full clips: input/restored PSNR and SSIM, field errors."""
    rows = []
    with torch.no_grad():
        for s in samples:
            T, D = sade(s.degraded)
            row = dict(clip=s.clip_id, kind=s.kind, psnr_in=psnr(s.degraded.clamp(0, 1), s.clean),
                       ssim_in=float(ssim(s.degraded.clamp(0, 1), s.clean)))
            if s.fields is not None:
                row["T_mae"] = float((T - s.fields.T).abs().mean())
                row["D_mae"] = float((D - s.fields.D).abs().mean())
            if model is not None:
                prov = _provider_for(provider, s.offsets()[None], flow)
                B = model(s.degraded[None], T[None], D[None], prov, iters)[0].clamp(0, 1)
                row["psnr_out"] = psnr(B, s.clean)
                row["ssim_out"] = float(ssim(B, s.clean))
            rows.append(row)
    return rows
