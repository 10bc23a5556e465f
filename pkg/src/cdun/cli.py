"""Command-line entry point: ``cdun <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 a numerical guard
tripped (results were still written), 1 a probe found a failing instance.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import config as cfgmod
from . import dataio, diagnostics
from .degrade import KINDS, VideoClip
from .errors import CdunError, ConfigError, ContractError, IngestError
from .losses import psnr, ssim

log = logging.getLogger("cdun")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_GUARD = 0, 1, 2, 3


class UsageError(CdunError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _size(text):
    parts = [int(p) for p in text.lower().split("x")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or HxW")
    return tuple(parts)


# synth ----------------------------------------------------------------------


def cmd_synth(a):
    kinds = [k.strip() for k in a.kinds.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise UsageError(f"unknown kind(s) {', '.join(bad) or '(none)'}; choose from {', '.join(KINDS)}")
    if a.frames < 3:
        raise UsageError("--frames must be at least 3")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = dataio.synth_dataset(out, kinds, a.clips, a.frames, a.size, a.seed)
    print(f"synth: wrote {len(ids)} clips ({a.frames} frames, {a.size[0]}x{a.size[1]}) to {out}")
    return EXIT_OK


# train ----------------------------------------------------------------------


def cmd_train(a):
    from .train import load_cdun, load_dataset, train_cdun, train_sade

    overrides = list(a.set or [])
    if a.steps is not None:
        overrides.append(f"train.steps={a.steps}")
    if a.seed is not None:
        overrides.append(f"train.seed={a.seed}")
    if a.flow is not None:
        overrides.append(f"flow.provider={a.flow}")
    cfg = cfgmod.load(a.config, overrides, stage=a.stage)
    if cfg.stage == "cdun" and not a.sade_ckpt:
        raise ConfigError("stage cdun requires --sade-ckpt (train the sade stage first)")
    samples = load_dataset(a.data)
    held = load_dataset(a.eval_data) if a.eval_data else None
    t0 = time.time()
    if cfg.stage == "sade":
        train_sade(samples, cfg, a.out, resume=not a.no_resume, eval_samples=held)
    else:
        init = load_cdun(a.init_ckpt)[0] if a.init_ckpt else None
        train_cdun(samples, cfg, a.out, sade_ckpt=a.sade_ckpt, resume=not a.no_resume, eval_samples=held, init=init)
    print(f"train: stage {cfg.stage}, {cfg.steps} steps, checkpoint in {a.out} ({time.time() - t0:.0f}s)")
    return EXIT_OK


# restore --------------------------------------------------------------------


def _safe_ssim(x, y):
    try:
        return float(ssim(x, y))
    except ContractError:
        return None


def cmd_restore(a):
    from .motion import make_provider
    from .train import load_cdun

    sample = dataio.read_sample(a.input)
    VideoClip(sample.degraded)  # length and finiteness contract
    model, sade, learned = load_cdun(a.ckpt)
    N = a.iters if a.iters is not None else model.cfg.N
    if N < 1:
        raise ConfigError("--iters must be >= 1")
    if N > model.cfg.N:
        raise ConfigError(f"checkpoint has {model.cfg.N} iteration stages; cannot run {N}")
    provider_name = a.flow or json.loads((Path(a.ckpt) / "solver.json").read_text()).get("provider", "exact")
    offsets = sample.offsets()[None] if "displacements" in sample.meta else None
    provider = make_provider(provider_name, offsets, learned)
    if provider_name == "learned" and learned is None:
        raise ConfigError("checkpoint has no learned flow provider (flow.pt)")

    t0 = time.time()
    with torch.no_grad():
        if a.fields == "gt":
            if sample.fields is None:
                raise ConfigError(f"{a.input} has no stored T/D fields")
            T, D = sample.fields.T, sample.fields.D
        else:
            if sade is None:
                raise ConfigError(f"{a.ckpt} has no SADE checkpoint; use --fields gt")
            T, D = sade(sample.degraded)
        gammas, B = [], None
        for st in model.iterate(sample.degraded[None], T[None], D[None], provider, N):
            gammas.append(st.gamma)
            B = st.B
    wall = time.time() - t0
    B = B[0]
    out = Path(a.out)
    dataio.save_clip(VideoClip(B.clamp(0, 1)), out / "restored")
    report = dict(frames=int(B.shape[0]), iters=N, provider=provider_name, fields=a.fields,
                  gamma=gammas, wall_time_s=wall, diagnostics=dict(diagnostics.counters))
    if sample.clean is not None:
        Bc = B.clamp(0, 1)
        report["psnr"] = [psnr(Bc[i], sample.clean[i]) for i in range(len(Bc))]
        report["ssim"] = [_safe_ssim(Bc[i][None], sample.clean[i][None]) for i in range(len(Bc))]
        report["psnr_input"] = [psnr(sample.degraded[i].clamp(0, 1), sample.clean[i]) for i in range(len(Bc))]
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    mean = f", mean PSNR {sum(report['psnr']) / len(report['psnr']):.2f} dB" if "psnr" in report else ""
    print(f"restore: {report['frames']} frames, N={N}, {wall:.2f}s{mean} -> {out}")
    return EXIT_OK


# eval -----------------------------------------------------------------------


def _frames_dir(path):
    p = Path(path)
    for sub in ("", "restored", "clean"):
        d = p / sub if sub else p
        if d.is_dir() and any(d.glob("[0-9][0-9][0-9][0-9].png")):
            return d
    raise IngestError(f"no frames found in {p} (looked in ./, restored/, clean/)")


def _pairs(pred, gt):
    """[(task, clip, pred frames dir, gt frames dir)] for a clip or a dataset root."""
    gt = Path(gt)
    roots = dataio.list_samples(gt) if gt.is_dir() and not (gt / "clean").is_dir() else []
    if not roots:
        meta = gt / "meta.json"
        task = json.loads(meta.read_text()).get("kind", "clip") if meta.exists() else "clip"
        return [(task, gt.name, _frames_dir(pred), _frames_dir(gt))]
    out = []
    for r in roots:
        meta = json.loads((r / "meta.json").read_text()) if (r / "meta.json").exists() else {}
        out.append((meta.get("kind", "clip"), r.name, _frames_dir(Path(pred) / r.name), _frames_dir(r)))
    return out


def cmd_eval(a):
    rows = []
    for task, clip, pd, gd in _pairs(a.pred, a.gt):
        P, G = dataio.load_frames(pd), dataio.load_frames(gd)
        if P.shape != G.shape:
            raise IngestError(f"{clip}: prediction {tuple(P.shape)} vs ground truth {tuple(G.shape)}")
        rows.append(dict(task=task, clip=clip, psnr=sum(psnr(P[i], G[i]) for i in range(len(P))) / len(P),
                         ssim=sum(_safe_ssim(P[i][None], G[i][None]) or 0.0 for i in range(len(P))) / len(P)))
    tasks = sorted({r["task"] for r in rows})
    summary = []
    for task in tasks + ["all"]:
        g = [r for r in rows if task in ("all", r["task"])]
        summary.append(dict(task=task, clip="mean", psnr=sum(r["psnr"] for r in g) / len(g),
                            ssim=sum(r["ssim"] for r in g) / len(g)))
    if a.csv:
        with open(a.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["task", "clip", "psnr", "ssim"])
            w.writeheader()
            for r in rows + summary:
                w.writerow({**r, "psnr": f"{r['psnr']:.4f}", "ssim": f"{r['ssim']:.6f}"})
    print("eval: " + "  ".join(f"{s['task']} {s['psnr']:.2f}dB/{s['ssim']:.4f}" for s in summary))
    return EXIT_OK


# probe ----------------------------------------------------------------------


def _write_rows(path, rows, columns):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.DictWriter(fh, columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def cmd_probe(a):
    from . import oracle

    cols = ["instance", "max_rel_err", "grad_norm"]
    if a.mode == "oracle":
        rows = oracle.oracle_suite(a.instances, a.seed)
        ok = all(r["max_rel_err"] < a.tol for r in rows)
        _write_rows(a.csv, rows, cols)
        worst = max(r["max_rel_err"] for r in rows)
        print(f"probe oracle: {len(rows)} instances, worst rel err {worst:.3g} (tol {a.tol:g})", file=sys.stderr)
    elif a.mode == "gradcheck":
        rows = oracle.gradient_suite(a.seed)
        ok = all(r["max_rel_err"] < r["tol"] for r in rows)
        _write_rows(a.csv, rows, cols)
        print(f"probe gradcheck: {sum(r['max_rel_err'] < r['tol'] for r in rows)}/{len(rows)} checks pass",
              file=sys.stderr)
    else:
        sens = oracle.receptive_field(a.iters, a.frames, a.size, a.center, a.delta, a.seed)
        center = a.frames // 2 if a.center is None else a.center
        rows = [dict(frame=j, offset=j - center, sensitivity=v) for j, v in sens.items()]
        _write_rows(a.csv, rows, ["frame", "offset", "sensitivity"])
        reach = [r["offset"] for r in rows if r["sensitivity"] > 1e-9]
        ok = bool(reach) and max(abs(o) for o in reach) <= a.iters
        print(f"probe receptive-field: N={a.iters}, reach {min(reach)}..{max(reach)}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


# plot -----------------------------------------------------------------------


def cmd_plot(a):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(a.metrics, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise IngestError(f"{a.metrics} has no rows")
    xkey = "N" if "N" in rows[0] else "step"
    metrics = [m for m in rows[0] if m not in (xkey, "stage", "task", "clip")]
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for m in metrics:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for task in sorted({r.get("task", "all") for r in rows}):
            pts = sorted((float(r[xkey]), float(r[m])) for r in rows if r.get("task", "all") == task and r[m] != "")
            if pts:
                ax.plot(*zip(*pts), marker="o", label=task)
        ax.set_xlabel(xkey)
        ax.set_ylabel(m)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / f"{m}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path.name)
    print(f"plot: wrote {', '.join(written)} to {out}")
    return EXIT_OK


# entry point ----------------------------------------------------------------


def build_parser():
    p = _Parser(prog="cdun", description="All-in-one video restoration by cross-consistent deep unfolding.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a paired synthetic dataset")
    s.add_argument("--kinds", default=",".join(KINDS))
    s.add_argument("--clips", type=int, default=8, help="clips per kind")
    s.add_argument("--frames", type=int, default=12)
    s.add_argument("--size", type=_size, default=(64, 64))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", choices=["sade", "cdun"], required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data", help="held-out dataset for the metrics CSV")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--flow", choices=["exact", "coarse", "learned"])
    t.add_argument("--sade-ckpt")
    t.add_argument("--init-ckpt", help="warm-start the leading stages from a solver with fewer iterations")
    t.add_argument("--no-resume", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("restore", help="restore one clip directory")
    r.add_argument("--input", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--iters", type=int)
    r.add_argument("--flow", choices=["exact", "coarse", "learned"])
    r.add_argument("--fields", choices=["sade", "gt"], default="sade")
    r.set_defaults(fn=cmd_restore)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--csv")
    e.set_defaults(fn=cmd_eval)

    q = sub.add_parser("probe", help="oracle, gradient and receptive-field probes")
    q.add_argument("--mode", choices=["receptive-field", "oracle", "gradcheck"], required=True)
    q.add_argument("--instances", type=int, default=50)
    q.add_argument("--tol", type=float, default=1e-10)
    q.add_argument("--iters", type=int, default=5)
    q.add_argument("--frames", type=int, default=12)
    q.add_argument("--size", type=int, default=32)
    q.add_argument("--center", type=int)
    q.add_argument("--delta", type=float, default=0.1)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--csv")
    q.set_defaults(fn=cmd_probe)

    g = sub.add_parser("plot", help="line plots from a metrics CSV")
    g.add_argument("--metrics", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_plot)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        a = build_parser().parse_args(argv)
        if a.verbose:
            logging.getLogger().setLevel(logging.INFO)
        torch.manual_seed(getattr(a, "seed", None) or 0)
        diagnostics.reset()
        code = a.fn(a)
    except (UsageError, ConfigError, ContractError, IngestError) as exc:
        print(f"cdun: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if code == EXIT_OK and diagnostics.tripped():
        print(f"cdun: numerical guard tripped: {dict(diagnostics.counters)}", file=sys.stderr)
        return EXIT_GUARD
    return code


if __name__ == "__main__":
    sys.exit(main())
