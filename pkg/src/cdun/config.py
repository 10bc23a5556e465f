"""Flat ``key=value`` config files with dotted namespaces.

::

    # comments and blank lines are ignored
    solver.N = 5
    solver.gamma0 = 0.1
    sade.m = 5
    train.steps = 2000
    flow.provider = exact

Later sources override earlier ones: file, then ``--set key=value`` flags.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .sade import SadeConfig
from .solver import SolverConfig
from .train import TrainConfig

SECTIONS = {"solver": SolverConfig, "sade": SadeConfig, "train": TrainConfig}
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def parse_lines(lines, source="<config>"):
    out = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{n}: key {key!r} needs a namespace, e.g. solver.N")
        out[key] = value
    return out


def read_config(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return parse_lines(p.read_text().splitlines(), str(p))


def _coerce(value, default, key):
    try:
        if isinstance(default, bool):
            return _BOOL[value.lower()]
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(float(v) for v in value.split(","))
    except (KeyError, ValueError):
        raise ConfigError(f"bad value {value!r} for {key}") from None
    return value


def _section(cls, values, prefix):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for name, value in values.items():
        if name not in fields or name in ("solver", "sade"):
            raise ConfigError(f"unknown config key {prefix}.{name}")
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else None
        if default is None and name == "l":
            default = 0
        kwargs[name] = _coerce(value, default, f"{prefix}.{name}")
    return kwargs


def build(values: dict, stage=None) -> TrainConfig:
    """Assemble a ``TrainConfig`` (with nested solver and SADE configs)."""
    grouped = {k: {} for k in SECTIONS}
    flow = None
    for key, value in values.items():
        ns, name = key.split(".", 1)
        if key == "flow.provider":
            flow = value
        elif ns in grouped:
            grouped[ns][name] = value
        else:
            raise ConfigError(f"unknown config namespace in {key!r}")
    solver_kw = _section(SolverConfig, grouped["solver"], "solver")
    if flow is not None:
        solver_kw["flow"] = flow
    solver = SolverConfig(**solver_kw)
    sade = SadeConfig(**_section(SadeConfig, grouped["sade"], "sade"))
    train_kw = _section(TrainConfig, grouped["train"], "train")
    if stage is not None:
        train_kw["stage"] = stage
    train_kw.setdefault("flow", solver.flow)
    return TrainConfig(solver=solver, sade=sade, **train_kw)


def load(path=None, overrides=(), stage=None) -> TrainConfig:
    values = read_config(path) if path else {}
    values.update(parse_lines(overrides, "--set"))
    return build(values, stage)
