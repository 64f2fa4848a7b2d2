"""Run configuration: YAML file <-> validated, immutable ``RunConfig``.

Every key is optional; unknown keys are rejected and every validation error
names the dotted key path (``train.lambda``) that caused it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .nes import TrainConfig
from .sampler import SamplerConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass(frozen=True)
class ArmConfig:
    l1: float = 2.0
    l2: float = 2.0
    m1: float = 1.0
    m2: float = 1.0


@dataclass(frozen=True)
class MetricConfig:
    kind: str = "kinetic"
    energy: float = 8.0


@dataclass(frozen=True)
class GridConfig:
    nx: int = 201
    ny: int = 201
    source: tuple = (0.0, 0.0)
    scheme: str = "simplex"
    stencil: int = 16


@dataclass(frozen=True)
class GeodesicConfig:
    source: tuple = (0.0, 0.0)
    goal: tuple = (1.0, 1.0)
    method: str = "nes"
    checkpoint: Optional[str] = None
    step: float = 0.01
    tol: float = 0.05


@dataclass(frozen=True)
class IkConfig:
    target: tuple = (2.0, 2.0)
    start: tuple = (0.3, 1.2)
    checkpoint: Optional[str] = None
    step: float = 0.01
    tol: float = 0.05
    step_scale: float = 0.05
    max_iters: int = 5000


@dataclass(frozen=True)
class EvalConfig:
    pairs: int = 100
    methods: tuple = ("euclidean", "rfm", "nes")
    metrics: tuple = ("kinetic", "jacobi")
    euclidean_checkpoint: Optional[str] = None
    kinetic_checkpoint: Optional[str] = None
    jacobi_checkpoint: Optional[str] = None


@dataclass(frozen=True)
class BenchConfig:
    checkpoint: Optional[str] = None
    batches: tuple = (1, 10, 100, 1000, 10000, 100000)
    repeats: int = 20


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs"
    arm: ArmConfig = field(default_factory=ArmConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    geodesic: GeodesicConfig = field(default_factory=GeodesicConfig)
    ik: IkConfig = field(default_factory=IkConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


SECTIONS = {
    "arm": ArmConfig,
    "metric": MetricConfig,
    "grid": GridConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "geodesic": GeodesicConfig,
    "ik": IkConfig,
    "eval": EvalConfig,
    "bench": BenchConfig,
}
# file key -> dataclass attribute where the names differ
RENAMES = {"train": {"lambda": "lam"}}
# attributes that exist on the shared dataclasses but are not file keys
HIDDEN = {"train": {"seed"}, "sampler": {"seed"}}


def _file_keys(section: str):
    back = {v: k for k, v in RENAMES.get(section, {}).items()}
    cls = SECTIONS[section]
    return {back.get(f.name, f.name): f for f in fields(cls) if f.name not in HIDDEN.get(section, set())}


def _coerce(key: str, value: Any, default: Any):
    """Convert a YAML scalar/list to the type of ``default``."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(key, "must be finite")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        proto = default[0] if default else value[0] if value else 0.0
        return tuple(_coerce(f"{key}[{i}]", v, proto) for i, v in enumerate(value))
    if default is None:
        if value is not None and not isinstance(value, (str, float, int)):
            raise ConfigError(key, f"unexpected value {value!r}")
        return value
    raise ConfigError(key, f"unsupported value {value!r}")


def _optional_str(key, value):
    if value is not None and not isinstance(value, str):
        raise ConfigError(key, f"expected a path string, got {value!r}")
    return value


def _section(name: str, raw: Any, seed: int):
    cls = SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping")
    keys = _file_keys(name)
    defaults = cls()
    kw = {}
    for k, v in raw.items():
        path = f"{name}.{k}"
        if k not in keys:
            raise ConfigError(path, "unknown key")
        attr = keys[k].name
        dflt = getattr(defaults, attr)
        if attr.endswith("checkpoint") or (name == "train" and attr == "lr_final"):
            kw[attr] = _optional_str(path, v) if attr.endswith("checkpoint") else (None if v is None else _coerce(path, v, 1.0))
        else:
            kw[attr] = _coerce(path, v, dflt)
    if "seed" in {f.name for f in fields(cls)}:
        kw["seed"] = seed
    _validate(name, kw)
    try:
        return cls(**kw)
    except ValueError as exc:
        raise ConfigError(_guess_key(name, str(exc)), str(exc)) from None


def _guess_key(section, message):
    for key in _file_keys(section):
        if key.replace("_", " ") in message or key in message:
            return f"{section}.{key}"
    return section


def _check(cond, key, message):
    if not cond:
        raise ConfigError(key, message)


def _validate(name: str, kw: dict):
    g = kw.get
    if name == "arm":
        for k in ("l1", "l2", "m1", "m2"):
            if k in kw:
                _check(kw[k] > 0, f"arm.{k}", "must be positive")
    elif name == "metric":
        if "kind" in kw:
            _check(kw["kind"] in ("euclidean", "kinetic", "jacobi"), "metric.kind", "must be euclidean, kinetic or jacobi")
    elif name == "grid":
        for k in ("nx", "ny"):
            if k in kw:
                _check(kw[k] >= 3, f"grid.{k}", "must be at least 3")
        if "source" in kw:
            _check(len(kw["source"]) == 2, "grid.source", "must have two coordinates")
        if "scheme" in kw:
            _check(kw["scheme"] in ("simplex", "graph"), "grid.scheme", "must be simplex or graph")
        if "stencil" in kw:
            _check(kw["stencil"] in (8, 16), "grid.stencil", "must be 8 or 16")
    elif name == "train":
        if "lam" in kw:
            _check(kw["lam"] >= 0, "train.lambda", "must be >= 0")
        if "learning_rate" in kw:
            _check(kw["learning_rate"] > 0, "train.learning_rate", "must be > 0")
        if g("lr_final") is not None:
            _check(kw["lr_final"] > 0, "train.lr_final", "must be > 0")
        if "epochs" in kw:
            _check(kw["epochs"] >= 0, "train.epochs", "must be >= 0")
        if "batch_size" in kw:
            _check(kw["batch_size"] >= 1, "train.batch_size", "must be >= 1")
        if "sampler" in kw:
            _check(kw["sampler"] in ("uniform", "rm-mala"), "train.sampler", "must be uniform or rm-mala")
        if "validation_fraction" in kw:
            _check(0 <= kw["validation_fraction"] < 1, "train.validation_fraction", "must lie in [0, 1)")
        if "local_fraction" in kw:
            _check(0 <= kw["local_fraction"] <= 1, "train.local_fraction", "must lie in [0, 1]")
        if "local_scale" in kw:
            _check(kw["local_scale"] > 0, "train.local_scale", "must be > 0")
        if "hidden" in kw:
            _check(len(kw["hidden"]) >= 1 and all(h >= 1 for h in kw["hidden"]), "train.hidden", "needs positive widths")
        if "dtype" in kw:
            _check(kw["dtype"] in ("float32", "float64"), "train.dtype", "must be float32 or float64")
    elif name == "sampler":
        if "step" in kw:
            _check(kw["step"] > 0, "sampler.step", "must be > 0")
        for k in ("n_burn", "n_sample"):
            if k in kw:
                _check(kw[k] >= 0, f"sampler.{k}", "must be >= 0")
    elif name in ("geodesic", "ik"):
        for k in ("step", "tol", "step_scale"):
            if k in kw:
                _check(kw[k] > 0, f"{name}.{k}", "must be > 0")
        if "method" in kw:
            _check(kw["method"] in ("nes", "rfm", "euclidean"), f"{name}.method", "must be nes, rfm or euclidean")
        if "step_scale" in kw:
            _check(kw["step_scale"] <= 1, "ik.step_scale", "must be <= 1")
    elif name == "eval":
        if "pairs" in kw:
            _check(kw["pairs"] >= 1, "eval.pairs", "must be >= 1")
        for m in kw.get("methods", ()):
            _check(m in ("euclidean", "rfm", "nes"), "eval.methods", f"unknown method {m!r}")
        for m in kw.get("metrics", ()):
            _check(m in ("euclidean", "kinetic", "jacobi"), "eval.metrics", f"unknown metric {m!r}")
    elif name == "bench":
        if "repeats" in kw:
            _check(kw["repeats"] >= 1, "bench.repeats", "must be >= 1")
        _check(all(b >= 1 for b in kw.get("batches", (1,))), "bench.batches", "batch sizes must be >= 1")


def config_from_dict(raw: Optional[dict], base_dir: Path = Path("."), check_files: bool = True) -> RunConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("", "top level must be a mapping")
    top = {"seed", "out", *SECTIONS}
    for k in raw:
        if k not in top:
            raise ConfigError(str(k), "unknown key")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0 or seed >= 2**64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")
    out = raw.get("out", "runs")
    if not isinstance(out, str):
        raise ConfigError("out", "expected a path string")
    sections = {name: _section(name, raw.get(name), seed) for name in SECTIONS}
    cfg = RunConfig(seed=seed, out=out, **sections)
    if check_files:
        _check_files(cfg, base_dir)
    return cfg


def _check_files(cfg: RunConfig, base_dir: Path):
    refs = {
        "geodesic.checkpoint": cfg.geodesic.checkpoint,
        "ik.checkpoint": cfg.ik.checkpoint,
        "eval.euclidean_checkpoint": cfg.eval.euclidean_checkpoint,
        "eval.kinetic_checkpoint": cfg.eval.kinetic_checkpoint,
        "eval.jacobi_checkpoint": cfg.eval.jacobi_checkpoint,
        "bench.checkpoint": cfg.bench.checkpoint,
    }
    for key, ref in refs.items():
        if ref is not None and not resolve(ref, base_dir).exists():
            raise ConfigError(key, f"file not found: {ref}")


def resolve(ref: str, base_dir: Path) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else base_dir / p


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("", f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("", f"malformed YAML: {exc}") from None
    return config_from_dict(raw, path.parent)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed, train=replace(cfg.train, seed=seed), sampler=replace(cfg.sampler, seed=seed))


def config_to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "out": cfg.out}
    for name in SECTIONS:
        obj = getattr(cfg, name)
        sec = {}
        for key, f in _file_keys(name).items():
            v = getattr(obj, f.name)
            sec[key] = list(v) if isinstance(v, tuple) else v
        out[name] = sec
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def apply_overrides(raw: dict, assignments) -> dict:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    raw = dict(raw or {})
    for item in assignments:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, text = item.split("=", 1)
        value = yaml.safe_load(text)
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            child = node.get(p)
            node[p] = dict(child) if isinstance(child, dict) else {}
            node = node[p]
        node[parts[-1]] = value
    return raw
