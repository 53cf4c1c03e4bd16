"""Flat ``key = value`` experiment configuration.

Example::

    # CCDD run with the default federated setup
    partition.scheme = ccdd
    partition.phi = 2
    fl.policy = bacsa

Every key is typed; unknown keys and malformed values are rejected with the
offending line number. ``dump_config`` writes every key, so
``parse_config_text(dump_config(cfg)) == cfg``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .data import PartitionSpec
from .engine import POLICIES, FLConfig
from .nn import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # synthetic | idx
    classes: int = 10
    per_class: int = 1200
    test_per_class: int = 200
    dim: int = 64
    spread: float = 2.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class ChannelSpec:
    lo_db: float = 0.0
    hi_db: float = 20.0


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    fl: FLConfig = field(default_factory=FLConfig)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    seed: int = 0
    seeds: int = 1
    montecarlo_h: int = 20
    policies: tuple[str, ...] = ("random", "greedy_balance", "all_clients", "bacsa")
    out: str = "results"
    figures: bool = True

    def seed_list(self) -> list[int]:
        return [self.seed + i for i in range(self.seeds)]


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _str_tuple(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (section, attribute, parser); section None = top level
_KEYS: dict[str, tuple[str | None, str, Callable[[str], Any]]] = {
    "dataset.source": ("dataset", "source", str),
    "dataset.classes": ("dataset", "classes", int),
    "dataset.per_class": ("dataset", "per_class", int),
    "dataset.test_per_class": ("dataset", "test_per_class", int),
    "dataset.dim": ("dataset", "dim", int),
    "dataset.spread": ("dataset", "spread", float),
    "dataset.train_images": ("dataset", "train_images", str),
    "dataset.train_labels": ("dataset", "train_labels", str),
    "dataset.test_images": ("dataset", "test_images", str),
    "dataset.test_labels": ("dataset", "test_labels", str),
    "partition.scheme": ("partition", "scheme", str),
    "partition.alpha": ("partition", "alpha", float),
    "partition.phi": ("partition", "phi", int),
    "fl.clients": ("fl", "n_clients", int),
    "fl.select": ("fl", "n_select", int),
    "fl.rounds": ("fl", "rounds", int),
    "fl.policy": ("fl", "policy", str),
    "fl.hidden": ("fl", "hidden", _int_tuple),
    "fl.init": ("fl", "init", str),
    "fl.n0": ("fl", "n0", int),  # 0 = smallest client size
    "fl.gamma": ("fl", "gamma", float),
    "fl.theta": ("fl", "theta", float),
    "fl.variance": ("fl", "variance", str),
    "fl.refresh": ("fl", "refresh", int),
    "train.lr": ("train", "learning_rate", float),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.epochs": ("train", "epochs", int),
    "train.batch_size": ("train", "batch_size", int),
    "channel.lo_db": ("channel", "lo_db", float),
    "channel.hi_db": ("channel", "hi_db", float),
    "run.seed": (None, "seed", int),
    "run.seeds": (None, "seeds", int),
    "run.montecarlo_h": (None, "montecarlo_h", int),
    "run.policies": (None, "policies", _str_tuple),
    "run.out": (None, "out", str),
    "run.figures": (None, "figures", _bool),
}

CONFIG_KEYS = tuple(_KEYS)


def _flatten(cfg: ExperimentConfig) -> dict[str, Any]:
    sections = {
        "dataset": cfg.dataset, "partition": cfg.partition, "fl": cfg.fl,
        "train": cfg.fl.train, "channel": cfg.channel, None: cfg,
    }
    out = {}
    for key, (section, attr, _) in _KEYS.items():
        v = getattr(sections[section], attr)
        out[key] = 0 if key == "fl.n0" and v is None else v
    return out


def default_values() -> dict[str, Any]:
    return _flatten(ExperimentConfig())


def build_config(values: dict[str, Any]) -> ExperimentConfig:
    """Assemble and validate a config from fully typed flat values."""
    v = {**default_values(), **values}
    unknown = set(values) - set(_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")

    def pick(section):
        return {attr: v[k] for k, (sec, attr, _) in _KEYS.items() if sec == section}

    try:
        dataset = DatasetSpec(**pick("dataset"))
        partition = PartitionSpec(**pick("partition"))
        train = TrainConfig(**pick("train"))
        fl_vals = pick("fl")
        fl_vals["n0"] = fl_vals["n0"] or None
        fl = FLConfig(train=train, seed=v["run.seed"], **fl_vals)
        channel = ChannelSpec(**pick("channel"))
        cfg = ExperimentConfig(dataset, partition, fl, channel, **pick(None))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    d = cfg.dataset
    if d.source not in ("synthetic", "idx"):
        raise ConfigError(f"dataset.source must be synthetic or idx, got {d.source!r}")
    paths = (d.train_images, d.train_labels, d.test_images, d.test_labels)
    if d.source == "idx" and not all(paths):
        raise ConfigError("dataset.source = idx needs train/test image and label paths")
    if d.source == "synthetic" and any(paths):
        raise ConfigError("IDX paths given but dataset.source = synthetic")
    if min(d.classes, d.per_class, d.dim, d.test_per_class) < 1 or d.spread <= 0:
        raise ConfigError("synthetic dataset parameters must be positive")
    if cfg.partition.phi > d.classes:
        raise ConfigError(f"partition.phi={cfg.partition.phi} exceeds dataset.classes={d.classes}")
    if cfg.partition.scheme == "ccdd" and cfg.fl.n_clients * cfg.partition.phi < d.classes:
        raise ConfigError("fl.clients * partition.phi must cover every class")
    if cfg.fl.variance not in ("uniform", "spread"):
        raise ConfigError("fl.variance must be uniform or spread")
    if cfg.channel.hi_db < cfg.channel.lo_db:
        raise ConfigError("channel.hi_db must be >= channel.lo_db")
    if cfg.seeds < 1:
        raise ConfigError("run.seeds must be at least 1")
    if cfg.montecarlo_h < 1:
        raise ConfigError("run.montecarlo_h must be positive")
    bad = [p for p in cfg.policies if p not in POLICIES]
    if bad:
        raise ConfigError(f"unknown policies in run.policies: {bad}")


def parse_value(key: str, raw: str, where: str = "") -> Any:
    if key not in _KEYS:
        raise ConfigError(f"{where}unknown key {key!r}")
    try:
        return _KEYS[key][2](raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}bad value for {key}: {exc}") from exc


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, raw, f"line {lineno}: ")
    for key, raw in (overrides or {}).items():
        values[key] = parse_value(key, raw, "override: ")
    return build_config(values)


def parse_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in _flatten(cfg).items())
