"""Run configuration: YAML file + ``--set section.key=value`` overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import yaml

from .encoders import ModelConfig
from .supervision import SupervisionConfig, GAZE_LOSSES
from .synthcorpus import SyntheticSpec


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16
    patience: int = 3
    factor: float = 0.5
    min_lr: float = 1e-6


@dataclass
class DataConfig:
    corpus: str | None = None
    eval_corpus: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval_n_studies: int = 300
    eval_seed_offset: int = 1000
    val_fraction: float = 0.1
    per_class: int = 20
    prompt_file: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    supervision: SupervisionConfig = field(default_factory=SupervisionConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["supervision"]["lambda"] = d["supervision"].pop("lam")
        return d

    def config_hash(self) -> str:
        # the output location does not influence results, so it is not hashed
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        s = self.supervision
        if s.gaze_loss not in GAZE_LOSSES:
            raise ConfigError(f"supervision.gaze_loss must be one of {GAZE_LOSSES}")
        if s.contrastive not in ("hybrid", "single"):
            raise ConfigError("supervision.contrastive must be 'hybrid' or 'single'")
        if not 0.0 < s.rho <= 1.0:
            raise ConfigError("supervision.rho must lie in (0, 1]")
        if not 0.0 <= s.lam <= 1.0:
            raise ConfigError("supervision.lambda must lie in [0, 1]")
        if not 0.0 <= s.beta < 1.0:
            raise ConfigError("supervision.beta must lie in [0, 1)")
        m = self.model
        if m.image_size % m.patch_size or m.d % m.heads:
            raise ConfigError("model dimensions are inconsistent")
        if self.optimizer.batch_size < 1 or self.optimizer.epochs < 0:
            raise ConfigError("optimizer.batch_size must be >= 1 and epochs >= 0")
        return self


_SECTIONS = {"model": ModelConfig, "supervision": SupervisionConfig,
             "optimizer": OptimizerConfig, "data": DataConfig}
_ALIASES = {("supervision", "lambda"): "lam"}


def _coerce(value, default, where: str):
    """Check a scalar override against the type of the field's default."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where} expects {type(default).__name__}, got {value!r}")
    return value


def _build(cls, values: dict, where: str):
    if values is not None and not isinstance(values, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in (values or {}).items():
        section = where.split(".")[-1]
        name = _ALIASES.get((section, key), key)
        if name not in known:
            raise ConfigError(f"unknown config key {where}.{key}")
        if cls is DataConfig and name == "synthetic":
            value = _build(SyntheticSpec, value, f"{where}.synthetic")
        else:
            value = _coerce(value, getattr(defaults, name), f"{where}.{key}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where} block: {exc}") from exc


def _set_path(tree: dict, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {dotted!r}")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r} descends into a scalar")
    node[parts[-1]] = yaml.safe_load(raw) if raw != "" else None


def load_config(path=None, overrides=()) -> RunConfig:
    tree: dict = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError("config file must hold a mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set_path(tree, key.strip(), raw.strip())
    return config_from_dict(tree)


def config_from_dict(tree: dict) -> RunConfig:
    kwargs = {}
    for key, value in tree.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key in ("seed", "output_dir"):
            kwargs[key] = _coerce(value, getattr(RunConfig, key), key)
        else:
            raise ConfigError(f"unknown config key {key}")
    return RunConfig(**kwargs).validate()


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
