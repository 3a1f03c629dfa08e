"""Run configuration: one JSON document with a ``schema`` version and fixed sections."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .langevin import LangevinConfig
from .trainer import ArchSpec, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataSection(DatasetSpec):
    path: str = ""  # directory holding train.mmds / test.mmds; "" means <out_dir>/data


@dataclass
class TrainSection:
    iterations: int = 2000
    batch_size: int = 64
    lr_model: float = 1e-3
    lr_ebm: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    extension_enabled: bool = False
    freeze_energy: bool = False
    checkpoint_every: int = 500
    partition_samples: int = 256
    record_wall_clock: bool = False


@dataclass
class EvalSection:
    n_joint_samples: int = 1000
    classifier_epochs: int = 20
    sampled_cross: bool = False
    elbo_batches: int = 4
    seed: int = 0


@dataclass
class AblationSection:
    hidden: tuple = (32, 64)
    layers: tuple = (4, 6)
    steps: tuple = (30, 50)
    seeds: tuple = (0,)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ArchSpec = field(default_factory=ArchSpec)
    train: TrainSection = field(default_factory=TrainSection)
    langevin: LangevinConfig = field(default_factory=lambda: LangevinConfig(steps=50, step_size=0.1, n_chains=64, snapshot_steps=(0, 10, 50)))
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA_VERSION}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = _plain(dataclasses.asdict(v)) if dataclasses.is_dataclass(v) else v
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            iterations=t.iterations,
            batch_size=t.batch_size,
            lr_model=t.lr_model,
            lr_ebm=t.lr_ebm,
            betas=tuple(t.betas),
            eps=t.eps,
            langevin=dataclasses.replace(self.langevin, snapshot_steps=()),
            seed=t.seed,
            extension_enabled=t.extension_enabled,
            freeze_energy=t.freeze_energy,
            checkpoint_every=t.checkpoint_every,
            partition_samples=t.partition_samples,
            record_wall_clock=t.record_wall_clock,
        )

    def dataset_spec(self) -> DatasetSpec:
        fields = {f.name for f in dataclasses.fields(DatasetSpec)}
        return DatasetSpec(**{k: v for k, v in dataclasses.asdict(self.data).items() if k in fields})

    def data_dir(self) -> Path:
        return Path(self.data.path) if self.data.path else Path(self.out_dir) / "data"


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _coerce(section: str, name: str, default, value):
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or any(isinstance(x, (list, dict, str)) for x in value):
            raise ConfigError(f"{where}: expected a list of numbers")
        return tuple(value)
    return value


def _section(name: str, cls, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    default = cls() if cls is not LangevinConfig else RunConfig().langevin
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {', '.join(unknown)}")
    values = {k: _coerce(name, k, getattr(default, k), v) for k, v in raw.items()}
    try:
        return dataclasses.replace(default, **values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


_SECTIONS = {
    "data": DataSection,
    "model": ArchSpec,
    "train": TrainSection,
    "langevin": LangevinConfig,
    "eval": EvalSection,
    "ablation": AblationSection,
}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if raw.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"schema: expected {SCHEMA_VERSION}, got {raw.get('schema')!r}")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"schema", "out_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {', '.join(unknown)}")
    parts = {name: _section(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    out_dir = raw.get("out_dir", RunConfig.out_dir)
    if not isinstance(out_dir, str):
        raise ConfigError("out_dir: expected a string")
    cfg = RunConfig(out_dir=out_dir, **parts)
    try:
        cfg.dataset_spec().validate()
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(raw)
