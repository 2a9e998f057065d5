"""Run configuration: one TOML file describes a full, reproducible training run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from . import schedules
from .data import DatasetSpec
from .model import TransformerConfig
from .objectives import ObjectiveConfig, OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 16
    eval_every: int = 5_000
    checkpoint_every: int = 5_000
    log_every: int = 1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"train.{f.name} must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 4096
    sample_steps: int = 50
    sampleshift: float = 1.0
    tau_probe: float = 0.25
    probe_samples: int = 2048
    feature_space: str = "pixel"
    eval_at_start: bool = False

    def __post_init__(self):
        if self.feature_space not in ("pixel", "probe_encoder"):
            raise ValueError(f"unknown feature space {self.feature_space!r}")
        if not 0 <= self.tau_probe <= 1:
            raise ValueError("eval.tau_probe must lie in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: TransformerConfig = field(default_factory=TransformerConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    schedule: schedules.TimestepDistribution = field(default_factory=lambda: schedules.LogitNormal())
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        m, d = self.model, self.dataset
        if (m.tokens, m.token_dim, m.num_classes) != (d.tokens, d.token_dim, d.num_classes):
            raise ValueError(
                f"model (tokens={m.tokens}, token_dim={m.token_dim}, classes={m.num_classes}) does not match "
                f"dataset (tokens={d.tokens}, token_dim={d.token_dim}, classes={d.num_classes})"
            )
        self.objective.taps(m)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data_seed": self.data_seed,
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "objective": self.objective.to_dict(),
            "schedule": schedules.to_dict(self.schedule),
            "optimizer": self.optimizer.to_dict(),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        sections = {
            "dataset": DatasetSpec,
            "model": TransformerConfig,
            "objective": ObjectiveConfig,
            "optimizer": OptimizerConfig,
            "train": TrainConfig,
            "eval": EvalConfig,
        }
        known = set(sections) | {"seed", "data_seed", "schedule"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            for name, typ in sections.items():
                if name in d:
                    kw[name] = _build(typ, d[name], name)
            if "schedule" in d:
                kw["schedule"] = schedules.from_dict(dict(d["schedule"]))
            for name in ("seed", "data_seed"):
                if name in d:
                    kw[name] = int(d[name])
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as err:
            raise ConfigError(str(err)) from None

    def with_overrides(self, **sections) -> RunConfig:
        """Replace fields inside sections, e.g. ``with_overrides(objective={"gamma": 0})``."""
        kw = {}
        for name, value in sections.items():
            current = getattr(self, name)
            kw[name] = replace(current, **value) if isinstance(value, dict) else value
        return replace(self, **kw)


def _build(typ, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")
    names = {f.name for f in fields(typ)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return typ(**values)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def loads(text: str) -> RunConfig:
    try:
        return RunConfig.from_dict(tomli.loads(text))
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"invalid TOML: {err}") from None


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def load_dataset_spec(path) -> DatasetSpec:
    try:
        d = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"invalid TOML: {err}") from None
    d = d.get("dataset", d)
    try:
        return DatasetSpec.from_dict(d)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
