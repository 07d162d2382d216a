"""Run configuration: validation, JSON round-trip, dataset loading.

The config file is a JSON object whose keys mirror RunConfig field names
exactly. The dataset source is either a planted synthetic spec or a CSV
path plus schema file. A short hash of the canonical config JSON travels
with checkpoints and reports so artifacts can be matched to their run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .errors import ConfigError

__all__ = ["RunConfig", "MODES", "load_dataset"]

MODES = ("sdsp", "full-share", "fixed-subset", "exhaustive-oracle")
OVERALL_METRICS = ("pooled", "mean")
REWARD_METRICS = ("auc", "neg-logloss")
VALUE_AGGREGATIONS = ("mean", "last", "ema")


@dataclass
class RunConfig:
    """Everything a run needs; field names are the config-file keys."""

    domains: int
    dataset: dict
    seed: int = 0
    mode: str = "sdsp"
    expert_counts: list | None = None
    embedding_dim: int = 4
    expert_hidden: int = 8
    repr_dim: int = 8
    tower_hidden: int = 8
    batch_size: int = 4096
    quotas: list | None = None
    learning_rate: float = 0.001
    proto_loss_weight: float = 1e-4
    num_prototypes: int = 10
    explore_init: float = 1.0
    explore_decay: float = 0.9
    selection_interval: int = 2
    epochs: int = 10
    early_stop_patience: int = 5
    split_fractions: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    overall_metric: str = "pooled"
    value_aggregation: str = "mean"
    reward_metric: str = "auc"
    fixed_subsets: list | None = None
    pin_full_share: bool = False

    def __post_init__(self):
        if self.domains < 1:
            raise ConfigError(f"domains must be >= 1, got {self.domains}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.expert_counts is None:
            self.expert_counts = [1] * self.domains
        self.expert_counts = [int(c) for c in self.expert_counts]
        if len(self.expert_counts) != self.domains or min(self.expert_counts) < 1:
            raise ConfigError(
                f"expert_counts needs {self.domains} positive entries, "
                f"got {self.expert_counts}")
        for name in ("embedding_dim", "expert_hidden", "repr_dim",
                     "tower_hidden", "batch_size", "num_prototypes",
                     "selection_interval", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if self.quotas is None:
            self.quotas = data_mod.equal_quotas(self.batch_size, self.domains)
        self.quotas = [int(q) for q in self.quotas]
        if len(self.quotas) != self.domains or min(self.quotas) < 1:
            raise ConfigError(
                f"quotas needs {self.domains} positive entries, got {self.quotas}")
        if sum(self.quotas) != self.batch_size:
            raise ConfigError(
                f"quotas {self.quotas} sum to {sum(self.quotas)}, "
                f"batch_size is {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.proto_loss_weight < 0:
            raise ConfigError("proto_loss_weight must be >= 0")
        if not 0.0 <= self.explore_init <= 1.0:
            raise ConfigError("explore_init must lie in [0, 1]")
        if not 0.0 < self.explore_decay <= 1.0:
            raise ConfigError("explore_decay must lie in (0, 1]")
        if self.overall_metric not in OVERALL_METRICS:
            raise ConfigError(
                f"overall_metric must be one of {OVERALL_METRICS}")
        if self.value_aggregation not in VALUE_AGGREGATIONS:
            raise ConfigError(
                f"value_aggregation must be one of {VALUE_AGGREGATIONS}")
        if self.reward_metric not in REWARD_METRICS:
            raise ConfigError(f"reward_metric must be one of {REWARD_METRICS}")
        if len(self.split_fractions) != 3:
            raise ConfigError("split_fractions needs 3 entries")
        self.split_fractions = [float(f) for f in self.split_fractions]
        if self.pin_full_share and self.mode != "sdsp":
            raise ConfigError("pin_full_share only applies to sdsp mode")
        if self.mode == "fixed-subset":
            if self.fixed_subsets is None:
                raise ConfigError("fixed-subset mode requires fixed_subsets")
        if self.fixed_subsets is not None:
            if len(self.fixed_subsets) != self.domains:
                raise ConfigError(
                    f"fixed_subsets needs {self.domains} entries")
            normalized = []
            for d, subset in enumerate(self.fixed_subsets):
                members = sorted(int(s) for s in subset)
                if d not in members:
                    raise ConfigError(
                        f"fixed_subsets[{d}] must contain domain {d}")
                if any(not 0 <= s < self.domains for s in members):
                    raise ConfigError(
                        f"fixed_subsets[{d}] references unknown domains")
                normalized.append(members)
            self.fixed_subsets = normalized
        self._validate_dataset()

    def _validate_dataset(self):
        if not isinstance(self.dataset, dict) or "kind" not in self.dataset:
            raise ConfigError('dataset must be an object with a "kind" key')
        kind = self.dataset["kind"]
        if kind == "synth":
            for key in ("affinity", "noise", "sizes"):
                if key not in self.dataset:
                    raise ConfigError(f"synthetic dataset needs {key!r}")
            aff = np.asarray(self.dataset["affinity"], dtype=float)
            if aff.shape != (self.domains, self.domains):
                raise ConfigError(
                    f"affinity must be {self.domains}x{self.domains}")
            if len(self.dataset["sizes"]) != self.domains:
                raise ConfigError(f"sizes needs {self.domains} entries")
        elif kind == "csv":
            for key in ("path", "schema"):
                if key not in self.dataset:
                    raise ConfigError(f"csv dataset needs {key!r}")
        else:
            raise ConfigError(f'dataset kind must be "synth" or "csv", '
                              f'got {kind!r}')

    # ------------------------------------------------------------ round trip

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"domains", "dataset"} - set(raw)
        if missing:
            raise ConfigError(f"missing required config keys: {sorted(missing)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        raw = self.to_dict()
        raw.update(changes)
        return RunConfig.from_dict(raw)


def load_dataset(config: RunConfig) -> data_mod.DomainDataset:
    """Materialize the unsplit dataset named by the config."""
    ds_cfg = config.dataset
    if ds_cfg["kind"] == "synth":
        spec = data_mod.AffinitySpec(
            domains=config.domains,
            affinity=np.asarray(ds_cfg["affinity"], dtype=float),
            noise=np.asarray(ds_cfg["noise"], dtype=float))
        return data_mod.synth_generate(
            spec, ds_cfg["sizes"], seed=config.seed,
            fields_per_concept=int(ds_cfg.get("fields_per_concept", 2)),
            vocab_size=int(ds_cfg.get("vocab_size", 16)),
            feature_noise=float(ds_cfg.get("feature_noise", 0.3)))
    schema = data_mod.Schema.load(ds_cfg["schema"])
    if schema.domains != config.domains:
        raise ConfigError(
            f"schema declares {schema.domains} domains, config says "
            f"{config.domains}")
    return data_mod.load_csv(ds_cfg["path"], schema)
