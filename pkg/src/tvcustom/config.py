"""Experiment configuration: one nested JSON document, unknown keys rejected.

Canonical schema (every section and key optional, defaults shown by
``tvcustom simbench --print-config``)::

    {
      "seed": 0,
      "out_dir": "runs/default",
      "universe":        {UniverseConfig fields},
      "population":      {UserPopulation fields},
      "architecture":    {ArchitectureDescriptor fields},
      "phase1":          {Phase1Config fields, stages as {steps, start_lr, end_lr, batch_size}},
      "personalization": {PersonalizationConfig fields},
      "protocol":        {"shots": [10, 100], "trials": 10, "curve_every": 50},
      "ablation":        {"init": ["adaptive"], "loss": ["rank"], "layer_mode": ["layerwise"],
                          "n_tasks": [], "best_fit_ft": false}
    }

``temperature`` may be given as a number or as ``"inf"``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ContractError
from .nn import ArchitectureDescriptor
from .personalize import PersonalizationConfig
from .phase1 import Phase1Config, Stage
from .synth import UniverseConfig, UserPopulation

INITS = ("uniform", "best_fit", "adaptive")
LOSSES = ("rank", "mse")
LAYER_MODES = ("layerwise", "agnostic")


class ConfigError(ContractError):
    """The configuration document is malformed or holds an invalid value."""


@dataclass(frozen=True)
class ProtocolConfig:
    shots: tuple[int, ...] = (10, 100)
    trials: int = 10
    curve_every: int = 50  # held-out SROCC sampled every this many steps; 0 disables

    def __post_init__(self):
        object.__setattr__(self, "shots", tuple(int(k) for k in self.shots))
        if not self.shots or any(k < 2 for k in self.shots):
            raise ConfigError("protocol.shots needs at least one value, each >= 2")
        if self.trials < 1:
            raise ConfigError("protocol.trials must be positive")
        if self.curve_every < 0:
            raise ConfigError("protocol.curve_every must be non-negative")


@dataclass(frozen=True)
class AblationSwitches:
    init: tuple[str, ...] = ("adaptive",)
    loss: tuple[str, ...] = ("rank",)
    layer_mode: tuple[str, ...] = ("layerwise",)
    n_tasks: tuple[int, ...] = ()  # sweep over the first n task vectors
    best_fit_ft: bool = False

    def __post_init__(self):
        for name, allowed in (("init", INITS), ("loss", LOSSES), ("layer_mode", LAYER_MODES)):
            vals = getattr(self, name)
            vals = (vals,) if isinstance(vals, str) else tuple(vals)
            object.__setattr__(self, name, vals)
            if not vals:
                raise ConfigError(f"ablation.{name} needs at least one value")
            bad = [v for v in vals if v not in allowed]
            if bad:
                raise ConfigError(f"ablation.{name}: {bad} not in {allowed}")
        object.__setattr__(self, "n_tasks", tuple(int(n) for n in self.n_tasks))
        if any(n < 1 for n in self.n_tasks):
            raise ConfigError("ablation.n_tasks entries must be positive")
        if not isinstance(self.best_fit_ft, bool):
            raise ConfigError("ablation.best_fit_ft must be true or false")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    universe: UniverseConfig = UniverseConfig()
    population: UserPopulation = UserPopulation()
    architecture: ArchitectureDescriptor = ArchitectureDescriptor()
    phase1: Phase1Config = Phase1Config()
    personalization: PersonalizationConfig = PersonalizationConfig()
    protocol: ProtocolConfig = ProtocolConfig()
    ablation: AblationSwitches = field(default_factory=AblationSwitches)

    def __post_init__(self):
        if self.architecture.input_dim != self.universe.feature_dim:
            raise ConfigError(
                f"architecture.input_dim {self.architecture.input_dim} != universe.feature_dim "
                f"{self.universe.feature_dim}"
            )
        too_many = [n for n in self.ablation.n_tasks if n > self.universe.n_databases]
        if too_many:
            raise ConfigError(f"ablation.n_tasks {too_many} exceed the {self.universe.n_databases} databases")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "universe": self.universe.to_dict(),
            "population": self.population.to_dict(),
            "architecture": self.architecture.to_dict(),
            "phase1": self.phase1.to_dict(),
            "personalization": _plain(dataclasses.asdict(self.personalization)),
            "protocol": _plain(dataclasses.asdict(self.protocol)),
            "ablation": _plain(dataclasses.asdict(self.ablation)),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        _reject_unknown("", d, {f.name for f in dataclasses.fields(cls)})
        kw: dict[str, Any] = {}
        try:
            if "seed" in d:
                kw["seed"] = _int(d["seed"], "seed")
            if "out_dir" in d:
                kw["out_dir"] = str(d["out_dir"])
            if "universe" in d:
                kw["universe"] = _section(UniverseConfig, d["universe"], "universe")
            if "population" in d:
                kw["population"] = _section(UserPopulation, d["population"], "population")
            if "architecture" in d:
                sec = _object(d["architecture"], "architecture")
                kw["architecture"] = ArchitectureDescriptor.from_dict(sec)
            if "phase1" in d:
                sec = _object(d["phase1"], "phase1")
                _reject_unknown("phase1.", sec, {f.name for f in dataclasses.fields(Phase1Config)})
                sec = dict(sec)
                for k in ("pretrain", "train_head", "fine_tune_backbone"):
                    if k in sec:
                        sec[k] = _section(Stage, sec[k], f"phase1.{k}")
                kw["phase1"] = Phase1Config(**sec)
            if "personalization" in d:
                sec = dict(_object(d["personalization"], "personalization"))
                if "temperature" in sec:
                    sec["temperature"] = _temperature(sec["temperature"])
                kw["personalization"] = _section(PersonalizationConfig, sec, "personalization")
            if "protocol" in d:
                kw["protocol"] = _section(ProtocolConfig, d["protocol"], "protocol")
            if "ablation" in d:
                kw["ablation"] = _section(AblationSwitches, d["ablation"], "ablation")
            return cls(**kw)
        except ConfigError:
            raise
        except (ContractError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _plain(obj):
    """Tuples to lists and infinities to ``"inf"`` so the dict is strict JSON."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _temperature(v) -> float:
    if v == "inf":
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"personalization.temperature must be a number or \"inf\", got {v!r}")
    return float(v)


def _int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where} must be an integer, got {v!r}")
    return v


def _object(v, where: str) -> dict:
    if not isinstance(v, dict):
        raise ConfigError(f"{where} must be an object")
    return v


def _reject_unknown(prefix: str, d: dict, known: set[str]) -> None:
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {[prefix + k for k in unknown]}")


def _section(cls, v, where: str):
    sec = _object(v, where)
    _reject_unknown(where + ".", sec, {f.name for f in dataclasses.fields(cls)})
    return cls(**{k: tuple(x) if isinstance(x, list) else x for k, x in sec.items()})
