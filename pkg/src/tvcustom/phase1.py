"""Task-vector acquisition: a shared base model and one fine-tune per database.

The base is trained briefly on data pooled across all databases.  Each
database then gets a head-only stage (backbone frozen) followed by a full
fine-tune at a lower learning rate, both on AdamW with cosine annealing.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .data import SampleSet
from .errors import ContractError
from .nn import ArchitectureDescriptor, ModelParams
from .personalize import PersonalizationConfig, finetune_params
from .synth import TaskUniverse, generate_database

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage:
    steps: int
    start_lr: float
    end_lr: float
    batch_size: int

    def as_config(self, loss: str) -> PersonalizationConfig:
        return PersonalizationConfig(
            start_lr=self.start_lr, end_lr=self.end_lr, batch_size=self.batch_size, steps=self.steps, loss=loss
        )


@dataclass(frozen=True)
class Phase1Config:
    samples_per_database: int = 2000
    pretrain: Stage = Stage(600, 1e-2, 1e-3, 128)
    train_head: Stage = Stage(1500, 3e-3, 3e-4, 128)
    fine_tune_backbone: Stage = Stage(300, 3e-4, 3e-5, 32)
    weight_decay: float = 0.01
    loss: str = "mse"

    def __post_init__(self):
        if self.samples_per_database < 2:
            raise ContractError("samples_per_database must be at least 2")
        if self.loss not in ("mse", "rank"):
            raise ContractError(f"unknown phase-1 loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Phase1Config":
        kw = dict(d)
        for k in ("pretrain", "train_head", "fine_tune_backbone"):
            if k in kw and isinstance(kw[k], dict):
                kw[k] = Stage(**kw[k])
        return cls(**kw)


def database_task_id(i: int) -> str:
    return f"db{i}"


def training_sets(universe: TaskUniverse, cfg: Phase1Config) -> list[SampleSet]:
    return [generate_database(universe, i, cfg.samples_per_database, seed=0) for i in range(universe.n_databases)]


def pretrain(
    universe: TaskUniverse, descriptor: ArchitectureDescriptor, cfg: Phase1Config, seed: int
) -> ModelParams:
    rng = np.random.default_rng([seed, 0])
    params = ModelParams.init(descriptor, rng)
    pooled = SampleSet.concat(training_sets(universe, cfg))
    params, _ = finetune_params(
        params, pooled, cfg.pretrain.as_config(cfg.loss), seed=seed, train_mode=True, weight_decay=cfg.weight_decay
    )
    return params


def finetune_database(
    pre: ModelParams, data: SampleSet, cfg: Phase1Config, seed: int
) -> tuple[ModelParams, list[float]]:
    """Two-stage fine-tune from ``pre``; returns the model and the loss trace."""
    head = pre.descriptor.head_layers
    params, log1 = finetune_params(
        pre, data, cfg.train_head.as_config(cfg.loss), seed=seed, trainable=head,
        train_mode=True, weight_decay=cfg.weight_decay, anchor=pre,
    )
    params, log2 = finetune_params(
        params, data, cfg.fine_tune_backbone.as_config(cfg.loss), seed=seed + 1,
        train_mode=True, weight_decay=cfg.weight_decay, anchor=pre,
    )
    return params, log1.losses + log2.losses


def run_phase1(
    universe: TaskUniverse, descriptor: ArchitectureDescriptor, cfg: Phase1Config, seed: int = 0
) -> tuple[ModelParams, dict[str, ModelParams]]:
    """Base model plus fine-tuned models keyed by task id (``db0``, ``db1``, ...)."""
    if descriptor.input_dim != universe.dim:
        raise ContractError(f"architecture input_dim {descriptor.input_dim} != universe dim {universe.dim}")
    pre = pretrain(universe, descriptor, cfg, seed)
    models = {}
    for i, data in enumerate(training_sets(universe, cfg)):
        ft, _ = finetune_database(pre, data, cfg, seed=seed * 1000 + 10 * (i + 1))
        models[database_task_id(i)] = ft
        log.info("fine-tuned %s", database_task_id(i))
    return pre, models
