"""Personalised models as coefficient-weighted sums of layer-wise task vectors.

For layer ``l`` the personalised weights are::

    theta_p[l] = theta_pre[l] + sum_i alpha[i, l] * tau_i[l]

Only the ``n x L`` coefficients ``alpha`` are trained.  Because the merge is
linear in ``alpha``, the coefficient gradient is the inner product of the
ordinary weight gradient of layer ``l`` with ``tau_i[l]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import SampleSet
from .errors import ContractError, DegenerateInputError, NumericalError, UnpersonalizableError
from .losses import make_pairs, mse_loss, rank_loss
from .metrics import srocc
from .nn import Block, ModelParams
from .task_vectors import TaskVector, exact_delta

LOSS_KINDS = ("rank", "mse")


@dataclass
class CoefficientMatrix:
    values: np.ndarray  # (n, L)
    task_ids: tuple[str, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.task_ids = tuple(self.task_ids)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.task_ids):
            raise ContractError(f"coefficient shape {self.values.shape} does not match {len(self.task_ids)} tasks")

    @property
    def n_tasks(self) -> int:
        return self.values.shape[0]

    @property
    def layer_count(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "CoefficientMatrix":
        return CoefficientMatrix(self.values.copy(), self.task_ids)

    def layer_mean(self) -> np.ndarray:
        return self.values.mean(axis=1)

    def to_dict(self) -> dict[str, list[float]]:
        return {tid: [float(v) for v in row] for tid, row in zip(self.task_ids, self.values)}

    def dumps(self) -> str:
        """Human-readable JSON dump: ``task_id -> per-layer values``."""
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "CoefficientMatrix":
        d = json.loads(text)
        return cls(np.array([d[k] for k in d], dtype=np.float64), tuple(d))


@dataclass(frozen=True)
class PersonalizationConfig:
    temperature: float = 1.0  # math.inf -> uniform init, 0.0 -> best-fit init
    start_lr: float = 1.0e-2
    end_lr: float = 1.0e-3
    batch_size: int = 32
    steps: int = 500
    loss: str = "rank"
    shots: int = 10
    weight_decay: float = 0.0  # coefficients
    finetune_weight_decay: float = 0.01  # full fine-tuning baseline

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError("steps must be non-negative")
        if not 0 < self.end_lr <= self.start_lr:
            raise ContractError(f"need 0 < end_lr <= start_lr, got {self.end_lr}, {self.start_lr}")
        if self.batch_size < 2:
            raise ContractError("batch_size must be at least 2")
        if self.shots < 2:
            raise ContractError("shots must be at least 2")
        if self.loss not in LOSS_KINDS:
            raise ContractError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if not self.temperature >= 0:
            raise ContractError(f"temperature must be >= 0, got {self.temperature}")


@dataclass
class TrainingLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    final_lr: float | None = None
    curve: list[tuple[int, float]] = field(default_factory=list)  # (step, held-out srocc)
    selected: int | None = None  # best-fit baseline: chosen model index

    @property
    def steps(self) -> int:
        return len(self.losses)


class _Stack:
    """Task vectors stacked per layer so merge and gradient are one contraction each."""

    def __init__(self, pre: ModelParams, tvs: Sequence[TaskVector]):
        if not tvs:
            raise ContractError("need at least one task vector")
        for tv in tvs:
            if tv.descriptor != pre.descriptor:
                raise ContractError(f"task vector {tv.task_id!r} does not match the pre-trained descriptor")
        self.pre = pre
        self.n = len(tvs)
        # (n, out * in) per layer
        self.weights = [np.stack([tv.layers[l].weight.ravel() for tv in tvs]) for l in range(pre.num_layers)]
        self.biases = [np.stack([tv.layers[l].bias for tv in tvs]) for l in range(pre.num_layers)]

    def merge(self, alpha: np.ndarray) -> ModelParams:
        layers = []
        for l, blk in enumerate(self.pre.layers):
            a = alpha[:, l]
            dw = (a @ self.weights[l]).reshape(blk.weight.shape)
            layers.append(Block(blk.weight + dw, blk.bias + a @ self.biases[l]))
        return ModelParams(self.pre.descriptor, layers)

    def project(self, grads: Sequence[Block]) -> np.ndarray:
        """``<dL/dtheta_l, tau_i[l]>`` for every (i, l)."""
        out = np.empty((self.n, len(grads)))
        for l, g in enumerate(grads):
            out[:, l] = self.weights[l] @ g.weight.ravel() + self.biases[l] @ g.bias
        return out


def _check_coeffs(pre: ModelParams, tvs: Sequence[TaskVector], coeffs: CoefficientMatrix) -> None:
    if coeffs.values.shape != (len(tvs), pre.num_layers):
        raise ContractError(
            f"coefficients {coeffs.values.shape} do not match (n_tasks, layers) = ({len(tvs)}, {pre.num_layers})"
        )


def merge(pre: ModelParams, tvs: Sequence[TaskVector], coeffs: CoefficientMatrix) -> ModelParams:
    """Personalised params for the given coefficients; inputs are not modified."""
    _check_coeffs(pre, tvs, coeffs)
    return _Stack(pre, tvs).merge(coeffs.values)


def zero_shot_srocc_profile(support: SampleSet, ft_models: Sequence[ModelParams]) -> np.ndarray:
    """SROCC of each model's eval-mode predictions against the support scores."""
    if len(support) < 2 or np.ptp(support.scores) == 0:
        raise DegenerateInputError("support scores are constant; SROCC is undefined")
    return np.array([srocc(support.scores, nn.predict(m, support.features)) for m in ft_models])


def adaptive_init(
    profile: Sequence[float],
    temperature: float,
    layer_count: int,
    task_ids: Sequence[str] | None = None,
) -> CoefficientMatrix:
    """Softmax of ``profile / temperature``, repeated for every layer.

    ``temperature=math.inf`` gives the uniform matrix and ``temperature=0``
    the one-hot matrix at the argmax (lowest index wins ties).
    """
    p = np.asarray(profile, dtype=np.float64)
    n = p.size
    if n < 1:
        raise ContractError("profile must be non-empty")
    if temperature < 0 or math.isnan(temperature):
        raise ContractError(f"temperature must be >= 0, got {temperature}")
    if math.isinf(temperature):
        alpha = np.full(n, 1.0 / n)
    elif temperature == 0:
        alpha = np.zeros(n)
        alpha[int(np.argmax(p))] = 1.0
    else:
        z = p / temperature
        e = np.exp(z - z.max())
        alpha = e / e.sum()
    ids = tuple(task_ids) if task_ids is not None else tuple(f"task{i}" for i in range(n))
    return CoefficientMatrix(np.repeat(alpha[:, None], layer_count, axis=1), ids)


def _loss_and_grad(pred: np.ndarray, y: np.ndarray, loss_kind: str) -> tuple[float, np.ndarray]:
    if loss_kind == "mse":
        return mse_loss(pred, y)
    pairs = make_pairs(y)
    if len(pairs) == 0:
        return 0.0, np.zeros_like(pred)
    return rank_loss(pred, pairs)


def coefficient_gradient(
    pre: ModelParams,
    tvs: Sequence[TaskVector],
    coeffs: CoefficientMatrix,
    batch: SampleSet,
    loss: str = "rank",
) -> tuple[float, np.ndarray]:
    """Loss of the merged model on ``batch`` and its gradient w.r.t. every coefficient."""
    _check_coeffs(pre, tvs, coeffs)
    stack = _Stack(pre, tvs)
    return _coef_loss_grad(stack, coeffs.values, batch.features, batch.scores, loss)


def _coef_loss_grad(stack: _Stack, alpha: np.ndarray, x: np.ndarray, y: np.ndarray, loss: str):
    merged = stack.merge(alpha)
    trace = nn.forward(merged, x)
    value, g = _loss_and_grad(trace.scores, y, loss)
    grads = nn.backward(trace, g)
    return value, stack.project(grads)


def _sample_batch(rng: np.random.Generator, k: int, batch_size: int) -> np.ndarray:
    if k < batch_size:
        return rng.integers(0, k, size=batch_size)
    return rng.choice(k, size=batch_size, replace=False)


def _check_support(support: SampleSet) -> None:
    if len(support) < 2 or not support.has_valid_pair():
        raise UnpersonalizableError("support set has no pair of samples with distinct scores")


def select_best_fit(profile: Sequence[float]) -> int:
    return int(np.argmax(np.asarray(profile)))


def train_coefficients(
    pre: ModelParams,
    tvs: Sequence[TaskVector],
    support: SampleSet,
    cfg: PersonalizationConfig,
    seed: int,
    layer_agnostic: bool = False,
    init: CoefficientMatrix | None = None,
    eval_set: SampleSet | None = None,
    eval_every: int = 0,
) -> tuple[CoefficientMatrix, TrainingLog]:
    """Fit the merge coefficients to ``support``; everything else stays frozen.

    With ``layer_agnostic`` one coefficient per task is trained and broadcast
    to all layers.  ``eval_set``/``eval_every`` record a held-out SROCC curve.
    """
    _check_support(support)
    stack = _Stack(pre, tvs)
    task_ids = tuple(tv.task_id for tv in tvs)
    L = pre.num_layers
    if init is None:
        ft_models = [tv.apply_to(pre) for tv in tvs]
        profile = zero_shot_srocc_profile(support, ft_models)
        init = adaptive_init(profile, cfg.temperature, L, task_ids)
    _check_coeffs(pre, tvs, init)

    # trained values: (n, L) or (n, 1)
    alpha = init.values[:, :1].copy() if layer_agnostic else init.values.copy()
    opt = nn.AdamW([alpha.shape], cfg.steps, cfg.start_lr, cfg.end_lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)
    log = TrainingLog()

    def full(a: np.ndarray) -> np.ndarray:
        return np.repeat(a, L, axis=1) if layer_agnostic else a

    def record(step: int) -> None:
        if eval_set is not None and eval_every and step % eval_every == 0:
            pred = nn.predict(stack.merge(full(alpha)), eval_set.features)
            log.curve.append((step, srocc(eval_set.scores, pred)))

    record(0)
    for step in range(cfg.steps):
        idx = _sample_batch(rng, len(support), cfg.batch_size)
        value, grad = _coef_loss_grad(stack, full(alpha), support.features[idx], support.scores[idx], cfg.loss)
        if layer_agnostic:
            grad = grad.sum(axis=1, keepdims=True)
        if not math.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite loss/gradient at step {step}")
        log.lrs.append(opt.lr)
        (alpha,) = opt.step([alpha], [grad])
        log.losses.append(value)
        record(step + 1)
    log.final_lr = opt.lr
    if eval_set is not None and eval_every and (not log.curve or log.curve[-1][0] != cfg.steps):
        pred = nn.predict(stack.merge(full(alpha)), eval_set.features)
        log.curve.append((cfg.steps, srocc(eval_set.scores, pred)))
    return CoefficientMatrix(full(alpha).copy(), task_ids), log


def train_coefficients_layer_agnostic(
    pre: ModelParams,
    tvs: Sequence[TaskVector],
    support: SampleSet,
    cfg: PersonalizationConfig,
    seed: int,
    **kwargs,
) -> tuple[CoefficientMatrix, TrainingLog]:
    return train_coefficients(pre, tvs, support, cfg, seed, layer_agnostic=True, **kwargs)


def finetune_params(
    params: ModelParams,
    support: SampleSet,
    cfg: PersonalizationConfig,
    seed: int,
    trainable: Sequence[int] | None = None,
    train_mode: bool = False,
    weight_decay: float | None = None,
    log: TrainingLog | None = None,
    anchor: ModelParams | None = None,
) -> tuple[ModelParams, TrainingLog]:
    """Gradient-train the blocks in ``trainable`` (default: all) on ``support``.

    With ``anchor`` the optimiser works on the offset from ``anchor`` and the
    model is always materialised as ``anchor + offset``, so the result is
    exactly reachable from ``anchor`` by a single addition per entry.
    """
    rng = np.random.default_rng(seed)
    layers = list(params.layers)
    trainable = list(range(params.num_layers)) if trainable is None else list(trainable)
    wd = cfg.finetune_weight_decay if weight_decay is None else weight_decay
    if anchor is not None:
        anchor.check_compatible(params)
        base = [a for l in trainable for a in anchor.layers[l]]
        values = [exact_delta(b, a) for b, a in zip(base, (a for l in trainable for a in layers[l]))]
    else:
        values = [a for l in trainable for a in layers[l]]
    opt = nn.AdamW(
        [v.shape for v in values], cfg.steps, cfg.start_lr, cfg.end_lr, weight_decay=0.0 if anchor else wd
    )
    log = log if log is not None else TrainingLog()
    current = params
    for step in range(cfg.steps):
        idx = _sample_batch(rng, len(support), cfg.batch_size)
        trace = nn.forward(current, support.features[idx], train=train_mode, rng=rng)
        value, g = _loss_and_grad(trace.scores, support.scores[idx], cfg.loss)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at step {step}")
        grads = nn.backward(trace, g)
        lr = opt.lr
        log.lrs.append(lr)
        new = opt.step(values, [a for l in trainable for a in grads[l]])
        if anchor is not None:
            # decoupled decay acts on the materialised weights, not the offset
            if wd:
                new = [n - lr * wd * (b + v) for n, b, v in zip(new, base, values)]
            values = new
            mats = [b + v for b, v in zip(base, values)]
        else:
            values = mats = new
        for j, l in enumerate(trainable):
            layers[l] = Block(mats[2 * j], mats[2 * j + 1])
        current = ModelParams(params.descriptor, list(layers))
        log.losses.append(value)
    log.final_lr = opt.lr
    return current, log


def best_fit_finetune(
    pre: ModelParams,
    ft_models: Sequence[ModelParams],
    support: SampleSet,
    cfg: PersonalizationConfig,
    seed: int,
) -> tuple[ModelParams, TrainingLog]:
    """Fully fine-tune the single model with the highest zero-shot SROCC on ``support``.

    ``pre`` is accepted for interface symmetry with :func:`train_coefficients`;
    the baseline starts from the selected fine-tuned model.
    """
    _check_support(support)
    for m in ft_models:
        pre.check_compatible(m)
    profile = zero_shot_srocc_profile(support, ft_models)
    best = select_best_fit(profile)
    log = TrainingLog(selected=best)
    tuned, log = finetune_params(ft_models[best], support, cfg, seed, log=log)
    return tuned, log
