"""Score-regression network with hand-written reverse-mode gradients.

The architecture is a plain MLP backbone followed by a two-layer head whose
10 sigmoid outputs are normalised into a distribution and dotted with a
score template, so every prediction lies inside the template range.

Parameters are stored as an ordered list of blocks, one block per linear
layer (weight and bias together).  Block order is the layer index used by
task vectors and merge coefficients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError, TraceError

DEFAULT_TEMPLATE = tuple(float(k) for k in range(1, 11))
ACTIVATIONS = ("gelu",)

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ArchitectureDescriptor:
    input_dim: int = 16
    hidden_dims: tuple[int, ...] = (64,)
    head_hidden_dim: int = 64  # 0 drops the head hidden layer
    template: tuple[float, ...] = DEFAULT_TEMPLATE
    activation: str = "gelu"
    dropout_rate: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "template", tuple(float(t) for t in self.template))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims) or self.head_hidden_dim < 0:
            raise ContractError(f"layer widths must be positive: {self}")
        if len(self.template) != 10:
            raise ContractError(f"template must have 10 entries, got {len(self.template)}")
        if any(b <= a for a, b in zip(self.template, self.template[1:])):
            raise ContractError("template must be strictly increasing")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def widths(self) -> tuple[int, ...]:
        head = (self.head_hidden_dim,) if self.head_hidden_dim else ()
        return (self.input_dim, *self.hidden_dims, *head, 10)

    @property
    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        w = self.widths
        return [((w[i + 1], w[i]), (w[i + 1],)) for i in range(len(w) - 1)]

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def head_layers(self) -> tuple[int, ...]:
        """Indices of the blocks that form the regression head."""
        n_head = 2 if self.head_hidden_dim else 1
        return tuple(range(self.num_layers - n_head, self.num_layers))

    @property
    def dropout_layer(self) -> int | None:
        """Index of the block whose activation output passes through dropout."""
        return self.num_layers - 2 if self.head_hidden_dim else None

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "head_hidden_dim": self.head_hidden_dim,
            "template": list(self.template),
            "activation": self.activation,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureDescriptor":
        unknown = set(d) - {"input_dim", "hidden_dims", "head_hidden_dim", "template", "activation", "dropout_rate"}
        if unknown:
            raise ContractError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class Block(NamedTuple):
    weight: np.ndarray
    bias: np.ndarray


def _check_congruent(a: Sequence[Block], b: Sequence[Block], what: str = "blocks") -> None:
    if len(a) != len(b):
        raise ContractError(f"{what}: layer count {len(a)} != {len(b)}")
    for idx, (x, y) in enumerate(zip(a, b)):
        if x.weight.shape != y.weight.shape or x.bias.shape != y.bias.shape:
            raise ContractError(
                f"{what}: layer {idx} shape mismatch "
                f"{x.weight.shape}/{x.bias.shape} vs {y.weight.shape}/{y.bias.shape}"
            )


@dataclass
class ModelParams:
    descriptor: ArchitectureDescriptor
    layers: list[Block]

    def __post_init__(self):
        expected = self.descriptor.layer_shapes
        if len(self.layers) != len(expected):
            raise ContractError(f"descriptor implies {len(expected)} layers, got {len(self.layers)}")
        for idx, (blk, (ws, bs)) in enumerate(zip(self.layers, expected)):
            if blk.weight.shape != ws or blk.bias.shape != bs:
                raise ContractError(
                    f"layer {idx}: expected {ws}/{bs}, got {blk.weight.shape}/{blk.bias.shape}"
                )

    @classmethod
    def init(cls, descriptor: ArchitectureDescriptor, rng: np.random.Generator) -> "ModelParams":
        layers = []
        for (out_dim, in_dim), _ in descriptor.layer_shapes:
            w = rng.normal(0.0, math.sqrt(2.0 / (in_dim + out_dim)), size=(out_dim, in_dim))
            layers.append(Block(w, np.zeros(out_dim)))
        return cls(descriptor, layers)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def total_params(self) -> int:
        return sum(b.weight.size + b.bias.size for b in self.layers)

    def copy(self) -> "ModelParams":
        return ModelParams(self.descriptor, [Block(b.weight.copy(), b.bias.copy()) for b in self.layers])

    def arrays(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        return [a for blk in self.layers for a in blk]

    @classmethod
    def from_arrays(cls, descriptor: ArchitectureDescriptor, arrays: Sequence[np.ndarray]) -> "ModelParams":
        it = iter(arrays)
        return cls(descriptor, [Block(w, b) for w, b in zip(it, it)])

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact equality of descriptor and every parameter."""
        return self.descriptor == other.descriptor and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    def check_compatible(self, other: "ModelParams") -> None:
        if self.descriptor != other.descriptor:
            raise ContractError(f"descriptor mismatch: {self.descriptor} vs {other.descriptor}")
        _check_congruent(self.layers, other.layers, "params")


def _gelu(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GELU (tanh form) and its derivative."""
    z2 = z * z
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z2))
    half = 0.5 * (1.0 + t)
    out = z * half
    grad = half + 0.5 * z * (1.0 - t * t) * (_GELU_C * (1.0 + 3 * 0.044715 * z2))
    return out, grad


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any z
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Trace:
    """Intermediates recorded by :func:`forward`, consumed by :func:`backward`."""

    params: ModelParams
    x: np.ndarray
    scores: np.ndarray
    inputs: list[np.ndarray] = field(repr=False)  # input activation of each block
    act_grads: list[np.ndarray] = field(repr=False)  # activation derivative (times mask) per hidden block
    sig: np.ndarray = field(repr=False)
    sig_sum: np.ndarray = field(repr=False)
    used: bool = False


def forward(
    params: ModelParams,
    x: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Trace:
    """Run the network on ``x`` of shape ``(batch, input_dim)``.

    Dropout is applied only when ``train`` is set, using ``rng``.
    """
    desc = params.descriptor
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != desc.input_dim:
        raise ContractError(f"expected input shape (batch, {desc.input_dim}), got {x.shape}")
    if train and desc.dropout_rate > 0 and rng is None:
        raise ContractError("train mode with dropout needs an rng")

    inputs, act_grads = [], []
    a = x
    last = params.num_layers - 1
    for idx, (w, b) in enumerate(params.layers):
        inputs.append(a)
        z = a @ w.T + b
        if idx == last:
            break
        a, g = _gelu(z)
        if train and idx == desc.dropout_layer and desc.dropout_rate > 0:
            keep = 1.0 - desc.dropout_rate
            mask = (rng.random(a.shape) < keep) / keep
            a = a * mask
            g = g * mask
        act_grads.append(g)

    sig = _sigmoid(z)
    sig_sum = sig.sum(axis=1)
    scores = (sig @ np.asarray(desc.template)) / sig_sum
    return Trace(params, x, scores, inputs, act_grads, sig, sig_sum)


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Eval-mode scores."""
    return forward(params, x).scores


def backward(trace: Trace, grad_scores: np.ndarray) -> list[Block]:
    """Gradient of a loss w.r.t. every block, given ``dL/dscores``."""
    if trace is None or not isinstance(trace, Trace):
        raise TraceError("backward needs the trace returned by forward")
    if trace.used:
        raise TraceError("trace already consumed by a previous backward call")
    g = np.asarray(grad_scores, dtype=np.float64)
    if g.shape != trace.scores.shape:
        raise ContractError(f"grad shape {g.shape} does not match scores {trace.scores.shape}")
    trace.used = True

    params = trace.params
    template = np.asarray(params.descriptor.template)
    # d score / d sig_k = (t_k - score) / sum(sig)
    d_sig = g[:, None] * (template[None, :] - trace.scores[:, None]) / trace.sig_sum[:, None]
    delta = d_sig * trace.sig * (1.0 - trace.sig)

    grads: list[Block] = [None] * params.num_layers  # type: ignore[list-item]
    for idx in range(params.num_layers - 1, -1, -1):
        a_in = trace.inputs[idx]
        grads[idx] = Block(delta.T @ a_in, delta.sum(axis=0))
        if idx == 0:
            break
        delta = (delta @ params.layers[idx].weight) * trace.act_grads[idx - 1]
    return grads


def cosine_lr(t: int, total_steps: int, start_lr: float, end_lr: float) -> float:
    """Cosine-annealed learning rate at step ``t`` of ``total_steps``."""
    if t >= total_steps:
        return float(end_lr)
    if t <= 0:
        return float(start_lr)
    return end_lr + 0.5 * (start_lr - end_lr) * (1.0 + math.cos(math.pi * t / total_steps))


class AdamW:
    """AdamW with decoupled weight decay on a cosine schedule.

    Step ``t`` (0-based) uses ``cosine_lr(t)``; after the final step
    :attr:`lr` reports ``end_lr``.
    """

    def __init__(
        self,
        shapes: Sequence[tuple[int, ...]],
        total_steps: int,
        start_lr: float,
        end_lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if total_steps < 0:
            raise ContractError("total_steps must be non-negative")
        self.shapes = [tuple(s) for s in shapes]
        self.m = [np.zeros(s) for s in self.shapes]
        self.v = [np.zeros(s) for s in self.shapes]
        self.step_count = 0
        self.total_steps = total_steps
        self.start_lr = start_lr
        self.end_lr = end_lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps

    @property
    def lr(self) -> float:
        return cosine_lr(self.step_count, self.total_steps, self.start_lr, self.end_lr)

    def step(self, values: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Return updated copies of ``values``; inputs are left untouched."""
        if self.step_count >= self.total_steps:
            raise ContractError(f"optimizer already ran its {self.total_steps} steps")
        if len(values) != len(self.shapes) or len(grads) != len(self.shapes):
            raise ContractError("number of values/grads does not match optimizer state")
        for v, g, s in zip(values, grads, self.shapes):
            if np.shape(v) != s or np.shape(g) != s:
                raise ContractError(f"shape mismatch: state {s}, value {np.shape(v)}, grad {np.shape(g)}")

        lr = self.lr
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        out = []
        for i, (p, g) in enumerate(zip(values, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            p_new = p * (1.0 - lr * self.weight_decay) if self.weight_decay else np.array(p, dtype=np.float64)
            p_new = p_new - lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            out.append(p_new)
        return out
