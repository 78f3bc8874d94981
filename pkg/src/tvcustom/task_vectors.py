"""Layer-wise task vectors: fine-tuned minus pre-trained weights, per block."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError
from .nn import ArchitectureDescriptor, Block, ModelParams


def params_hash(params: ModelParams) -> str:
    h = hashlib.sha256()
    for a in params.arrays():
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class TaskVector:
    task_id: str
    descriptor: ArchitectureDescriptor
    layers: tuple[Block, ...]
    provenance: tuple[str, str] = field(default=("", ""), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for blk in self.layers:
            blk.weight.flags.writeable = False
            blk.bias.flags.writeable = False

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def _same_shape(self, other: "TaskVector") -> None:
        if self.descriptor != other.descriptor:
            raise ContractError(f"task vectors {self.task_id!r} and {other.task_id!r} have different descriptors")

    def _map(self, fn, task_id: str) -> "TaskVector":
        return TaskVector(task_id, self.descriptor, tuple(Block(fn(b.weight), fn(b.bias)) for b in self.layers))

    def __neg__(self) -> "TaskVector":
        return self._map(np.negative, f"-{self.task_id}")

    def scale(self, c: float) -> "TaskVector":
        return self._map(lambda a: a * c, f"{c}*{self.task_id}")

    def __mul__(self, c: float) -> "TaskVector":
        return self.scale(c)

    __rmul__ = __mul__

    def __add__(self, other: "TaskVector") -> "TaskVector":
        self._same_shape(other)
        layers = tuple(
            Block(a.weight + b.weight, a.bias + b.bias) for a, b in zip(self.layers, other.layers)
        )
        return TaskVector(f"{self.task_id}+{other.task_id}", self.descriptor, layers)

    def __sub__(self, other: "TaskVector") -> "TaskVector":
        return self + (-other)

    def is_zero(self) -> bool:
        return all(not b.weight.any() and not b.bias.any() for b in self.layers)

    def apply_to(self, pre: ModelParams, scale: float = 1.0) -> ModelParams:
        """``pre + scale * tau``, layer by layer."""
        if pre.descriptor != self.descriptor:
            raise ContractError("task vector and params have different descriptors")
        if scale == 1.0:
            layers = [Block(p.weight + t.weight, p.bias + t.bias) for p, t in zip(pre.layers, self.layers)]
        else:
            layers = [
                Block(p.weight + scale * t.weight, p.bias + scale * t.bias) for p, t in zip(pre.layers, self.layers)
            ]
        return ModelParams(pre.descriptor, layers)


def exact_delta(p: np.ndarray, f: np.ndarray) -> np.ndarray:
    """``f - p``, verified to satisfy ``p + delta == f`` bit-for-bit.

    Whenever ``f`` was itself computed as ``p + v`` for some float ``v`` the
    rounded difference reaches it again.  For unrelated arrays an entry of
    ``f`` may lie between the floats reachable from ``p`` by one addition;
    such entries raise instead of silently drifting.
    """
    d = f - p
    miss = (p + d) != f
    if miss.any():
        raise ContractError(f"{int(miss.sum())} entries cannot be reached from the base by one addition")
    return d


def extract(pre: ModelParams, ft: ModelParams, task_id: str = "task", strict: bool = True) -> TaskVector:
    """Per-layer difference ``ft - pre``; ``pre + tau`` rebuilds ``ft`` exactly.

    With ``strict`` (the default) a fine-tune that is not reachable from
    ``pre`` by one addition per entry raises; ``strict=False`` returns the
    plain rounded difference instead.
    """
    if pre.descriptor != ft.descriptor:
        pairs = zip(pre.descriptor.layer_shapes, ft.descriptor.layer_shapes)
        for idx, ((ws, bs), (wf, bf)) in enumerate(pairs):
            if ws != wf or bs != bf:
                raise ContractError(f"descriptor mismatch at layer {idx}: {ws} vs {wf}")
        raise ContractError(f"descriptor mismatch: {pre.descriptor} vs {ft.descriptor}")
    diff = exact_delta if strict else (lambda p, f: f - p)
    layers = tuple(Block(diff(p.weight, f.weight), diff(p.bias, f.bias)) for p, f in zip(pre.layers, ft.layers))
    return TaskVector(task_id, pre.descriptor, layers, (params_hash(pre), params_hash(ft)))


def flatten(tv: TaskVector) -> np.ndarray:
    """Concatenate every block (weight then bias) in layer order, shape ``(1, total)``."""
    return np.concatenate([a.ravel() for blk in tv.layers for a in blk])[None, :]


def cosine_similarity_matrix(tvs: Sequence[TaskVector]) -> np.ndarray:
    if not tvs:
        raise ContractError("need at least one task vector")
    for tv in tvs[1:]:
        tvs[0]._same_shape(tv)
    flat = np.vstack([flatten(tv) for tv in tvs])
    norms = np.linalg.norm(flat, axis=1)
    bad = [tv.task_id for tv, n in zip(tvs, norms) if n == 0.0]
    if bad:
        raise DegenerateInputError(f"zero-norm task vector(s): {bad}")
    unit = flat / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim
