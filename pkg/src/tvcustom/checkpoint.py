"""Versioned binary container for parameters, task vectors and coefficients.

Layout (all integers little-endian)::

    b"TVCK"  u16 format version  u32 record count
    per record:  u32 header length  header (UTF-8 JSON)  float64 payload

The header carries the record kind (``params``, ``delta`` or
``coefficients``), the architecture descriptor, the layer count, the shape
of every payload array and, for deltas and coefficients, the task ids.
Payload arrays are stored in layer order, weight before bias, as ``<f8``.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import ContractError
from .nn import ArchitectureDescriptor, Block, ModelParams
from .personalize import CoefficientMatrix
from .task_vectors import TaskVector

MAGIC = b"TVCK"
FORMAT_VERSION = 1
KINDS = ("params", "delta", "coefficients")


class CheckpointError(ContractError):
    """Malformed, truncated or incompatible checkpoint data."""


Record = ModelParams | TaskVector | CoefficientMatrix


def _encode(rec: Record) -> tuple[dict, list[np.ndarray]]:
    if isinstance(rec, ModelParams):
        arrays = rec.arrays()
        head = {"kind": "params", "descriptor": rec.descriptor.to_dict(), "layer_count": rec.num_layers}
    elif isinstance(rec, TaskVector):
        arrays = [a for blk in rec.layers for a in blk]
        head = {
            "kind": "delta",
            "descriptor": rec.descriptor.to_dict(),
            "layer_count": rec.num_layers,
            "task_id": rec.task_id,
            "provenance": list(rec.provenance),
        }
    elif isinstance(rec, CoefficientMatrix):
        arrays = [rec.values]
        head = {"kind": "coefficients", "layer_count": rec.layer_count, "task_ids": list(rec.task_ids)}
    else:
        raise ContractError(f"cannot serialise {type(rec).__name__}")
    head["shapes"] = [list(a.shape) for a in arrays]
    return head, arrays


def _decode(head: dict, arrays: list[np.ndarray]) -> Record:
    kind = head.get("kind")
    if kind == "coefficients":
        values = arrays[0]
        if values.shape[1] != head["layer_count"]:
            raise CheckpointError("coefficient layer count disagrees with its shape")
        return CoefficientMatrix(values, tuple(head["task_ids"]))
    if kind not in KINDS:
        raise CheckpointError(f"unknown record kind {kind!r}")
    desc = ArchitectureDescriptor.from_dict(head["descriptor"])
    if head["layer_count"] != desc.num_layers or len(arrays) != 2 * desc.num_layers:
        raise CheckpointError("layer count disagrees with the descriptor")
    blocks = [Block(arrays[2 * i], arrays[2 * i + 1]) for i in range(desc.num_layers)]
    for (ws, bs), blk in zip(desc.layer_shapes, blocks):
        if blk.weight.shape != ws or blk.bias.shape != bs:
            raise CheckpointError(f"block shape {blk.weight.shape} does not match descriptor {ws}")
    if kind == "params":
        return ModelParams(desc, blocks)
    return TaskVector(head["task_id"], desc, tuple(blocks), tuple(head.get("provenance", ("", ""))))


def write(stream: BinaryIO, records: Sequence[Record]) -> None:
    stream.write(MAGIC + struct.pack("<HI", FORMAT_VERSION, len(records)))
    for rec in records:
        head, arrays = _encode(rec)
        raw = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
        stream.write(struct.pack("<I", len(raw)) + raw)
        for a in arrays:
            stream.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _take(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def read(stream: BinaryIO) -> list[Record]:
    if _take(stream, 4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<HI", _take(stream, 6))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    out = []
    for _ in range(count):
        (hlen,) = struct.unpack("<I", _take(stream, 4))
        try:
            head = json.loads(_take(stream, hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable record header: {exc}") from None
        try:
            arrays = []
            for shape in head["shapes"]:
                n = int(np.prod(shape, dtype=np.int64))
                a = np.frombuffer(_take(stream, 8 * n), dtype="<f8").astype(np.float64).reshape(shape)
                arrays.append(a)
            out.append(_decode(head, arrays))
        except (KeyError, TypeError, IndexError) as exc:
            raise CheckpointError(f"malformed record header: {exc!r}") from None
    if stream.read(1):
        raise CheckpointError("trailing bytes after the last record")
    return out


def dumps(records: Sequence[Record]) -> bytes:
    buf = io.BytesIO()
    write(buf, records)
    return buf.getvalue()


def loads(data: bytes) -> list[Record]:
    return read(io.BytesIO(data))


def save(path: str | Path, records: Record | Sequence[Record]) -> None:
    recs = [records] if isinstance(records, (ModelParams, TaskVector, CoefficientMatrix)) else list(records)
    with open(path, "wb") as fh:
        write(fh, recs)


def load(path: str | Path) -> list[Record]:
    with open(path, "rb") as fh:
        return read(fh)


def load_params(path: str | Path) -> ModelParams:
    recs = load(path)
    if len(recs) != 1 or not isinstance(recs[0], ModelParams):
        raise CheckpointError(f"{path}: expected a single params record")
    return recs[0]


def save_archive(path: str | Path, tvs: Iterable[TaskVector]) -> None:
    tvs = list(tvs)
    _check_unique([tv.task_id for tv in tvs])
    save(path, tvs)


def load_archive(path: str | Path) -> dict[str, TaskVector]:
    """Task vectors keyed by task id; a repeated id is an error."""
    recs = load(path)
    if not all(isinstance(r, TaskVector) for r in recs):
        raise CheckpointError(f"{path}: archive may only hold delta records")
    _check_unique([r.task_id for r in recs])
    return {r.task_id: r for r in recs}


def _check_unique(ids: Sequence[str]) -> None:
    seen = set()
    for t in ids:
        if t in seen:
            raise CheckpointError(f"duplicate task id {t!r}")
        seen.add(t)
