from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class SampleSet:
    """Feature rows with one scalar score each."""

    features: np.ndarray  # (N, d)
    scores: np.ndarray  # (N,)

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        s = np.asarray(self.scores, dtype=np.float64)
        if f.ndim != 2 or s.ndim != 1 or f.shape[0] != s.shape[0]:
            raise ContractError(f"features {f.shape} and scores {s.shape} do not line up")
        if not np.all(np.isfinite(s)):
            raise ContractError("scores must be finite")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.features[idx], self.scores[idx])

    def has_valid_pair(self) -> bool:
        return len(self) >= 2 and np.ptp(self.scores) > 0

    def equals(self, other: "SampleSet") -> bool:
        return np.array_equal(self.features, other.features) and np.array_equal(self.scores, other.scores)

    @staticmethod
    def concat(sets: list["SampleSet"]) -> "SampleSet":
        return SampleSet(np.vstack([s.features for s in sets]), np.concatenate([s.scores for s in sets]))

    def to_csv(self, path: str | Path) -> None:
        """Columnar text: ``id, x0..x{d-1}, score``; floats written with ``repr`` so they round-trip."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + [f"x{j}" for j in range(self.dim)] + ["score"])
            for i, (row, s) in enumerate(zip(self.features, self.scores)):
                w.writerow([i] + [repr(float(v)) for v in row] + [repr(float(s))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SampleSet":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[0] != "id" or header[-1] != "score":
            raise ContractError(f"{path}: unexpected header {header[:2]}...")
        data = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), -1)
        return cls(data[:, :-1], data[:, -1])
