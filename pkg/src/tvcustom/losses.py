"""Pairwise Bradley-Terry rank loss and the MSE alternative.

Both return ``(loss, grad)`` where ``grad`` is the derivative of the scalar
loss with respect to the predictions that went in.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractError


class PairBatch(NamedTuple):
    """Index pairs into a batch; ``hi[k]`` has a strictly larger target than ``lo[k]``."""

    hi: np.ndarray
    lo: np.ndarray

    def __len__(self) -> int:
        return len(self.hi)


def make_pairs(y: np.ndarray) -> PairBatch:
    """All ordered pairs with strictly distinct targets; ties are skipped."""
    y = np.asarray(y, dtype=np.float64)
    hi, lo = np.nonzero(y[:, None] > y[None, :])
    return PairBatch(hi, lo)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def pair_rank_loss(y_hi: np.ndarray, y_lo: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean of ``-log(e^hi / (e^hi + e^lo))`` over paired predictions.

    Returns the loss and its gradients with respect to ``y_hi`` and ``y_lo``.
    """
    y_hi = np.asarray(y_hi, dtype=np.float64)
    y_lo = np.asarray(y_lo, dtype=np.float64)
    if y_hi.shape != y_lo.shape or y_hi.ndim != 1:
        raise ContractError(f"pair arrays must be 1-d and equal length: {y_hi.shape} vs {y_lo.shape}")
    if y_hi.size == 0:
        raise ContractError("rank loss needs at least one pair")
    diff = y_hi - y_lo
    loss = float(np.mean(_softplus(-diff)))
    # d softplus(-d)/dd = -sigmoid(-d)
    w = -np.exp(-_softplus(diff)) / diff.size
    return loss, w, -w


def rank_loss(pred: np.ndarray, pairs: PairBatch) -> tuple[float, np.ndarray]:
    """Rank loss over the ``pairs`` of a prediction batch, with gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    loss, g_hi, g_lo = pair_rank_loss(pred[pairs.hi], pred[pairs.lo])
    n = pred.size
    grad = np.bincount(pairs.hi, g_hi, minlength=n) + np.bincount(pairs.lo, g_lo, minlength=n)
    return loss, grad


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ContractError("mse needs at least one sample")
    r = pred - target
    return float(np.mean(r * r)), 2.0 * r / r.size
