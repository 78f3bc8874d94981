"""Rank and linear correlation metrics.

A constant argument has zero variance, which leaves both correlations
undefined.  They are reported as 0.0 so that aggregates stay computable;
pass ``return_degenerate=True`` to also get the flag.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError


def fractional_ranks(a: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average of the positions they span."""
    a = np.asarray(a, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_a[1:] != sorted_a[:-1]])
    ends = np.r_[starts[1:], a.size]
    avg = (starts + ends + 1) / 2.0  # mean of positions start+1 .. end
    ranks = np.empty(a.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _check_pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ContractError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size < 2:
        raise ContractError("correlation needs at least 2 samples")
    return y, y_hat


def _pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    da = a - a.mean()
    db = b - b.mean()
    saa = float(da @ da)
    sbb = float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        return 0.0, True
    r = float(da @ db) / np.sqrt(saa * sbb)
    return float(np.clip(r, -1.0, 1.0)), False


def srocc(y, y_hat, return_degenerate: bool = False):
    """Spearman rank-order correlation.

    Without ties this is ``1 - 6 sum(d^2) / (N (N^2 - 1))`` on the rank
    differences; with ties it is the Pearson correlation of average ranks.
    """
    y, y_hat = _check_pair(y, y_hat)
    r, r_hat = fractional_ranks(y), fractional_ranks(y_hat)
    n = y.size
    has_ties = np.unique(y).size < n or np.unique(y_hat).size < n
    if has_ties:
        value, degenerate = _pearson(r, r_hat)
    else:
        d = r - r_hat
        value, degenerate = 1.0 - 6.0 * float(d @ d) / (n * (n * n - 1.0)), False
    return (value, degenerate) if return_degenerate else value


def plcc(y, y_hat, return_degenerate: bool = False):
    """Pearson linear correlation coefficient."""
    y, y_hat = _check_pair(y, y_hat)
    value, degenerate = _pearson(y, y_hat)
    return (value, degenerate) if return_degenerate else value
