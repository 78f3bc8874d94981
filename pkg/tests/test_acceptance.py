"""Acceptance criteria, one test each.

Criteria 5-11 share one seeded run of the default configuration: 20 users,
10 trials, K in {10, 100}.  Each test records a one-line verdict that the
terminal summary prints after the run (also printed inline with ``-s``).
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from tvcustom import nn
from tvcustom.config import ExperimentConfig, ProtocolConfig
from tvcustom.losses import pair_rank_loss
from tvcustom.metrics import srocc
from tvcustom.nn import ArchitectureDescriptor, ModelParams
from tvcustom.personalize import CoefficientMatrix, adaptive_init, coefficient_gradient, merge
from tvcustom.phase1 import run_phase1
from tvcustom.protocol import Arm, Phase1Artifacts, run_protocol
from tvcustom.synth import TaskUniverse, make_users
from tvcustom.task_vectors import extract
from tvcustom.data import SampleSet

N_TASKS = 6


def arm(init="adaptive", loss="rank", layers="layerwise", n=N_TASKS) -> Arm:
    return Arm("coefficients", init, loss, layers, n)


ADAPTIVE, UNIFORM, BEST_FIT = arm(), arm("uniform"), arm("best_fit")
AGNOSTIC, MSE = arm(layers="agnostic"), arm(loss="mse")
BFFT = Arm("best_fit_ft", "best_fit", "rank", "full", N_TASKS)
SWEEP = [arm(n=n) for n in range(1, N_TASKS)]


class Suite:
    """Lazily runs the seeded protocol; every (K, arm) is computed once."""

    def __init__(self):
        self.cfg = ExperimentConfig()
        self.universe = TaskUniverse.create(self.cfg.universe)
        t0 = time.perf_counter()
        pre, models = run_phase1(self.universe, self.cfg.architecture, self.cfg.phase1, seed=self.cfg.seed)
        self.phase1_seconds = time.perf_counter() - t0
        self.art = Phase1Artifacts(pre, [extract(pre, m, k) for k, m in models.items()])
        self.users = make_users(self.universe, self.cfg.population, seed=self.cfg.seed)
        self.reports: dict[tuple[int, tuple[Arm, ...]], object] = {}
        self.seconds: dict[tuple[int, tuple[Arm, ...]], float] = {}

    def run(self, shots: int, arms: list[Arm]):
        key = (shots, tuple(arms))
        if key not in self.reports:
            cfg = self.cfg.replace(protocol=ProtocolConfig(shots=(shots,), trials=10, curve_every=50))
            t0 = time.perf_counter()
            self.reports[key] = run_protocol(self.universe, self.users, cfg, self.art, arms=arms)
            self.seconds[key] = time.perf_counter() - t0
        return self.reports[key]

    def agg(self, shots: int, arms: list[Arm], which: Arm) -> dict:
        return self.run(shots, arms).aggregate_for(which.name, shots)


INIT_ARMS = [ADAPTIVE, UNIFORM, BEST_FIT]
K10_ARMS = [AGNOSTIC, MSE, BFFT, *SWEEP]
K100_ARMS = [ADAPTIVE, *SWEEP]


@pytest.fixture(scope="module")
def suite() -> Suite:
    return Suite()


def _offset(pre: ModelParams, rng: np.random.Generator, scale: float = 0.3) -> ModelParams:
    """A fine-tuned stand-in: the base plus a random offset per entry."""
    return ModelParams.from_arrays(pre.descriptor, [a + scale * rng.standard_normal(a.shape) for a in pre.arrays()])


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def test_c01_gradient_oracle(record_criterion):
    t0 = time.perf_counter()
    desc = ArchitectureDescriptor(input_dim=8, hidden_dims=(), head_hidden_dim=8)
    rng = np.random.default_rng(5)
    pre = ModelParams.init(desc, rng)
    tvs = [extract(pre, _offset(pre, rng), f"t{i}") for i in range(2)]
    batch = SampleSet(rng.standard_normal((8, 8)), rng.uniform(1, 10, 8))
    coeffs = CoefficientMatrix(rng.uniform(-0.5, 1.0, (2, desc.num_layers)), ("t0", "t1"))
    _, grad = coefficient_gradient(pre, tvs, coeffs, batch)
    fd = np.zeros_like(grad)
    h = 1e-5
    for idx in np.ndindex(grad.shape):
        step = h * max(1.0, abs(coeffs.values[idx]))
        hi, lo = coeffs.copy(), coeffs.copy()
        hi.values[idx] += step
        lo.values[idx] -= step
        fd[idx] = (coefficient_gradient(pre, tvs, hi, batch)[0] - coefficient_gradient(pre, tvs, lo, batch)[0]) / (
            2 * step
        )
    err = _rel_err(grad, fd)
    frac = float(np.mean(err < 1e-4))
    secs = time.perf_counter() - t0
    ok = frac >= 0.99 and secs < 10
    record_criterion(1, ok, f"{frac:.0%} of {err.size} entries within 1e-4 (max rel err {err.max():.2e}), {secs:.2f}s")
    assert ok


def test_c02_merge_identities(record_criterion):
    t0 = time.perf_counter()
    desc = ArchitectureDescriptor()
    rng = np.random.default_rng(2)
    pre = ModelParams.init(desc, rng)
    ft = _offset(pre, rng)
    tvs = [extract(pre, ft, "a"), extract(pre, _offset(pre, rng), "b")]
    zero = merge(pre, tvs, CoefficientMatrix(np.zeros((2, desc.num_layers)), ("a", "b")))
    one = merge(pre, tvs[:1], CoefficientMatrix(np.ones((1, desc.num_layers)), ("a",)))
    secs = time.perf_counter() - t0
    ok = zero.equals(pre) and one.equals(ft) and secs < 1
    record_criterion(2, ok, f"alpha=0 -> pre: {zero.equals(pre)}, alpha=1 -> ft: {one.equals(ft)}, {secs:.3f}s")
    assert ok


def test_c03_closed_forms(record_criterion):
    eq, _, _ = pair_rank_loss(np.array([0.7]), np.array([0.7]))
    one_zero, _, _ = pair_rank_loss(np.array([1.0]), np.array([0.0]))
    rho = srocc(np.array([1, 2, 3, 4, 5.0]), np.array([1, 2, 3, 5, 4.0]))
    ok = abs(eq - math.log(2)) <= 1e-12 and abs(one_zero - math.log1p(math.exp(-1))) <= 1e-12 and rho == 0.9
    record_criterion(3, ok, f"ln2 err {abs(eq - math.log(2)):.1e}, ln(1+e^-1) err "
                     f"{abs(one_zero - math.log1p(math.exp(-1))):.1e}, srocc {rho!r}")
    assert ok


def test_c04_init_limits(record_criterion):
    prof = np.array([0.3, 0.9, 0.1, 0.9])
    uni = adaptive_init(prof, math.inf, 5).values
    hot = adaptive_init(prof, 0.0, 5).values
    soft = adaptive_init([0.5, 0.0], 1.0, 3).values
    want_hot = np.zeros((4, 5))
    want_hot[1] = 1.0
    ok = (
        np.array_equal(uni, np.full((4, 5), 0.25))
        and np.array_equal(hot, want_hot)
        and np.all(np.abs(soft[:, 0] - [0.6225, 0.3775]) <= 1e-4)
    )
    record_criterion(4, ok, f"T=inf uniform, T=0 one-hot at index 1, T=1 -> {soft[:, 0].round(4).tolist()}")
    assert ok


def test_c05_init_ordering(suite, record_criterion):
    a = suite.agg(10, INIT_ARMS, ADAPTIVE)["mean"]
    u = suite.agg(10, INIT_ARMS, UNIFORM)["mean"]
    b = suite.agg(10, INIT_ARMS, BEST_FIT)["mean"]
    secs = suite.phase1_seconds + suite.seconds[(10, tuple(INIT_ARMS))]
    ok = a - u >= 0.01 and a - b >= 0.01 and secs < 15 * 60
    record_criterion(5, ok, f"adaptive {a:.4f}, uniform {u:.4f} (margin {a - u:+.4f}), "
                     f"best-fit {b:.4f} (margin {a - b:+.4f}), need >= +0.01 each; {secs:.0f}s")
    assert ok


def test_c06_coefficients_beat_best_fit_finetune(suite, record_criterion):
    a = suite.agg(10, INIT_ARMS, ADAPTIVE)["mean"]
    f = suite.agg(10, K10_ARMS, BFFT)["mean"]
    ok = a - f >= 0.05
    record_criterion(6, ok, f"coefficients {a:.4f}, best-fit fine-tune {f:.4f}, margin {a - f:+.4f} (need >= +0.05)")
    assert ok


def test_c07_layerwise_vs_agnostic(suite, record_criterion):
    a = suite.agg(10, INIT_ARMS, ADAPTIVE)["mean"]
    g = suite.agg(10, K10_ARMS, AGNOSTIC)["mean"]
    ok = a - g >= 0
    record_criterion(7, ok, f"layer-wise {a:.4f}, layer-agnostic {g:.4f}, margin {a - g:+.4f}")
    assert ok


def test_c08_scaling_trend(suite, record_criterion):
    rhos = {}
    for shots, arms, full in ((10, K10_ARMS, INIT_ARMS), (100, K100_ARMS, K100_ARMS)):
        means = [suite.agg(shots, arms, a)["mean"] for a in SWEEP] + [suite.agg(shots, full, ADAPTIVE)["mean"]]
        rhos[shots] = (spearmanr(np.arange(1, N_TASKS + 1), means)[0], means)
    ok = all(r > 0 for r, _ in rhos.values())
    detail = "; ".join(f"K={k}: rho {r:+.3f} means {np.round(m, 3).tolist()}" for k, (r, m) in rhos.items())
    record_criterion(8, ok, detail)
    assert ok


def test_c09_personalization_gain(suite, record_criterion):
    rep = suite.run(100, K100_ARMS)
    by_user: dict[int, list[tuple[float, float]]] = {}
    for r in rep.records:
        if r["arm"] == ADAPTIVE.name:
            by_user.setdefault(r["user"], []).append((r["srocc"], r["zero_shot_mean"]))
    wins = [np.mean([p for p, _ in v]) > np.mean([z for _, z in v]) for v in by_user.values()]
    frac = float(np.mean(wins))
    ok = frac >= 0.9
    record_criterion(9, ok, f"{sum(wins)}/{len(wins)} users ({frac:.0%}) beat the mean zero-shot SROCC at K=100")
    assert ok


def test_c10_protocol_fidelity(suite, record_criterion):
    rep = suite.run(10, INIT_ARMS)
    counts = {u["user"]: len(u["values"]) for u in rep.aggregate_for(ADAPTIVE.name, 10)["users"]}
    agg = rep.aggregate_for(ADAPTIVE.name, 10)
    has_stats = all(k in agg for k in ("mean", "std"))
    # rerun a small slice twice from scratch and compare the serialised report bytes
    cfg = suite.cfg.replace(protocol=ProtocolConfig(shots=(10,), trials=10, curve_every=50))
    users = suite.users[:3]
    first = run_protocol(suite.universe, users, cfg, suite.art, arms=[ADAPTIVE]).dumps()
    second = run_protocol(suite.universe, users, cfg, suite.art, arms=[ADAPTIVE]).dumps()
    ok = set(counts.values()) == {10} and len(counts) == 20 and has_stats and first == second
    record_criterion(10, ok, f"{len(counts)} users x {sorted(set(counts.values()))} trials, mean/std reported, "
                     f"rerun byte-identical: {first == second}")
    assert ok


def test_c11_rank_vs_mse(suite, record_criterion):
    def mean_curve(rep, a):
        acc: dict[int, list[float]] = {}
        for r in rep.records:
            if r["arm"] == a.name:
                for s, v in r["curve"]:
                    acc.setdefault(s, []).append(v)
        return {s: float(np.mean(v)) for s, v in sorted(acc.items())}

    rank = mean_curve(suite.run(10, INIT_ARMS), ADAPTIVE)
    mse = mean_curve(suite.run(10, K10_ARMS), MSE)
    steps = max(rank)
    target = mse[steps]
    reached = [s for s, v in rank.items() if v >= target]
    first = reached[0] if reached else None
    ok = (first is not None and first <= steps // 2) or rank[steps] > target
    record_criterion(11, ok, f"MSE final {target:.4f}, rank final {rank[steps]:.4f}, "
                     f"rank first reaches it at step {first} (half = {steps // 2})")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
