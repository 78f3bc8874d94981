"""Synthetic score-regression "databases" and users with known ground truth.

Each database scores a standard-normal feature vector ``x`` through its own
unit direction: ``score = 1 + 9 * sigmoid(gain * (w_i . x) + offset) + noise``,
clamped to [1, 10].  A user's direction is a blend of a mixture of database
directions and an idiosyncratic direction, squashed the same way.

All generation is a pure function of the configured seeds.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import SampleSet
from .errors import ContractError

log = logging.getLogger(__name__)

SCORE_MIN, SCORE_MAX = 1.0, 10.0

# stream tags keep the seed sequences of different artifacts apart
_DATABASE, _USER_SPEC, _USER_DATA, _UNIVERSE = 1, 2, 3, 4


@dataclass(frozen=True)
class UniverseConfig:
    feature_dim: int = 16
    n_databases: int = 6
    min_angle_deg: float = 60.0
    shared: float = 0.0  # variance share of a direction common to all databases
    noise: float = 0.05  # label noise std as a fraction of the score range
    gain: float = 1.0
    quirks: bool = False  # per-database squash gain/offset
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 1 or self.n_databases < 1:
            raise ContractError("feature_dim and n_databases must be positive")
        if not 0.0 <= self.min_angle_deg <= 90.0:
            raise ContractError("min_angle_deg must lie in [0, 90]")
        if self.noise < 0:
            raise ContractError("noise must be non-negative")
        if not 0.0 <= self.shared < 1.0:
            raise ContractError("shared must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _min_pairwise_angle(w: np.ndarray) -> float:
    if len(w) < 2:
        return 180.0
    cos = np.clip(w @ w.T, -1.0, 1.0)
    iu = np.triu_indices(len(w), 1)
    return float(np.degrees(np.arccos(cos[iu])).min())


@dataclass(frozen=True)
class TaskUniverse:
    config: UniverseConfig
    weights: np.ndarray  # (n_databases, d), unit rows
    gains: np.ndarray  # (n_databases,)
    offsets: np.ndarray  # (n_databases,)

    @classmethod
    def create(cls, config: UniverseConfig = UniverseConfig(), max_tries: int = 10_000) -> "TaskUniverse":
        """Sample unit database directions, rejecting any closer than ``min_angle_deg``.

        Each candidate is ``sqrt(shared) * g + sqrt(1 - shared) * r`` for one
        common unit direction ``g`` and a fresh random unit ``r``.
        """
        rng = np.random.default_rng([config.seed, _UNIVERSE])
        common = _unit(rng.standard_normal(config.feature_dim))
        rows: list[np.ndarray] = []
        cos_max = math.cos(math.radians(config.min_angle_deg))
        tries = 0
        while len(rows) < config.n_databases:
            tries += 1
            if tries > max_tries:
                raise ContractError(
                    f"could not place {config.n_databases} directions {config.min_angle_deg} deg apart "
                    f"in {config.feature_dim} dims"
                )
            own = _unit(rng.standard_normal(config.feature_dim))
            cand = _unit(math.sqrt(config.shared) * common + math.sqrt(1.0 - config.shared) * own)
            if all(float(cand @ r) <= cos_max for r in rows):
                rows.append(cand)
        if config.quirks:
            gains = config.gain * rng.uniform(0.6, 1.6, config.n_databases)
            offsets = rng.uniform(-0.5, 0.5, config.n_databases)
        else:
            gains = np.full(config.n_databases, config.gain)
            offsets = np.zeros(config.n_databases)
        return cls(config, np.array(rows), gains, offsets)

    @classmethod
    def from_weights(cls, weights: np.ndarray, config: UniverseConfig | None = None) -> "TaskUniverse":
        """Universe with explicitly given database directions (normalised here)."""
        w = np.array(weights, dtype=np.float64)
        w = w / np.linalg.norm(w, axis=1, keepdims=True)
        base = config or UniverseConfig()
        cfg = UniverseConfig(**{**base.to_dict(), "feature_dim": w.shape[1], "n_databases": w.shape[0]})
        n = w.shape[0]
        return cls(cfg, w, np.full(n, cfg.gain), np.zeros(n))

    @property
    def n_databases(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def noise_std(self) -> float:
        return self.config.noise * (SCORE_MAX - SCORE_MIN)

    def min_angle(self) -> float:
        return _min_pairwise_angle(self.weights)

    def squash(self, z: np.ndarray, gain: float | None = None, offset: float = 0.0) -> np.ndarray:
        g = self.config.gain if gain is None else gain
        return SCORE_MIN + (SCORE_MAX - SCORE_MIN) / (1.0 + np.exp(-(g * z + offset)))

    def database_scores(self, i: int, x: np.ndarray) -> np.ndarray:
        """Noise-free score of database ``i``."""
        return self.squash(x @ self.weights[i], self.gains[i], self.offsets[i])

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "weights": self.weights.tolist(),
            "gains": self.gains.tolist(),
            "offsets": self.offsets.tolist(),
        }


def _noisy(universe: TaskUniverse, clean: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    s = clean + noise_std * rng.standard_normal(clean.shape) if noise_std > 0 else clean
    return np.clip(s, SCORE_MIN, SCORE_MAX)


def generate_database(universe: TaskUniverse, i: int, count: int, seed: int = 0) -> SampleSet:
    if not 0 <= i < universe.n_databases:
        raise ContractError(f"database index {i} outside [0, {universe.n_databases})")
    if count < 2:
        raise ContractError("count must be at least 2")
    rng = np.random.default_rng([universe.config.seed, _DATABASE, i, seed])
    x = rng.standard_normal((count, universe.dim))
    return SampleSet(x, _noisy(universe, universe.database_scores(i, x), universe.noise_std, rng))


@dataclass(frozen=True)
class UserSpec:
    user_id: int
    mixture: np.ndarray  # (n_databases,), on the simplex
    idiosyncratic: np.ndarray  # (d,), unit
    blend: float  # weight of the idiosyncratic direction
    shots: int = 10
    test_size: int = 200
    noise: float | None = None  # score std; None uses the universe noise
    # personal rating curve: 1 + 9 * sigmoid(rating_gain * z + rating_offset)
    rating_gain: float = 1.0
    rating_offset: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.mixture, dtype=np.float64)
        if m.ndim != 1 or np.any(m < 0) or not math.isclose(float(m.sum()), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ContractError("mixture must be a point on the simplex")
        if not 0.0 <= self.blend <= 1.0:
            raise ContractError(f"blend must lie in [0, 1], got {self.blend}")
        if self.shots < 2:
            raise ContractError("shots must be at least 2")
        if self.rating_gain <= 0:
            raise ContractError("rating_gain must be positive")
        object.__setattr__(self, "mixture", m)
        object.__setattr__(self, "idiosyncratic", np.asarray(self.idiosyncratic, dtype=np.float64))

    def with_shots(self, shots: int) -> "UserSpec":
        return replace(self, shots=shots)

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "mixture": self.mixture.tolist(),
            "idiosyncratic": self.idiosyncratic.tolist(),
            "blend": self.blend,
            "shots": self.shots,
            "test_size": self.test_size,
            "noise": self.noise,
            "rating_gain": self.rating_gain,
            "rating_offset": self.rating_offset,
        }


@dataclass(frozen=True)
class UserPopulation:
    """How :func:`make_users` draws users."""

    count: int = 20
    concentration: float = 1.0  # symmetric Dirichlet parameter of the mixture
    blend_low: float = 0.0
    blend_high: float = 0.3
    rating_gain_low: float = 0.5
    rating_gain_high: float = 2.0
    rating_offset_range: float = 1.0  # offsets drawn from [-range, range]
    test_size: int = 200

    def __post_init__(self):
        if self.count < 1 or self.concentration <= 0:
            raise ContractError("count and concentration must be positive")
        if not 0.0 <= self.blend_low <= self.blend_high <= 1.0:
            raise ContractError("need 0 <= blend_low <= blend_high <= 1")
        if not 0.0 < self.rating_gain_low <= self.rating_gain_high:
            raise ContractError("need 0 < rating_gain_low <= rating_gain_high")
        if self.rating_offset_range < 0:
            raise ContractError("rating_offset_range must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def make_users(universe: TaskUniverse, population: UserPopulation = UserPopulation(), seed: int = 0) -> list[UserSpec]:
    users = []
    for u in range(population.count):
        rng = np.random.default_rng([universe.config.seed, _USER_SPEC, seed, u])
        mixture = rng.dirichlet(np.full(universe.n_databases, population.concentration))
        mixture = mixture / mixture.sum()
        idio = _unit(rng.standard_normal(universe.dim))
        blend = float(rng.uniform(population.blend_low, population.blend_high))
        gain = float(rng.uniform(population.rating_gain_low, population.rating_gain_high))
        offset = float(rng.uniform(-population.rating_offset_range, population.rating_offset_range))
        users.append(
            UserSpec(u, mixture, idio, blend, test_size=population.test_size, rating_gain=gain, rating_offset=offset)
        )
    return users


def user_direction(universe: TaskUniverse, spec: UserSpec) -> np.ndarray:
    """Unit scoring direction of a user.

    A zero blended vector is resolved by perturbing the idiosyncratic
    direction deterministically until the blend is non-degenerate.
    """
    base = spec.mixture @ universe.weights
    nb = np.linalg.norm(base)
    base = base / nb if nb > 0 else base
    idio = spec.idiosyncratic
    rng = np.random.default_rng([universe.config.seed, _USER_SPEC, spec.user_id, 999])
    for _ in range(100):
        v = (1.0 - spec.blend) * base + spec.blend * idio
        nv = np.linalg.norm(v)
        if nv > 1e-12:
            return v / nv
        log.warning("user %d: degenerate blended direction, perturbing idiosyncratic vector", spec.user_id)
        idio = _unit(idio + 0.1 * rng.standard_normal(idio.shape))
    raise ContractError(f"user {spec.user_id}: could not build a non-degenerate direction")


def user_scores(universe: TaskUniverse, spec: UserSpec, x: np.ndarray) -> np.ndarray:
    """Noise-free score of a user."""
    z = x @ user_direction(universe, spec)
    return universe.squash(z, universe.config.gain * spec.rating_gain, spec.rating_offset)


def generate_user(universe: TaskUniverse, spec: UserSpec, seed: int = 0) -> tuple[SampleSet, SampleSet]:
    """Fresh ``(support, test)`` draw for a user; the two never share a row."""
    rng = np.random.default_rng([universe.config.seed, _USER_DATA, spec.user_id, seed])
    n = spec.shots + spec.test_size
    x = rng.standard_normal((n, universe.dim))
    noise = universe.noise_std if spec.noise is None else spec.noise
    s = _noisy(universe, user_scores(universe, spec, x), noise, rng)
    support = SampleSet(x[: spec.shots], s[: spec.shots])
    test = SampleSet(x[spec.shots :], s[spec.shots :])
    return support, test
