"""Few-shot personalization protocol: users x trials x shots x method arms.

Every ``(shots, user, trial)`` job draws one fresh support/test split and
runs every arm on it, so arms are compared on identical data.  Seeds are
derived from the master seed and the job key only, which makes results
independent of job order and of the number of worker processes.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .config import ExperimentConfig
from .data import SampleSet
from .errors import DependencyError
from .metrics import plcc, srocc
from .nn import ModelParams
from .report import RunReport
from .personalize import PersonalizationConfig, best_fit_finetune, merge, train_coefficients
from .synth import TaskUniverse, UserSpec, generate_user
from .task_vectors import TaskVector, params_hash

log = logging.getLogger(__name__)

_TEMPERATURE = {"uniform": math.inf, "best_fit": 0.0}
_DATA, _TRAIN = 11, 12


@dataclass(frozen=True)
class Arm:
    """One personalization method; ``n_tasks`` uses the first n task vectors."""

    method: str  # "coefficients" | "best_fit_ft"
    init: str
    loss: str
    layer_mode: str
    n_tasks: int

    @property
    def name(self) -> str:
        if self.method == "best_fit_ft":
            return f"best_fit_ft/loss={self.loss}"
        return f"coef/init={self.init}/loss={self.loss}/layers={self.layer_mode}/n={self.n_tasks}"


def arms_for(cfg: ExperimentConfig, n_total: int) -> list[Arm]:
    """Arms selected by the ablation switches, in canonical order, without duplicates."""
    ab = cfg.ablation
    arms = [
        Arm("coefficients", i, l, m, n_total) for i in ab.init for l in ab.loss for m in ab.layer_mode
    ]
    head = arms[0]
    arms += [Arm("coefficients", head.init, head.loss, head.layer_mode, n) for n in ab.n_tasks]
    if ab.best_fit_ft:
        arms.append(Arm("best_fit_ft", "best_fit", ab.loss[0], "full", n_total))
    seen, out = set(), []
    for a in arms:
        if a not in seen:
            seen.add(a)
            out.append(a)
    return out


@dataclass(frozen=True)
class Phase1Artifacts:
    pre: ModelParams
    tvs: tuple[TaskVector, ...]

    def __post_init__(self):
        object.__setattr__(self, "tvs", tuple(self.tvs))
        if not self.tvs:
            raise DependencyError("phase-1 artifacts hold no task vectors")

    @property
    def task_ids(self) -> tuple[str, ...]:
        return tuple(tv.task_id for tv in self.tvs)

    def ft_models(self) -> list[ModelParams]:
        return [tv.apply_to(self.pre) for tv in self.tvs]

    def checksums(self) -> dict[str, str]:
        out = {"pre": params_hash(self.pre)}
        out.update({tv.task_id: params_hash(tv.apply_to(self.pre)) for tv in self.tvs})
        return out


def derive_seed(master: int, tag: int, shots: int, user: int, trial: int) -> int:
    ss = np.random.SeedSequence([master, tag, shots, user, trial])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _arm_config(base: PersonalizationConfig, arm: Arm, shots: int) -> PersonalizationConfig:
    temp = _TEMPERATURE.get(arm.init, base.temperature)
    return PersonalizationConfig(**{**base.__dict__, "temperature": temp, "loss": arm.loss, "shots": shots})


def _sampled(values: Sequence[float], every: int) -> list[list]:
    """``[step, value]`` pairs every ``every`` steps, always including the last step."""
    if not every or not values:
        return []
    steps = list(range(0, len(values), every))
    if steps[-1] != len(values) - 1:
        steps.append(len(values) - 1)
    return [[s, float(values[s])] for s in steps]


def _run_arm(
    art: Phase1Artifacts,
    ft_models: list[ModelParams],
    arm: Arm,
    support: SampleSet,
    test: SampleSet,
    pcfg: PersonalizationConfig,
    seed: int,
    curve_every: int,
) -> dict:
    rec: dict = {"arm": arm.name}
    if arm.method == "best_fit_ft":
        model, tlog = best_fit_finetune(art.pre, ft_models, support, pcfg, seed)
        rec["selected"] = art.task_ids[tlog.selected]
        rec["curve"] = []
        rec["coefficients"] = None
    else:
        tvs = art.tvs[: arm.n_tasks]
        coeffs, tlog = train_coefficients(
            art.pre, tvs, support, pcfg, seed,
            layer_agnostic=arm.layer_mode == "agnostic", eval_set=test, eval_every=curve_every,
        )
        model = merge(art.pre, tvs, coeffs)
        rec["curve"] = [[s, v] for s, v in tlog.curve]
        rec["coefficients"] = coeffs.to_dict()
    pred = nn.predict(model, test.features)
    rec["srocc"] = srocc(test.scores, pred)
    rec["plcc"] = plcc(test.scores, pred)
    rec["losses"] = _sampled(tlog.losses, curve_every)
    return rec


def run_job(
    art: Phase1Artifacts, universe: TaskUniverse, spec: UserSpec, arms: Sequence[Arm], cfg: ExperimentConfig,
    shots: int, trial: int,
) -> list[dict]:
    data_seed = derive_seed(cfg.seed, _DATA, shots, spec.user_id, trial)
    train_seed = derive_seed(cfg.seed, _TRAIN, shots, spec.user_id, trial)
    support, test = generate_user(universe, spec.with_shots(shots), seed=data_seed)
    ft_models = art.ft_models()
    zero_shot = [srocc(test.scores, nn.predict(m, test.features)) for m in ft_models]
    out = []
    for arm in arms:
        pcfg = _arm_config(cfg.personalization, arm, shots)
        rec = _run_arm(art, ft_models, arm, support, test, pcfg, train_seed, cfg.protocol.curve_every)
        rec.update(
            shots=shots, user=spec.user_id, trial=trial, data_seed=data_seed, train_seed=train_seed,
            zero_shot_mean=float(np.mean(zero_shot)),
        )
        out.append(rec)
    return out


# worker-process state, set once per process by the pool initializer
_STATE: dict = {}


def _init_worker(art, universe, users, arms, cfg):
    _STATE.update(art=art, universe=universe, users={u.user_id: u for u in users}, arms=arms, cfg=cfg)


def _worker(key: tuple[int, int, int]) -> list[dict]:
    shots, user, trial = key
    s = _STATE
    return run_job(s["art"], s["universe"], s["users"][user], s["arms"], s["cfg"], shots, trial)


def run_protocol(
    universe: TaskUniverse,
    users: Sequence[UserSpec],
    cfg: ExperimentConfig,
    artifacts: Phase1Artifacts | None,
    trials: int | None = None,
    jobs: int = 1,
    arms: Sequence[Arm] | None = None,
) -> RunReport:
    """Run every arm for every user, trial and shot count; returns a :class:`RunReport`."""
    if artifacts is None:
        raise DependencyError("phase-1 checkpoints are missing; run `tvcustom finetune` first")
    trials = cfg.protocol.trials if trials is None else trials
    arms = list(arms) if arms is not None else arms_for(cfg, len(artifacts.tvs))
    too_big = [a.name for a in arms if a.n_tasks > len(artifacts.tvs)]
    if too_big:
        raise DependencyError(f"arms need more task vectors than the archive holds: {too_big}")
    keys = [(k, u.user_id, t) for k in cfg.protocol.shots for u in users for t in range(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(artifacts, universe, users, arms, cfg)) as ex:
            chunks = list(ex.map(_worker, keys))
    else:
        _init_worker(artifacts, universe, users, arms, cfg)
        chunks = [_worker(k) for k in keys]
        _STATE.clear()
    records = [r for c in chunks for r in c]
    return RunReport.build(cfg, artifacts, [a.name for a in arms], records, trials)
