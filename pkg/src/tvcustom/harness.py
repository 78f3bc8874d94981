"""On-disk layout and drivers behind the CLI subcommands.

A run directory looks like::

    checkpoints/pre.tvck, checkpoints/db0.tvck, ...   (finetune)
    phase1.json                                     (finetune summary)
    task_vectors.tvck, similarity.csv               (extract)
    report.json, records.csv, aggregates.csv, users.csv   (personalize)
"""
from __future__ import annotations

import csv
import io
import json
import logging
import re
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig
from .errors import DependencyError
from .metrics import srocc
from .nn import ModelParams, predict
from .phase1 import database_task_id, run_phase1
from .protocol import Phase1Artifacts, run_protocol
from .report import RunReport
from .synth import TaskUniverse, generate_database, make_users
from .task_vectors import TaskVector, cosine_similarity_matrix, extract, params_hash

log = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"
PRE_NAME = "pre"
ARCHIVE_FILE = "task_vectors.tvck"
SUFFIX = ".tvck"
HOLDOUT_SEED, HOLDOUT_COUNT = 1, 500


def _natural(name: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", name)]


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def own_database_srocc(universe: TaskUniverse, models: dict[str, ModelParams]) -> dict[str, float]:
    """Held-out SROCC of each fine-tuned model on fresh data from its own database."""
    out = {}
    for i in range(universe.n_databases):
        data = generate_database(universe, i, HOLDOUT_COUNT, seed=HOLDOUT_SEED)
        out[database_task_id(i)] = srocc(data.scores, predict(models[database_task_id(i)], data.features))
    return out


def finetune(cfg: ExperimentConfig, out_dir: str | Path) -> dict:
    """Phase 1: pooled base model plus one fine-tune per database, saved as checkpoints."""
    out = Path(out_dir)
    ck = out / CHECKPOINT_DIR
    ck.mkdir(parents=True, exist_ok=True)
    universe = TaskUniverse.create(cfg.universe)
    pre, models = run_phase1(universe, cfg.architecture, cfg.phase1, seed=cfg.seed)
    checkpoint.save(ck / f"{PRE_NAME}{SUFFIX}", pre)
    for task_id, m in models.items():
        checkpoint.save(ck / f"{task_id}{SUFFIX}", m)
    summary = {
        "checksums": {PRE_NAME: params_hash(pre), **{k: params_hash(m) for k, m in models.items()}},
        "own_database_srocc": own_database_srocc(universe, models),
        "config": cfg.to_dict(),
    }
    _dump_json(out / "phase1.json", summary)
    return summary


def load_checkpoints(ck_dir: str | Path) -> tuple[ModelParams, dict[str, ModelParams]]:
    ck = Path(ck_dir)
    pre_path = ck / f"{PRE_NAME}{SUFFIX}"
    if not pre_path.is_file():
        raise DependencyError(f"{ck}: missing {pre_path.name}; run `tvcustom finetune` first")
    pre = checkpoint.load_params(pre_path)
    paths = sorted((p for p in ck.glob(f"*{SUFFIX}") if p.stem != PRE_NAME), key=lambda p: _natural(p.stem))
    if not paths:
        raise DependencyError(f"{ck}: no fine-tuned checkpoints")
    return pre, {p.stem: checkpoint.load_params(p) for p in paths}


def similarity_csv(tvs: list[TaskVector], sim: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_id", *(tv.task_id for tv in tvs)])
    for tv, row in zip(tvs, sim):
        w.writerow([tv.task_id, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def extract_archive(ck_dir: str | Path, out_dir: str | Path) -> tuple[list[TaskVector], np.ndarray]:
    """Task vectors of every fine-tuned checkpoint plus their cosine-similarity matrix."""
    pre, models = load_checkpoints(ck_dir)
    tvs = [extract(pre, m, task_id) for task_id, m in models.items()]
    sim = cosine_similarity_matrix(tvs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save_archive(out / ARCHIVE_FILE, tvs)
    (out / "similarity.csv").write_text(similarity_csv(tvs, sim), encoding="utf-8")
    return tvs, sim


def load_artifacts(pre_path: str | Path, archive_path: str | Path) -> Phase1Artifacts:
    for p in (pre_path, archive_path):
        if not Path(p).is_file():
            raise DependencyError(f"missing phase-1 artifact {p}; run `tvcustom finetune` and `tvcustom extract`")
    pre = checkpoint.load_params(pre_path)
    tvs = checkpoint.load_archive(archive_path)
    for tv in tvs.values():
        if tv.descriptor != pre.descriptor:
            raise DependencyError(f"task vector {tv.task_id!r} does not match the base checkpoint")
    return Phase1Artifacts(pre, tuple(tvs[k] for k in sorted(tvs, key=_natural)))


def personalize(
    cfg: ExperimentConfig, out_dir: str | Path, pre_path: str | Path | None = None,
    archive_path: str | Path | None = None, jobs: int = 1,
) -> RunReport:
    out = Path(out_dir)
    art = load_artifacts(
        pre_path or out / CHECKPOINT_DIR / f"{PRE_NAME}{SUFFIX}", archive_path or out / ARCHIVE_FILE
    )
    universe = TaskUniverse.create(cfg.universe)
    users = make_users(universe, cfg.population, seed=cfg.seed)
    report = run_protocol(universe, users, cfg, art, jobs=jobs)
    report.write(out)
    return report


def simbench(cfg: ExperimentConfig, out_dir: str | Path, count: int = 200) -> dict:
    """Write the universe, the user specs and a sample of every database for inspection."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    universe = TaskUniverse.create(cfg.universe)
    users = make_users(universe, cfg.population, seed=cfg.seed)
    _dump_json(out / "universe.json", universe.to_dict())
    _dump_json(out / "users.json", [u.to_dict() for u in users])
    x = np.random.default_rng([cfg.universe.seed, 99]).standard_normal((count, universe.dim))
    clean = [universe.database_scores(i, x) for i in range(universe.n_databases)]
    cross = [[srocc(a, b) for b in clean] for a in clean]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    ids = [database_task_id(i) for i in range(universe.n_databases)]
    w.writerow(["task_id", *ids])
    for tid, row in zip(ids, cross):
        w.writerow([tid, *(repr(v) for v in row)])
    (out / "cross_srocc.csv").write_text(buf.getvalue(), encoding="utf-8")
    for i in range(universe.n_databases):
        generate_database(universe, i, count, seed=0).to_csv(out / f"{database_task_id(i)}.csv")
    return {"min_angle_deg": universe.min_angle(), "cross_srocc": cross}
