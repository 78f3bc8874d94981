"""Run reports: raw per-trial records plus statistics recomputable from them.

The aggregate ``mean`` of an arm at a shot count is the mean over all its
``(user, trial)`` records; ``std`` is the sample standard deviation over
trials of the user-averaged SROCC.  Per-user rows carry the mean and sample
standard deviation over that user's trials.

Everything is written with sorted keys, canonical row order and ``repr``
floats, and nothing time- or host-dependent is recorded, so rerunning an
unchanged experiment reproduces every file byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import ContractError, DependencyError
from .task_vectors import cosine_similarity_matrix

SCHEMA_VERSION = 1
REPORT_FILE = "report.json"


class SchemaError(DependencyError):
    """A report was written by an incompatible schema version."""


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _std(v: Sequence[float]) -> float:
    return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


def aggregate(records: Sequence[dict], arms: Sequence[str]) -> list[dict]:
    """Per ``(arm, shots)`` statistics in arm order then ascending shots."""
    groups: dict[tuple[str, int], list[dict]] = defaultdict(list)
    for r in records:
        groups[(r["arm"], r["shots"])].append(r)
    order = {a: i for i, a in enumerate(arms)}
    out = []
    for arm, shots in sorted(groups, key=lambda k: (order.get(k[0], len(order)), k[0], k[1])):
        recs = groups[(arm, shots)]
        by_user: dict[int, list[float]] = defaultdict(list)
        by_trial: dict[int, list[float]] = defaultdict(list)
        for r in sorted(recs, key=lambda r: (r["user"], r["trial"])):
            by_user[r["user"]].append(r["srocc"])
            by_trial[r["trial"]].append(r["srocc"])
        trial_means = [float(np.mean(by_trial[t])) for t in sorted(by_trial)]
        users = [
            {"user": u, "mean": float(np.mean(v)), "std": _std(v), "values": v} for u, v in sorted(by_user.items())
        ]
        out.append({
            "arm": arm,
            "shots": shots,
            "mean": float(np.mean([r["srocc"] for r in recs])),
            "std": _std(trial_means),
            "n_users": len(by_user),
            "n_trials": len(by_trial),
            "zero_shot_mean": float(np.mean([r["zero_shot_mean"] for r in recs])),
            "users": users,
        })
    return out


def _sort_records(records: Sequence[dict], arms: Sequence[str]) -> list[dict]:
    order = {a: i for i, a in enumerate(arms)}
    key = lambda r: (r.get("run", ""), order.get(r["arm"], len(order)), r["arm"], r["shots"], r["user"], r["trial"])
    return sorted(records, key=key)


@dataclass
class RunReport:
    config: dict
    code_version: str
    phase1: dict
    similarity: dict
    arms: list[str]
    trials: int
    records: list[dict]
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def build(cls, cfg, artifacts, arms: Sequence[str], records: Sequence[dict], trials: int) -> "RunReport":
        sim = cosine_similarity_matrix(list(artifacts.tvs))
        return cls(
            config=cfg.to_dict(),
            code_version=code_version(),
            phase1={"checksums": artifacts.checksums()},
            similarity={"task_ids": list(artifacts.task_ids), "matrix": sim.tolist()},
            arms=list(arms),
            trials=trials,
            records=_sort_records(records, arms),
        )

    def aggregates(self) -> list[dict]:
        return aggregate(self.records, self.arms)

    def aggregate_for(self, arm: str, shots: int) -> dict:
        for a in self.aggregates():
            if a["arm"] == arm and a["shots"] == shots:
                return a
        raise KeyError((arm, shots))

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "code_version": self.code_version,
            "config": self.config,
            "phase1": self.phase1,
            "similarity": self.similarity,
            "arms": self.arms,
            "trials": self.trials,
            "records": self.records,
            "aggregates": self.aggregates(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"report schema version {version!r}, expected {SCHEMA_VERSION}")
        return cls(
            config=d["config"], code_version=d["code_version"], phase1=d["phase1"], similarity=d["similarity"],
            arms=list(d["arms"]), trials=d["trials"], records=list(d["records"]),
        )

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunReport":
        path = Path(run_dir) / REPORT_FILE
        if not path.is_file():
            raise DependencyError(f"{run_dir}: no {REPORT_FILE}; is this a completed run?")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / REPORT_FILE).write_text(self.dumps(), encoding="utf-8")
        aggs = self.aggregates()
        _write_csv(out / "records.csv", RECORD_COLUMNS, self.records)
        _write_csv(out / "aggregates.csv", AGGREGATE_COLUMNS, aggs)
        _write_csv(out / "users.csv", USER_COLUMNS, _user_rows(aggs))


RECORD_COLUMNS = ("run", "arm", "shots", "user", "trial", "data_seed", "train_seed", "srocc", "plcc",
                  "zero_shot_mean", "selected")
AGGREGATE_COLUMNS = ("run", "arm", "shots", "mean", "std", "n_users", "n_trials", "zero_shot_mean")
USER_COLUMNS = ("run", "arm", "shots", "user", "mean", "std")


def _user_rows(aggs: Sequence[dict]) -> list[dict]:
    return [{**{k: a.get(k, "") for k in ("run", "arm", "shots")}, **u} for a in aggs for u in a["users"]]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _mean_series(series: Sequence[Sequence[tuple[int, float]]]) -> list[tuple[int, float]]:
    acc: dict[int, list[float]] = defaultdict(list)
    for s in series:
        for step, v in s:
            acc[int(step)].append(v)
    return [(k, float(np.mean(acc[k]))) for k in sorted(acc)]


def merge_reports(runs: Sequence[tuple[str, RunReport]]) -> dict:
    """Consolidate several runs; each record gains a ``run`` label."""
    labels = [label for label, _ in runs]
    if len(set(labels)) != len(labels):
        raise ContractError(f"duplicate run labels: {labels}")
    if not runs:
        raise DependencyError("need at least one completed run")
    merged: dict = {"schema_version": SCHEMA_VERSION, "runs": [], "records": [], "aggregates": []}
    for label, rep in sorted(runs, key=lambda r: r[0]):
        merged["runs"].append({
            "run": label, "config": rep.config, "code_version": rep.code_version, "phase1": rep.phase1,
            "similarity": rep.similarity, "arms": rep.arms, "trials": rep.trials,
        })
        recs = [{**r, "run": label} for r in rep.records]
        merged["records"] += _sort_records(recs, rep.arms)
        merged["aggregates"] += [{**a, "run": label} for a in aggregate(rep.records, rep.arms)]
    return merged


def plot_data(merged: dict) -> dict[str, list[dict]]:
    """Per-figure x/y tables keyed by file stem."""
    curves, losses, ntasks, sim = [], [], [], []
    for run in merged["runs"]:
        label = run["run"]
        recs = [r for r in merged["records"] if r["run"] == label]
        groups: dict[tuple[str, int], list[dict]] = defaultdict(list)
        for r in recs:
            groups[(r["arm"], r["shots"])].append(r)
        order = {a: i for i, a in enumerate(run["arms"])}
        for arm, shots in sorted(groups, key=lambda k: (order.get(k[0], 0), k[1])):
            g = groups[(arm, shots)]
            for step, v in _mean_series([[tuple(p) for p in r["curve"]] for r in g]):
                curves.append({"run": label, "arm": arm, "shots": shots, "step": step, "srocc": v})
            for step, v in _mean_series([[tuple(p) for p in r["losses"]] for r in g]):
                losses.append({"run": label, "arm": arm, "shots": shots, "step": step, "loss": v})
        for a in (x for x in merged["aggregates"] if x["run"] == label):
            if a["arm"].startswith("coef/"):
                n = int(a["arm"].rsplit("/n=", 1)[1])
                ntasks.append({"run": label, "arm": a["arm"], "shots": a["shots"], "n_tasks": n,
                               "mean": a["mean"], "std": a["std"]})
        ids = run["similarity"]["task_ids"]
        for i, row in enumerate(run["similarity"]["matrix"]):
            for j, v in enumerate(row):
                sim.append({"run": label, "task_i": ids[i], "task_j": ids[j], "cosine": v})
    ntasks.sort(key=lambda r: (r["run"], r["shots"], r["arm"].rsplit("/n=", 1)[0], r["n_tasks"]))
    return {"curves": curves, "losses": losses, "ntasks": ntasks, "similarity": sim}


PLOT_COLUMNS = {
    "curves": ("run", "arm", "shots", "step", "srocc"),
    "losses": ("run", "arm", "shots", "step", "loss"),
    "ntasks": ("run", "arm", "shots", "n_tasks", "mean", "std"),
    "similarity": ("run", "task_i", "task_j", "cosine"),
}


def write_consolidated(run_dirs: Sequence[str | Path], out_dir: str | Path) -> dict:
    runs = [(Path(d).name, RunReport.load(d)) for d in run_dirs]
    merged = merge_reports(runs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "consolidated.json").write_text(json.dumps(merged, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _write_csv(out / "records.csv", RECORD_COLUMNS, merged["records"])
    _write_csv(out / "aggregates.csv", AGGREGATE_COLUMNS, merged["aggregates"])
    _write_csv(out / "users.csv", USER_COLUMNS, _user_rows(merged["aggregates"]))
    for stem, rows in plot_data(merged).items():
        _write_csv(out / f"plot_{stem}.csv", PLOT_COLUMNS[stem], rows)
    return merged
