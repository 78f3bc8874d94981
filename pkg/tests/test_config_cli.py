import json
import math
import subprocess
import sys

import numpy as np
import pytest

from tvcustom import checkpoint, cli, harness
from tvcustom.config import ConfigError, ExperimentConfig
from tvcustom.errors import NumericalError
from tvcustom.task_vectors import cosine_similarity_matrix, extract

TINY = {
    "seed": 3,
    "universe": {"feature_dim": 6, "n_databases": 3},
    "population": {"count": 2, "test_size": 40},
    "architecture": {"input_dim": 6, "hidden_dims": [8], "head_hidden_dim": 8},
    "phase1": {
        "samples_per_database": 200,
        "pretrain": {"steps": 20, "start_lr": 0.01, "end_lr": 0.001, "batch_size": 32},
        "train_head": {"steps": 20, "start_lr": 0.003, "end_lr": 0.0003, "batch_size": 32},
        "fine_tune_backbone": {"steps": 10, "start_lr": 0.0003, "end_lr": 0.00003, "batch_size": 16},
    },
    "personalization": {"steps": 10},
    "protocol": {"shots": [5], "trials": 2, "curve_every": 5},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def phase1_run(tmp_path_factory):
    """One tiny finetune + extract through the CLI, shared by the read-only tests."""
    d = tmp_path_factory.mktemp("run")
    (d / "tiny.json").write_text(json.dumps(TINY))
    args = ["--config", str(d / "tiny.json"), "--out", str(d / "out")]
    assert cli.main(["finetune", *args]) == 0
    assert cli.main(["extract", *args]) == 0
    return d / "out", args


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = ExperimentConfig()
        assert ExperimentConfig.loads(cfg.dumps()) == cfg
        assert json.loads(cfg.dumps())["protocol"]["shots"] == [10, 100]

    def test_tiny_round_trip(self):
        cfg = ExperimentConfig.from_dict(TINY)
        assert cfg.universe.n_databases == 3 and cfg.architecture.hidden_dims == (8,)
        assert ExperimentConfig.loads(cfg.dumps()) == cfg

    def test_infinite_temperature(self):
        cfg = ExperimentConfig.from_dict({"personalization": {"temperature": "inf"}})
        assert math.isinf(cfg.personalization.temperature)
        assert json.loads(cfg.dumps())["personalization"]["temperature"] == "inf"
        assert ExperimentConfig.loads(cfg.dumps()) == cfg

    @pytest.mark.parametrize(
        "doc",
        [
            {"bogus": 1},
            {"universe": {"feature_dims": 16}},
            {"phase1": {"pretrain": {"steps": 5, "lr": 1.0}}},
            {"architecture": {"input_dim": 16, "width": 3}},
            {"ablation": {"init": ["random"]}},
            {"ablation": {"loss": "hinge"}},
            {"ablation": {"n_tasks": [7]}},
            {"architecture": {"input_dim": 4}},
            {"seed": "zero"},
            {"personalization": {"temperature": "hot"}},
            [],
        ],
    )
    def test_invalid_documents(self, doc):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(doc)

    def test_invalid_json(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.loads("{")


class TestCLI:
    def test_finetune_writes_all_checkpoints(self, phase1_run):
        out, _ = phase1_run
        names = sorted(p.name for p in (out / "checkpoints").iterdir())
        assert names == ["db0.tvck", "db1.tvck", "db2.tvck", "pre.tvck"]
        summary = json.loads((out / "phase1.json").read_text())
        assert set(summary["checksums"]) == {"pre", "db0", "db1", "db2"}

    def test_default_finetune_quality(self, tmp_path):
        summary = harness.finetune(ExperimentConfig(), tmp_path)
        assert len(list((tmp_path / "checkpoints").glob("*.tvck"))) == 7
        assert len(summary["own_database_srocc"]) == 6
        assert min(summary["own_database_srocc"].values()) >= 0.9

    def test_finetune_rerun_is_bit_identical(self, phase1_run, tmp_path):
        out, args = phase1_run
        assert cli.main(["finetune", args[0], args[1], "--out", str(tmp_path)]) == 0
        for p in (out / "checkpoints").iterdir():
            assert (tmp_path / "checkpoints" / p.name).read_bytes() == p.read_bytes()

    def test_similarity_csv_matches_in_process(self, phase1_run):
        out, _ = phase1_run
        pre, models = harness.load_checkpoints(out / "checkpoints")
        tvs = [extract(pre, m, k) for k, m in models.items()]
        sim = cosine_similarity_matrix(tvs)
        rows = (out / "similarity.csv").read_text().splitlines()
        assert rows[0] == "task_id,db0,db1,db2"
        got = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
        assert np.array_equal(got, sim) and np.all(np.diag(got) == 1.0)

    def test_archive_round_trips(self, phase1_run):
        out, _ = phase1_run
        pre, models = harness.load_checkpoints(out / "checkpoints")
        arch = checkpoint.load_archive(out / "task_vectors.tvck")
        assert list(arch) == ["db0", "db1", "db2"]
        for k, m in models.items():
            assert arch[k].apply_to(pre).equals(m)

    def test_personalize_and_report(self, phase1_run, tmp_path):
        out, args = phase1_run
        run = tmp_path / "p"
        code = cli.main([
            "personalize", args[0], args[1], "--out", str(run),
            "--pre", str(out / "checkpoints" / "pre.tvck"), "--archive", str(out / "task_vectors.tvck"),
        ])
        assert code == 0
        for name in ("report.json", "records.csv", "aggregates.csv", "users.csv"):
            assert (run / name).is_file()
        assert cli.main(["report", str(run), "--out", str(tmp_path / "merged")]) == 0
        assert (tmp_path / "merged" / "plot_curves.csv").is_file()

    def test_missing_dependencies_exit_3(self, tiny_config, tmp_path):
        base = ["--config", str(tiny_config), "--out", str(tmp_path / "empty")]
        assert cli.main(["personalize", *base]) == 3
        assert cli.main(["extract", *base]) == 3
        assert cli.main(["report", str(tmp_path / "nowhere")]) == 3

    def test_config_errors_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"universe": {"colour": 1}}')
        assert cli.main(["simbench", "--config", str(bad), "--out", str(tmp_path)]) == 2
        assert cli.main(["simbench", "--jobs", "0", "--out", str(tmp_path)]) == 2

    def test_numerical_failure_exit_4(self, tiny_config, tmp_path, monkeypatch):
        def boom(cfg, out):
            raise NumericalError("non-finite loss at step 3")

        monkeypatch.setattr(harness, "finetune", boom)
        assert cli.main(["finetune", "--config", str(tiny_config), "--out", str(tmp_path)]) == 4

    def test_simbench(self, tiny_config, tmp_path, capsys):
        assert cli.main(["simbench", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
        assert {"universe.json", "users.json", "cross_srocc.csv", "db0.csv"} <= {p.name for p in tmp_path.iterdir()}
        capsys.readouterr()
        assert cli.main(["simbench", "--print-config", "--config", str(tiny_config), "--seed", "9"]) == 0
        assert json.loads(capsys.readouterr().out)["seed"] == 9

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "tvcustom", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "personalize" in res.stdout
