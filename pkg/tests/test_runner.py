import subprocess
import sys

import numpy as np
import pytest

from adml.config import parse_config
from adml.runner import CSV_HEADER, run_experiment
from adml.synth import load_dataset

SMALL = """
data.input_dim = 16
data.sigma = 0.05
data.n_train = 40
data.n_test = 24
model.hidden_dims = 12,8
model.embedding_dim = 2
train.epochs = 2
train.batch_size = 4
train.lr = 1e-3
attack.epsilon = 0.02
attack.iterations = 2
attack.cw_iterations = 5
run.seeds = 1,2
certify.n_points = 6
certify.event_samples = 50
"""


@pytest.fixture
def small_cfg():
    return parse_config(SMALL)


class TestRunExperiment:
    def test_gen_data_writes_loadable_datasets(self, small_cfg, tmp_path):
        status = run_experiment(small_cfg, "gen-data", tmp_path)
        assert status == 0
        for seed in (1, 2):
            ds = load_dataset(tmp_path / f"seed_{seed}" / "train.admlds")
            assert len(ds) == 40
        assert (tmp_path / "resolved.cfg").exists()
        assert (tmp_path / "versions.txt").exists()

    def test_train_writes_checkpoint_and_metrics(self, small_cfg, tmp_path):
        status = run_experiment(small_cfg, "train", tmp_path, seeds=[1])
        assert status == 0
        assert (tmp_path / "seed_1" / "checkpoint-natural.admlck").exists()
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 2
        assert ",benign," in lines[1]
        assert lines[1].endswith("NA")

    def test_attack_appends_adversarial_rows_and_shift_report(self, small_cfg, tmp_path):
        status = run_experiment(small_cfg, "attack", tmp_path, seeds=[1])
        assert status == 0
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3  # header, benign, pgd
        assert ",pgd," in lines[2]
        shift = (tmp_path / "seed_1" / "shift_natural_pgd.csv").read_text().splitlines()
        assert shift[0].startswith("index,label,shift,nn_correct")
        assert len(shift) == 25

    def test_certify_writes_certificates(self, small_cfg, tmp_path):
        status = run_experiment(small_cfg, "certify", tmp_path, seeds=[1])
        assert status == 0
        cert = (tmp_path / "seed_1" / "certificates.csv").read_text().splitlines()
        assert len(cert) == 7
        summary = (tmp_path / "certify_summary.csv").read_text().splitlines()
        assert len(summary) == 2

    def test_sweep_rate_emits_rows_per_rate(self, small_cfg, tmp_path):
        status = run_experiment(small_cfg, "sweep-rate", tmp_path, seeds=[1])
        assert status == 0
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        # natural (benign+pgd) + 5 rates x (benign+pgd)
        assert len(lines) == 1 + 2 + 10
        agg = (tmp_path / "aggregate.csv").read_text().splitlines()
        assert len(agg) > 2

    def test_rerun_identical_metrics_bytes(self, small_cfg, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_experiment(small_cfg, "attack", a, seeds=[1, 2]) == 0
        assert run_experiment(small_cfg, "attack", b, seeds=[1, 2]) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "aggregate.csv").read_bytes() == (b / "aggregate.csv").read_bytes()

    def test_threads_do_not_change_bytes(self, small_cfg, tmp_path):
        a, b = tmp_path / "t1", tmp_path / "t4"
        assert run_experiment(small_cfg, "sweep-attack", a, seeds=[1, 2], threads=1) == 0
        assert run_experiment(small_cfg, "sweep-attack", b, seeds=[1, 2], threads=4) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()

    def test_failure_writes_marker(self, tmp_path):
        # batch size demanding more classes than the two-class data has
        cfg = parse_config(SMALL + "\ntrain.batch_size = 12\n")
        status = run_experiment(cfg, "train", tmp_path, seeds=[1])
        assert status == 1
        assert (tmp_path / "FAILED").exists()


class TestCli:
    def run_cli(self, args):
        return subprocess.run(
            [sys.executable, "-m", "adml.cli", *args],
            capture_output=True, text=True,
        )

    def test_end_to_end_with_config_file(self, tmp_path):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(SMALL)
        out = tmp_path / "out"
        proc = self.run_cli(["train", "--config", str(cfg_path), "--out", str(out),
                             "--seed", "1"])
        assert proc.returncode == 0, proc.stderr
        assert (out / "metrics.csv").exists()

    def test_preset_flag(self, tmp_path):
        out = tmp_path / "out"
        proc = self.run_cli(["gen-data", "--preset", "appendix-synthetic-natural",
                             "--out", str(out), "--seed", "1"])
        assert proc.returncode == 0, proc.stderr
        ds = load_dataset(out / "seed_1" / "test.admlds")
        assert ds.input_dim == 3072 and len(ds) == 516

    def test_config_error_exit_code(self, tmp_path):
        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("attack.epsilon = -3\n")
        proc = self.run_cli(["train", "--config", str(cfg_path), "--out",
                             str(tmp_path / "out")])
        assert proc.returncode == 2
        assert "epsilon" in proc.stderr

    def test_requires_config_or_preset(self, tmp_path):
        proc = self.run_cli(["train", "--out", str(tmp_path / "out")])
        assert proc.returncode == 2

    def test_config_overrides_preset(self, tmp_path):
        cfg_path = tmp_path / "override.cfg"
        cfg_path.write_text("data.n_test = 20\ndata.input_dim = 16\ndata.n_train = 30\n")
        out = tmp_path / "out"
        proc = self.run_cli(["gen-data", "--preset", "appendix-synthetic-natural",
                             "--config", str(cfg_path), "--out", str(out), "--seed", "3"])
        assert proc.returncode == 0, proc.stderr
        ds = load_dataset(out / "seed_3" / "test.admlds")
        assert ds.input_dim == 16 and len(ds) == 20
