import csv
import subprocess
import sys

import numpy as np
import pytest

from channelkit import cli, ops, zoo
from channelkit.checkpoint import load_checkpoint, save_checkpoint


def run(*argv):
    return cli.main([str(a) for a in argv])


def total_params(capsys):
    out = capsys.readouterr().out
    line = [l for l in out.splitlines() if l.startswith("TOTAL")][0]
    return int(line.split()[1].replace(",", ""))


class TestStats:
    @pytest.mark.parametrize("argv,lo,hi", [
        (("--model", "v1", "--alpha", "1.0", "--input-size", "224"), 3_589_000, 3_811_000),
        (("--model", "v3", "--alpha", "1.0"), 1_649_000, 1_751_000),
        (("--model", "mobilenet", "--alpha", "0.5"), 1_248_000, 1_352_000),
    ])
    def test_totals_against_published_ranges(self, capsys, argv, lo, hi):
        assert run("stats", *argv) == 0
        n = total_params(capsys)
        assert lo <= n <= hi, f"TOTAL {n:,} outside [{lo:,}, {hi:,}]"

    def test_csv(self, tmp_path, capsys):
        assert run("stats", "--model", "v2", "--csv", tmp_path / "s.csv") == 0
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[-1][0] == "TOTAL" and int(rows[-1][1]) == total_params(capsys)

    def test_matrix(self, capsys):
        assert run("stats", "--model", "all") == 0
        assert "MobileNet" in capsys.readouterr().out

    @pytest.mark.parametrize("argv", [("--alpha", "0"), ("--alpha", "2"), ("--input-size", "100"),
                                      ("--input-size", "0"), ("--model", "v7")])
    def test_bad_flags(self, argv):
        assert run("stats", *argv) == 2


class TestVerification:
    def test_op(self):
        assert run("gradcheck", "--op", "channelwise_conv") == 0

    def test_unknown_op(self):
        assert run("gradcheck", "--op", "nosuchop") == 2

    def test_needs_exactly_one_target(self):
        assert run("gradcheck") == 2
        assert run("gradcheck", "--op", "relu", "--block", "gm") == 2

    def test_block(self):
        assert run("gradcheck", "--block", "gcwm") == 0

    def test_oracle(self, capsys):
        assert run("oracle", "--trials", "5") == 0
        assert "banded" in capsys.readouterr().out

    def test_oracle_zero_trials(self):
        assert run("oracle", "--trials", "0") == 2

    def test_corrupted_op_fails_oracle(self, monkeypatch):
        real = ops.channelwise_conv
        monkeypatch.setattr(ops, "channelwise_conv",
                            lambda x, w, *a, **k: real(x, w, *a, **k) * (1 + 1e-9))
        assert run("oracle", "--trials", "3") == 1


def train_args(out, *extra):
    return ("train", "--model", "v1", "--per-class", "4", "--epochs", "1", "--out", out, *extra)


class TestTrain:
    def test_writes_files(self, tmp_path):
        assert run(*train_args(tmp_path / "r")) == 0
        names = {p.name for p in (tmp_path / "r").iterdir()}
        assert names == {"model.json", "train_config.json", "metrics.csv", "best.cnkt"}
        rows = list(csv.DictReader(open(tmp_path / "r" / "metrics.csv")))
        assert [r["epoch"] for r in rows] == ["0", "1"]

    def test_zero_epochs(self, tmp_path):
        a = tmp_path / "z"
        assert run("train", "--model", "v1", "--per-class", "2", "--epochs", "0", "--out", a) == 0
        rows = list(csv.DictReader(open(a / "metrics.csv")))
        assert len(rows) == 1 and rows[0]["epoch"] == "0"
        net = zoo.build_network(zoo.load_model_config(a / "model.json"), 0)
        ckpt = load_checkpoint(a / "best.cnkt")
        assert all(np.array_equal(ckpt[k], v) for k, v in net.state())

    def test_missing_dataset(self, tmp_path):
        assert run(*train_args(tmp_path / "m", "--dataset", f"cifar10:{tmp_path}/nope")) == 2
        assert run(*train_args(tmp_path / "m", "--dataset", "imagenet")) == 2

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"base_lr": 0.01, "total_epochs": 5, "decay_epochs": [3], "batch_size": 16}')
        assert run(*train_args(tmp_path / "c", "--config", cfg)) == 0
        assert '"total_epochs": 1' in (tmp_path / "c" / "train_config.json").read_text()
        cfg.write_text('{"lr": 1}')
        assert run(*train_args(tmp_path / "d", "--config", cfg)) == 2

    def test_deterministic(self, tmp_path):
        for k in "ab":
            assert run(*train_args(tmp_path / k, "--seed", "3")) == 0
        for f in ("metrics.csv", "best.cnkt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


class TestAnalyzeFc:
    def test_untrained_is_near_uniform(self, tmp_path, capsys):
        net = zoo.build_network(zoo.build_model_spec("v1", 0.5, 100, 32), 0)
        save_checkpoint(tmp_path / "u.cnkt", net.state())
        assert run("analyze-fc", "--checkpoint", tmp_path / "u.cnkt", "--csv", tmp_path / "h.csv") == 0
        rows = list(csv.reader(open(tmp_path / "h.csv")))
        counts = np.array([int(r[2]) for r in rows[1:65]])
        bound = ops.fan_in_bound(512)
        assert float(rows[1][0]) >= -bound and float(rows[64][1]) <= bound
        assert counts.min() > 0.8 * counts.mean() and counts.max() < 1.2 * counts.mean()
        assert "histogram" in capsys.readouterr().out

    def test_ccl_checkpoint(self, tmp_path, capsys):
        net = zoo.build_network(zoo.build_model_spec("v3", 0.125, 10, 32), 0)
        save_checkpoint(tmp_path / "v3.cnkt", net.state())
        assert run("analyze-fc", "--checkpoint", tmp_path / "v3.cnkt") == 2
        assert "ccl" in capsys.readouterr().err

    def test_missing_and_bad_tau(self, tmp_path):
        assert run("analyze-fc", "--checkpoint", tmp_path / "none") == 2
        assert run("analyze-fc", "--checkpoint", tmp_path / "none", "--tau", "x") == 2


def test_thread_env_validated():
    env = {"CHANNELKIT_THREADS": "zero", "PATH": "/usr/bin:/bin"}
    res = subprocess.run([sys.executable, "-m", "channelkit.cli", "stats"], env=env,
                         capture_output=True, text=True)
    assert res.returncode == 2 and "CHANNELKIT_THREADS" in res.stderr
    env["CHANNELKIT_THREADS"] = "1"
    res = subprocess.run([sys.executable, "-m", "channelkit.cli", "stats"], env=env,
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr


def test_console_script():
    res = subprocess.run(["channelkit", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "analyze-fc" in res.stdout
