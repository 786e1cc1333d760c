"""Acceptance gate: one pass/fail line per criterion, printed in the summary.

Run alone with ``pytest tests/test_acceptance.py -v``.  The CIFAR-10 half of
the learnability criterion reads ``CHANNELKIT_CIFAR10_DIR`` (the directory
holding ``data_batch_*.bin`` and ``test_batch.bin``) and fails when it is
unset.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from channelkit import cost, gradcheck, oracle, zoo
from channelkit import train as tr
from channelkit.checkpoint import save_checkpoint

from conftest import ACCEPTANCE_LINES


def record(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def totals(version, alpha=1.0, classes=1000, size=224):
    return cost.cost_model_total(zoo.build_model_spec(version, alpha, classes, size))


# 1. published cost table at 224 -------------------------------------------------

COST_ROWS = [
    ("v1", 1.0, "params", 3.7e6, 0.03),
    ("v1", 1.0, "flops", 407e6, 0.03),
    ("mobilenet", 1.0, "params", 4.2e6, 0.03),
    ("mobilenet", 1.0, "flops", 569e6, 0.03),
    ("v2", 1.0, "params", 2.7e6, 0.03),
    ("v3", 1.0, "params", 1.7e6, 0.03),
    ("mobilenet", 0.75, "params", 2.6e6, 0.04),
    ("mobilenet", 0.5, "params", 1.3e6, 0.04),
    ("v1", 0.75, "params", 2.3e6, 0.04),
    ("v1", 0.5, "params", 1.2e6, 0.04),
]


@pytest.mark.parametrize("version,alpha,qty,reported,tol", COST_ROWS,
                         ids=[f"{v}-{a}-{q}" for v, a, q, _, _ in COST_ROWS])
def test_c1_cost_table(version, alpha, qty, reported, tol):
    t = time.perf_counter()
    rep = totals(version, alpha)
    got = rep.total_params if qty == "params" else rep.total_flops
    elapsed = time.perf_counter() - t
    rel = got / reported - 1.0
    ok = abs(rel) <= tol and elapsed < 1.0
    record(f"1 cost table {rep.model_name} {qty}", ok,
           f"{got:,} vs {reported:,.0f} ({rel:+.2%}, tol {tol:.0%}, {elapsed * 1e3:.0f} ms)")
    assert abs(rel) <= tol, f"{got:,} is {rel:+.2%} from {reported:,.0f}"
    assert elapsed < 1.0


# 2./3. exact deltas --------------------------------------------------------------------

def test_c2_ablation_delta():
    t = time.perf_counter()
    delta = totals("v1").total_params - totals("v1_minus").total_params
    elapsed = time.perf_counter() - t
    ok = delta == 32 and elapsed < 1.0
    record("2 v1 - v1(-) params", ok, f"{delta} (expected 32, {elapsed * 1e3:.0f} ms)")
    assert delta == 32 and elapsed < 1.0


def test_c3_replacement_deltas():
    t = time.perf_counter()
    p1, p2, p3 = (totals(v).total_params for v in ("v1", "v2", "v3"))
    elapsed = time.perf_counter() - t
    want12, want23 = 1024 * 1024 - 16, 1_024_000 - 1225
    ok = p1 - p2 == want12 and p2 - p3 == want23 and elapsed < 1.0
    record("3 replacement deltas", ok,
           f"v1-v2 {p1 - p2:,} (want {want12:,}), v2-v3 {p2 - p3:,} (want {want23:,})")
    assert p1 - p2 == want12
    assert p2 - p3 == want23
    assert elapsed < 1.0


# 4. oracle suite -------------------------------------------------------------------

def test_c4_oracle_suite():
    t = time.perf_counter()
    results = oracle.run_suite(trials=100, seed=0)
    elapsed = time.perf_counter() - t
    names = {r.name for r in results}
    required = {"channelwise_vs_banded_toeplitz", "group_pointwise_vs_block_diagonal",
                "avg_pool_vs_fixed_depthwise", "ccl_rank1_factorization"}
    worst = max(r.max_abs_diff for r in results)
    ok = required <= names and all(r.passed for r in results) and \
        min(r.trials for r in results) >= 100 and elapsed < 60
    record("4 oracle suite", ok, f"{len(results)} equivalences x 100 trials, max diff {worst:.2e}, "
                                 f"{elapsed:.1f} s")
    assert ok, oracle.format_table(results)


# 5. gradient suite -------------------------------------------------------------------

def test_c5_gradient_suite():
    t = time.perf_counter()
    reports = []
    for name in sorted(gradcheck.OP_CASES):
        reports += gradcheck.check_op(name, seed=0, tol=1e-6)
    for kind in ("gm", "gcwm"):
        reports += gradcheck.check_block(kind, tol=1e-6)
    for version in ("v1", "v2", "v3"):
        reports += gradcheck.check_model(version, seed=0, tol=1e-6)
    elapsed = time.perf_counter() - t
    failed = [r for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    ok = not failed and elapsed < 300
    record("5 gradient suite", ok, f"{len(reports)} blocks, {len(failed)} failed, "
                                   f"max rel {worst:.2e}, {elapsed:.0f} s")
    assert not failed, gradcheck.format_table(failed)
    assert elapsed < 300


# 6. built scalar counts equal the cost model -----------------------------------------------

def test_c6_build_vs_count():
    t = time.perf_counter()
    mismatches, notes = [], []
    for version in zoo.VERSIONS:
        for alpha in (1.0, 0.75, 0.5):
            classes = 1000
            if version == "v3" and alpha < 1.0:
                # a ccl head needs at least n_classes input channels: 768 and 512 < 1000
                with pytest.raises(Exception):
                    zoo.build_model_spec(version, alpha, 1000, 224)
                classes = 100
                notes.append(f"v3@{alpha:g} at 100 classes")
            spec = zoo.build_model_spec(version, alpha, classes, 224)
            built = zoo.build_network(spec).num_params()
            counted = cost.cost_model_total(spec).total_params
            if built != counted:
                mismatches.append(f"{spec.name}: {built} != {counted}")
    elapsed = time.perf_counter() - t
    ok = not mismatches and elapsed < 10
    record("6 build vs count", ok, f"15 configurations, {len(mismatches)} mismatches "
                                   f"({'; '.join(notes)}), {elapsed:.1f} s")
    assert not mismatches, mismatches
    assert elapsed < 10


# 7. learnability -------------------------------------------------------------------

DESK_CFG = dict(base_lr=0.05, batch_size=32, decay_epochs=(), seed=0)


def test_c7_learnability_synthetic():
    t = time.perf_counter()
    spec = zoo.build_model_spec("v3", 0.125, 10, 32)
    data = tr.synthetic_dataset(10, per_class=50, size=32, seed=0, noise=0.5)
    metrics = tr.train(zoo.build_network(spec, 0), data, tr.TrainConfig(total_epochs=30, **DESK_CFG))
    elapsed = time.perf_counter() - t
    hit = next((r.epoch for r in metrics.rows if r.train_top1 > 0.9), None)
    best = max(r.train_top1 for r in metrics.rows)
    ok = hit is not None and elapsed < 600
    record("7a learnability synthetic", ok,
           f"train_top1 > 0.9 first at epoch {hit}, best {best:.3f}, {elapsed:.0f} s")
    assert hit is not None
    assert elapsed < 600


def test_c7_learnability_cifar10():
    root = os.environ.get("CHANNELKIT_CIFAR10_DIR")
    if not root or not os.path.isdir(root):
        record("7b learnability CIFAR-10", False,
               "CHANNELKIT_CIFAR10_DIR not set or missing; no CIFAR-10 data to train on")
        pytest.fail("CIFAR-10 data unavailable (set CHANNELKIT_CIFAR10_DIR)")
    t = time.perf_counter()
    train_set, test_set = tr.load_cifar10(root, train_limit=5000)
    spec = zoo.build_model_spec("v3", 0.125, 10, 32)
    metrics = tr.train(zoo.build_network(spec, 0), train_set,
                       tr.TrainConfig(total_epochs=20, **DESK_CFG), test_set)
    elapsed = time.perf_counter() - t
    best = max(r.eval_top1 for r in metrics.rows)
    ok = best > 0.4 and elapsed < 600
    record("7b learnability CIFAR-10", ok, f"best test top1 {best:.3f} in 20 epochs, {elapsed:.0f} s")
    assert best > 0.4
    assert elapsed < 600


# 8. determinism ----------------------------------------------------------------------

def test_c8_determinism(tmp_path):
    env = dict(os.environ, CHANNELKIT_THREADS="1")
    for k in ("a", "b"):
        subprocess.run([sys.executable, "-m", "channelkit.cli", "train", "--model", "v1",
                        "--per-class", "6", "--epochs", "2", "--seed", "11",
                        "--out", str(tmp_path / k)], env=env, check=True, capture_output=True)
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("metrics.csv", "best.cnkt", "model.json", "train_config.json")}
    ok = all(same.values())
    record("8 determinism", ok, ", ".join(f"{f} {'identical' if s else 'DIFFERS'}"
                                          for f, s in same.items()))
    assert ok


# 9. sparsity analysis ----------------------------------------------------------------

def test_c9_sparsity_report(tmp_path):
    spec = zoo.build_model_spec("v1", 0.125, 10, 32)
    data = tr.synthetic_dataset(10, per_class=10, size=32, seed=0, noise=0.5)
    tr.train(zoo.build_network(spec, 0), data, tr.TrainConfig(total_epochs=3, **DESK_CFG),
             out_dir=tmp_path)
    res = subprocess.run([sys.executable, "-m", "channelkit.cli", "analyze-fc", "--checkpoint",
                          str(tmp_path / "best.cnkt"), "--csv", str(tmp_path / "fc.csv")],
                         capture_output=True, text=True)
    text = res.stdout
    bins = sum(1 for l in text.splitlines() if l.startswith("["))
    csv_rows = (tmp_path / "fc.csv").read_text().splitlines() if res.returncode == 0 else []
    per_class = [l for l in csv_rows if l.startswith("0.01,")]
    ok = res.returncode == 0 and bins == 64 and len(per_class) == 10
    frac = per_class[0].split(",")[1] if per_class else "n/a"
    record("9 sparsity analysis", ok,
           f"exit {res.returncode}, {bins} histogram bins, {len(per_class)} per-class counts, "
           f"frac |w|<0.01 = {float(frac):.4f}" if per_class else f"exit {res.returncode}")
    assert ok, res.stderr
