"""End-to-end acceptance criteria.

Each test carries ``@pytest.mark.acceptance(n)`` and reports a one-line
summary through the ``criterion`` fixture; the terminal summary prints one
PASS/FAIL line per criterion.  ``pytest -m "not acceptance"`` skips them.
"""

import json
import subprocess
import sys
import tempfile
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from bicdefense import attacks, synth
from bicdefense.cli import main
from bicdefense.config import ExperimentConfig
from bicdefense.data import load_dataset, save_dataset
from bicdefense.mixtures import GAUSSIAN, em_fit, fit_models, select_order
from bicdefense.pipeline import make_attack, preprocess, run_experiment, strip_timing
from bicdefense.sanitizer import SanitizerState, complete_bic, greedy_step, sanitize

from oracle import bic_from_scratch, exhaustive_first_step, tiny_instance

SEEDS = range(5)
WORKDIR = Path(tempfile.mkdtemp(prefix="bicdefense-acceptance-"))
SESSION_START = time.perf_counter()

# criterion-4 instance: 2 x 500 training samples, d=5, separation 4, 200 flips into class 1
GAUSS = dict(m_max=10, attack="2>1:200")
# criterion-5 instance: 3 x 300 training documents, vocabulary 200
TOPICS = dict(m_max=8, attack_index=2, attack_budget=60)


def dataset_path(kind, seed):
    if kind == "gaussian":
        path = WORKDIR / f"gauss{seed}.csv"
        if not path.exists():
            save_dataset(synth.gaussian_blobs(1000, 2, 5, 4.0, seed=seed), path)
    else:
        path = WORKDIR / f"topics{seed}.txt"
        if not path.exists():
            save_dataset(synth.topic_documents(600, 3, 200, 120, 0.6, 0.3, 3, 0.9, seed=seed), path)
    return path


def experiment_config(kind, seed, attacked, **kw):
    settings = dict(GAUSS if kind == "gaussian" else TOPICS)
    if not attacked:
        settings.pop("attack", None)
        settings.pop("attack_index", None)
    settings.update(kw)
    return ExperimentConfig(dataset=str(dataset_path(kind, seed)), seed=seed,
                            out_dir=str(WORKDIR / "unused"), **settings)


@lru_cache(maxsize=None)
def experiment(kind, seed, attacked, defense="bic"):
    extra = {"svd_epsilon": "truth"} if defense == "svd" else {}
    start = time.perf_counter()
    report = run_experiment(experiment_config(kind, seed, attacked, defense=defense, **extra),
                            write=False)
    return report, time.perf_counter() - start


@lru_cache(maxsize=None)
def sanitizer_run(kind, seed, attacked):
    """Fit and sanitize the processed training set of one experiment."""
    cfg = experiment_config(kind, seed, attacked)
    full = load_dataset(cfg.dataset)
    train, _, pools = attacks.split_pools(full, cfg.fractions, cfg.seed)
    data = preprocess(make_attack(cfg, train, pools).dataset)[0]
    model = fit_models(data, cfg.m_max, cfg.seed)
    start = time.perf_counter()
    _, summary, state = sanitize(data, model)
    return model, summary, state, time.perf_counter() - start


ALL_RUNS = [(kind, seed, attacked) for kind in ("gaussian", "topics")
            for attacked in (True, False) for seed in SEEDS]


def mean(values):
    return float(np.mean(list(values)))


# ---------------------------------------------------------------------------


def tiny_run(seed):
    data, model = tiny_instance(1000 + seed)
    start = time.perf_counter()
    _, summary, state = sanitize(data, model)
    return model, summary, state, time.perf_counter() - start


@pytest.mark.acceptance(1)
def test_strict_bic_descent(criterion):
    runs = [sanitizer_run(*run) for run in ALL_RUNS] + [tiny_run(seed) for seed in range(50)]
    worst_gap, slowest, steps = 0.0, 0.0, 0
    for _, summary, state, seconds in runs:
        bic = [row.bic for row in summary.trace]
        assert all(b < a for a, b in zip(bic, bic[1:]))
        drop = complete_bic(state, recompute=True) - bic[0]
        committed = sum(row.delta_bic for row in summary.trace[1:])
        if len(bic) > 1:
            worst_gap = max(worst_gap, abs(committed - drop) / abs(drop))
            assert committed == pytest.approx(drop, rel=1e-6)
        else:
            assert abs(drop) <= 1e-9 * abs(bic[0])
        slowest = max(slowest, seconds)
        steps += len(bic) - 1
        assert seconds < 10
    criterion(f"{len(runs)} runs, {steps} steps, max relative gap {worst_gap:.1e}, "
              f"slowest sanitize {slowest:.2f}s")


@pytest.mark.acceptance(2)
def test_delta_oracle_equivalence(criterion):
    start = time.perf_counter()
    checked = 0
    for seed in range(50):
        data, model = tiny_instance(1000 + seed)
        assert data.T <= 40 and data.n_classes in (2, 3)
        assert all(mix.M <= 3 for mix in model.mixtures.values())
        state = SanitizerState(data, model)
        oracle = exhaustive_first_step(state)
        first = True
        while True:
            before = bic_from_scratch(state.X, state.params, state.alive, state.assign, state.T)
            row = greedy_step(state)
            if row is None:
                break
            after = bic_from_scratch(state.X, state.params, state.alive, state.assign, state.T)
            assert row.delta_bic == pytest.approx(after - before, rel=1e-6, abs=1e-9 * abs(before))
            checked += 1
            if first:
                # the exhaustive search only sees changes that lower the BIC
                assert oracle is not None and oracle[0] < before
                assert (row.target_class, row.target_component) == oracle[1]
                assert after == pytest.approx(oracle[0], rel=1e-6)
                first = False
        if first:
            assert oracle is None or oracle[0] >= before * (1 - 1e-9) - 1e-9
    seconds = time.perf_counter() - start
    assert seconds < 60
    criterion(f"50 instances, {checked} committed steps match, {seconds:.1f}s")


def two_clusters_1d(seed, n=100):
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal(-5, 1, n), rng.normal(5, 1, n)])[:, None]


@pytest.mark.acceptance(3)
def test_em_monotone_and_recovery(criterion):
    fits = 0
    for run in ALL_RUNS:
        model = sanitizer_run(*run)[0]
        for mix in model.mixtures.values():
            assert np.all(np.diff(mix.history) >= -1e-8)
            fits += 1
    worst = 0.0
    for seed in range(20):
        X = two_clusters_1d(seed)
        mix = em_fit(X, 2, seed, kind=GAUSSIAN)
        assert np.all(np.diff(mix.history) >= -1e-8)
        means = np.sort([c.mean[0] for c in mix.components])
        worst = max(worst, float(np.max(np.abs(means - [-5, 5]))))
        assert select_order(X, 6, seed=seed, kind=GAUSSIAN).M == 2
        one = np.random.default_rng(seed).normal(size=(200, 1))
        assert select_order(one, 6, seed=seed, kind=GAUSSIAN).M == 1
    assert worst <= 0.5
    criterion(f"{fits} fits monotone, worst mean error {worst:.3f}, orders 20/20")


def efficacy(kind, min_tpr, criterion):
    start = time.perf_counter()
    reports = [experiment(kind, seed, True)[0] for seed in SEEDS]
    seconds = time.perf_counter() - start
    acc = {key: mean(r["accuracies"][key] for r in reports)
           for key in ("clean_baseline", "poisoned", "sanitized")}
    tpr, fpr = mean(r["tpr"] for r in reports), mean(r["fpr"] for r in reports)
    drop = acc["clean_baseline"] - acc["poisoned"]
    gap = acc["clean_baseline"] - acc["sanitized"]
    criterion(f"drop {100 * drop:.1f} pts, sanitized gap {100 * gap:.1f} pts, "
              f"TPR {tpr:.3f}, FPR {fpr:.3f}, {seconds:.0f}s")
    assert drop >= 0.05
    assert gap <= 0.02
    assert tpr >= min_tpr
    assert fpr <= 0.10
    return seconds


@pytest.mark.acceptance(4)
def test_gaussian_efficacy(criterion):
    assert efficacy("gaussian", 0.80, criterion) < 120


@pytest.mark.acceptance(5)
def test_multinomial_efficacy(criterion):
    assert efficacy("topics", 0.75, criterion) < 180


@pytest.mark.acceptance(6)
def test_clean_false_positive_bound(criterion):
    worst_fpr, worst_gap = 0.0, -1.0
    for kind in ("gaussian", "topics"):
        for seed in SEEDS:
            report = experiment(kind, seed, False)[0]
            acc = report["accuracies"]
            worst_fpr = max(worst_fpr, report["fpr"])
            worst_gap = max(worst_gap, acc["clean_baseline"] - acc["sanitized"])
    criterion(f"10/10 runs, worst FPR {worst_fpr:.3f}, worst accuracy loss {100 * worst_gap:.1f} pts")
    assert worst_fpr <= 0.05
    assert worst_gap <= 0.01


def triple(report):
    return report["accuracies"]["sanitized"], report["tpr"], report["fpr"]


def fmt(t):
    return "/".join(f"{v:.3f}" for v in t)


def dominates(a, b):
    return a[0] >= b[0] and a[1] >= b[1] and a[2] <= b[2]


@pytest.mark.acceptance(7)
def test_baseline_sanity(criterion):
    lines, failures = [], []
    for seed in SEEDS:
        bic = triple(experiment("gaussian", seed, True)[0])
        knn_report = experiment("gaussian", seed, True, "knn")[0]
        svd_report = experiment("gaussian", seed, True, "svd")[0]
        # two classes: every relabeled poisoned sample goes back to its source class
        restored, removed = knn_report["tpr"], svd_report["tpr"]
        beaten = [name for name, r in (("knn", knn_report), ("svd", svd_report))
                  if dominates(bic, triple(r))]
        lines.append(f"seed {seed}: knn {restored:.2f} svd {removed:.2f} beats {beaten or '-'}")
        if restored < 0.60 or removed < 0.50 or not beaten:
            failures.append(seed)
            lines[-1] += (f" (bic {fmt(bic)}, knn {fmt(triple(knn_report))},"
                          f" svd {fmt(triple(svd_report))})")
    criterion("; ".join(lines) + (f"; failing seeds {failures}" if failures else ""))
    assert not failures, "\n".join(lines)


@pytest.mark.acceptance(8)
def test_cli_determinism(tmp_path, criterion):
    data = dataset_path("gaussian", 0)
    outputs = {}
    for threads in ("1", "0"):
        for rep in ("a", "b"):
            out = tmp_path / f"t{threads}{rep}"
            code = main(["run", str(data), "--attack", GAUSS["attack"], "--m-max", str(GAUSS["m_max"]),
                         "--seed", "0", "--threads", threads, "--out-dir", str(out)])
            assert code == 0
            outputs[threads, rep] = out
    for threads in ("1", "0"):
        a, b = outputs[threads, "a"], outputs[threads, "b"]
        ra, rb = (strip_timing(json.loads((d / "report.json").read_text())) for d in (a, b))
        for r in (ra, rb):
            r["config"].pop("out_dir")
        assert json.dumps(ra, sort_keys=True) == json.dumps(rb, sort_keys=True)
        for name in ("bic_trace.csv", "sanitized.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
    # the thread count must not change any result either
    one, many = (strip_timing(json.loads((outputs[t, "a"] / "report.json").read_text()))
                 for t in ("1", "0"))
    for r in (one, many):
        r["config"].pop("out_dir")
        r["config"].pop("threads")
    assert one == many
    criterion("reports, traces and sanitized files identical at 1 thread and all cores")


@pytest.mark.acceptance(9)
def test_unit_suites_pass(criterion):
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-m", "not acceptance", "-p", "no:cacheprovider",
         str(Path(__file__).parent)],
        capture_output=True, text=True)
    unit_seconds = time.perf_counter() - start
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    total = time.perf_counter() - SESSION_START
    criterion(f"unit suites: {tail}; suite time so far {total:.0f}s")
    assert proc.returncode == 0, proc.stdout[-3000:]
    # the in-process unit tests take about as long again as the subprocess run
    assert total + unit_seconds < 600
