"""End-to-end experiment: split, attack, defend, retrain, report.

Continuous features are scaled to [0, 1] and centred with constants learned
on the (possibly poisoned) training set; count data stays as raw counts.
Defenses and victims work on these processed features, while the emitted
sanitized dataset keeps the original feature values.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import attacks, baselines, evaluation, mixtures, sanitizer
from .config import ExperimentConfig
from .data import CONTINUOUS, Dataset, Scaler, load_dataset, save_dataset

TRACE_HEADER = ["step", "bic", "num_detected", "action", "class", "component", "case"]

# exit codes by stage
STAGE_CODES = {
    "config": 2,
    "load": 3,
    "attack": 4,
    "fit": 5,
    "defend": 6,
    "evaluate": 7,
    "write": 8,
}


class PipelineError(RuntimeError):
    """A failure tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = STAGE_CODES.get(stage, 1)


class _Stage:
    """Context manager that re-raises errors as :class:`PipelineError` and times the block."""

    def __init__(self, name: str, timing: Optional[dict] = None):
        self.name = name
        self.timing = timing

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.timing is not None:
            self.timing[self.name] = self.timing.get(self.name, 0.0) + time.perf_counter() - self.start
        if exc is None or isinstance(exc, PipelineError):
            return False
        raise PipelineError(self.name, f"{type(exc).__name__}: {exc}") from exc


def stage(name: str, timing: Optional[dict] = None) -> _Stage:
    return _Stage(name, timing)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def preprocess(train: Dataset, *others: Dataset):
    """Scale continuous features with constants fit on ``train``.

    Returns the processed ``train`` followed by the processed ``others``
    and the fitted :class:`Scaler` (``None`` for count data).
    """
    if train.feature_kind != CONTINUOUS:
        return (train, *others, None)
    scaler = Scaler().fit(train.X)
    out = [d.with_features(scaler.transform(d.X)) for d in (train, *others)]
    return (*out, scaler)


def make_attack(cfg: ExperimentConfig, train: Dataset, pools) -> attacks.PoisonedDataset:
    if cfg.attack_index:
        return attacks.multiclass_attack(train, pools, cfg.attack_index, cfg.attack_budget, cfg.seed)
    return attacks.inject(train, pools, attacks.AttackSpec.parse(cfg.attack, cfg.seed))


def victim_trainer(cfg: ExperimentConfig):
    return lambda data: evaluation.train_linear(data, cfg.victim, seed=cfg.seed)


@dataclass
class DefenseOutcome:
    """What a defense did to the processed training set.

    ``keep`` marks surviving rows and ``labels`` holds their (possibly
    relabeled) labels for every row of the input.  ``detected`` lists the
    input rows the defense flagged.
    """

    keep: np.ndarray
    labels: np.ndarray
    detected: List[int]
    verdict: Optional[str] = None
    per_class: Optional[list] = None
    trace: Optional[list] = None
    orders: Optional[Dict[int, int]] = None

    def apply(self, data: Dataset) -> Dataset:
        return data.with_labels(self.labels).subset(self.keep)


def run_defense(cfg: ExperimentConfig, data: Dataset, model: Optional[mixtures.ModelSet] = None,
                test: Optional[Dataset] = None, timing: Optional[dict] = None) -> DefenseOutcome:
    """Run the configured defense on processed training data.

    ``model`` is a fitted mixture set for the BIC defense; it is fit here
    when omitted.  ``test`` is only used for the optional per-step accuracy
    column of the BIC trace.
    """
    keep = np.ones(data.T, bool)
    if cfg.defense == "none":
        return DefenseOutcome(keep, data.labels.copy(), [])

    if cfg.defense == "bic":
        if model is None:
            with stage("fit", timing):
                model = mixtures.fit_models(data, cfg.m_max, cfg.seed)
        callback = None
        if cfg.per_step_accuracy and test is not None:
            train = victim_trainer(cfg)

            def accuracy_without(mask):
                kept = data.subset(~mask)
                if np.unique(kept.labels).size < 2:
                    return None
                return evaluation.test_accuracy(train(kept), test)

            def callback(state):
                return accuracy_without(state.detected())

        with stage("defend", timing):
            _, summary, _ = sanitizer.sanitize(data, model, n_jobs=cfg.n_jobs, step_callback=callback)
            if callback is not None:
                summary.trace[0].accuracy = accuracy_without(np.zeros(data.T, bool))
        detected = np.flatnonzero(summary.detected)
        return DefenseOutcome(~summary.detected, data.labels.copy(), detected.tolist(),
                              summary.verdict, summary.per_class, summary.trace,
                              {c: model.mixtures[c].M for c in model.classes})

    with stage("defend", timing):
        if cfg.defense == "knn":
            relabeled = baselines.knn_defend(data, baselines.KnnConfig(cfg.knn_k, cfg.knn_distance))
            changed = np.flatnonzero(relabeled.labels != data.labels)
            return DefenseOutcome(keep, relabeled.labels.copy(), changed.tolist())
        if cfg.defense == "svd":
            if cfg.svd_epsilon == "truth":
                if data.poison_truth is None:
                    raise ValueError("svd_epsilon=truth needs ground truth")
                eps = float(data.poison_truth.mean())
            else:
                eps = float(cfg.svd_epsilon)
            rows = data.with_features(data.X)
            rows.ids = np.arange(data.T)
            kept = baselines.svd_defend(rows, victim_trainer(cfg), baselines.SvdConfig(eps, cfg.svd_beta))
            keep = np.zeros(data.T, bool)
            keep[kept.ids] = True
            return DefenseOutcome(keep, data.labels.copy(), np.flatnonzero(~keep).tolist())
    raise PipelineError("config", f"unknown defense {cfg.defense!r}")


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def emit_trace(trace, path, with_accuracy: Optional[bool] = None):
    """Write the sanitizer trace as CSV.

    The ``accuracy`` column is added when ``with_accuracy`` is true, or,
    when it is ``None``, when any row carries an accuracy.
    """
    trace = list(trace)
    if not trace:
        raise ValueError("empty trace")
    if with_accuracy is None:
        with_accuracy = any(row.accuracy is not None for row in trace)
    header = TRACE_HEADER + (["accuracy"] if with_accuracy else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in trace:
            cells = [row.step, row.bic, row.num_detected, row.action, row.target_class,
                     row.target_component, row.case]
            if with_accuracy:
                cells.append(row.accuracy)
            writer.writerow([_fmt(c) for c in cells])


def trace_records(trace) -> List[dict]:
    return [
        {"step": r.step, "bic": float(r.bic), "num_detected": r.num_detected, "action": r.action,
         "class": r.target_class, "component": r.target_component, "case": r.case,
         "delta_bic": float(r.delta_bic), "accuracy": r.accuracy}
        for r in trace
    ]


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


class OutputSet:
    """Files written by one run; removed again if the run fails."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.created_dir = not self.out_dir.exists()
        self.paths: List[Path] = []

    def path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / name
        self.paths.append(p)
        return p

    def cleanup(self):
        for p in self.paths:
            if p.is_file():
                p.unlink()
        if self.created_dir and self.out_dir.exists() and not any(self.out_dir.iterdir()):
            self.out_dir.rmdir()


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------

def _accuracy(cfg, data: Dataset, test: Dataset) -> float:
    if np.unique(data.labels).size < 2:
        raise ValueError("training set has fewer than two classes")
    return evaluation.test_accuracy(victim_trainer(cfg)(data), test)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> dict:
    """Split, attack, defend and evaluate; returns the report dictionary.

    With ``write`` the report, the BIC trace (for the BIC defense) and the
    sanitized training set are written to ``cfg.out_dir``.  On any failure
    the files written so far are removed and a :class:`PipelineError` names
    the failing stage.
    """
    timing: Dict[str, float] = {}
    outputs = OutputSet(cfg.out_dir)
    t0 = time.perf_counter()
    try:
        with stage("config"):
            cfg.validate()
        with stage("load", timing):
            full = load_dataset(cfg.dataset, cfg.format, cfg.n_classes)
            fmt = cfg.format or ("csv" if str(cfg.dataset).endswith(".csv") else "sparse")
        with stage("attack", timing):
            train, test, pools = attacks.split_pools(full, cfg.fractions, cfg.seed)
            poisoned = make_attack(cfg, train, pools)
            raw = poisoned.dataset
            truth = poisoned.truth
        with stage("evaluate", timing):
            ptrain, ptest, pclean, _ = preprocess(raw, test, train)
            clean_acc = _accuracy(cfg, pclean, ptest)
            poisoned_acc = clean_acc if not truth.any() else _accuracy(cfg, ptrain, ptest)
        outcome = run_defense(cfg, ptrain, test=ptest, timing=timing)
        with stage("evaluate", timing):
            sanitized_acc = _accuracy(cfg, outcome.apply(ptrain), ptest)
            metrics = evaluation.detection_metrics(outcome.detected, truth)

        report = {
            "config": cfg.to_dict(),
            "n_train": raw.T,
            "n_test": test.T,
            "n_poisoned": int(truth.sum()),
            "accuracies": {
                "clean_baseline": clean_acc,
                "poisoned": poisoned_acc,
                "sanitized": sanitized_acc,
            },
            "tpr": metrics.tpr,
            "fpr": metrics.fpr,
            "num_detected": len(outcome.detected),
            "removed_sample_ids": [int(i) for i in np.flatnonzero(~outcome.keep)],
            "relabeled_sample_ids": [int(i) for i in np.flatnonzero(outcome.labels != raw.labels)],
            "hypothesis": outcome.verdict,
            "per_class": outcome.per_class,
            "mixture_orders": ({str(c): m for c, m in outcome.orders.items()}
                               if outcome.orders else None),
            "bic_trace": trace_records(outcome.trace) if outcome.trace else None,
        }
        timing["total"] = time.perf_counter() - t0
        report["timing"] = timing

        if write:
            with stage("write"):
                suffix = ".csv" if fmt == "csv" else (Path(cfg.dataset).suffix or ".txt")
                save_dataset(outcome.apply(raw), outputs.path(f"sanitized{suffix}"), fmt)
                if outcome.trace:
                    emit_trace(outcome.trace, outputs.path("bic_trace.csv"))
                outputs.path("report.json").write_text(dumps_report(report))
        return report
    except PipelineError:
        outputs.cleanup()
        raise
    except Exception as exc:
        outputs.cleanup()
        raise PipelineError("run", f"{type(exc).__name__}: {exc}") from exc


def strip_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}
