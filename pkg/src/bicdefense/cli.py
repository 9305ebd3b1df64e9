"""Command-line interface.

Subcommands::

    synth     write a synthetic Gaussian (CSV) or topic-document (sparse) dataset
    fit       fit per-class mixtures and save them as JSON
    poison    split a dataset and inject an attack into the training part
    defend    sanitize a training set with the BIC defense or a baseline
    evaluate  train the victim on one set and report accuracy on another
    run       the whole pipeline, writing report.json, bic_trace.csv and the sanitized set

Every subcommand except ``synth`` reads an optional ``--config`` key-value
file; flags override values from the file.  Failures exit with a
stage-specific nonzero code and remove files written by the failed call.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import attacks, evaluation, mixtures, synth
from .config import DEFENSES, VICTIMS, ConfigError, build_config
from .data import CONTINUOUS, Scaler, load_dataset, save_dataset
from .pipeline import (
    STAGE_CODES,
    OutputSet,
    PipelineError,
    dumps_report,
    emit_trace,
    make_attack,
    preprocess,
    run_defense,
    run_experiment,
    stage,
    trace_records,
)

# flag destination -> config key
_OVERRIDES = ("dataset", "format", "n_classes", "split", "attack", "attack_index", "attack_budget",
              "defense", "victim", "seed", "m_max", "knn_k", "knn_distance", "svd_epsilon",
              "svd_beta", "per_step_accuracy", "threads", "out_dir")


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("experiment settings (override --config)")
    g.add_argument("--config", help="key = value experiment file")
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir", dest="out_dir")
    g.add_argument("--format", choices=["csv", "sparse"], help="dataset format (default: by extension)")
    g.add_argument("--n-classes", dest="n_classes", type=int)
    g.add_argument("--split", help="train,test,pool fractions, e.g. 0.5,0.25,0.25")
    g.add_argument("--attack", help="injections donor>victim:count[,...]")
    g.add_argument("--attack-index", dest="attack_index", type=int,
                   help="multiclass attack: donors 1..i spread their budget over other classes")
    g.add_argument("--attack-budget", dest="attack_budget", type=int, help="per-donor budget")
    g.add_argument("--defense", choices=DEFENSES)
    g.add_argument("--victim", choices=VICTIMS)
    g.add_argument("--m-max", dest="m_max", type=int, help="initial upper bound on mixture order")
    g.add_argument("--knn-k", dest="knn_k", type=int)
    g.add_argument("--knn-distance", dest="knn_distance", choices=["euclidean", "cosine"])
    g.add_argument("--svd-epsilon", dest="svd_epsilon", help="removal fraction, or 'truth'")
    g.add_argument("--svd-beta", dest="svd_beta", type=int)
    g.add_argument("--per-step-accuracy", dest="per_step_accuracy", action="store_const", const=True,
                   help="retrain the victim after every sanitizer step")
    g.add_argument("--threads", type=int, help="worker threads for trial evaluation (0 = all cores)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bicdefense",
                                     description="BIC mixture-model defense against label-flipping poisoning")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _config_parent()

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--kind", choices=["gaussian", "topics"], default="gaussian")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=1000)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--dim", type=int, default=None, help="feature dimension or vocabulary size")
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--subclusters", type=int, default=None,
                   help="clusters (gaussian, default 1) or sub-topics (topics, default 3) per class")
    p.add_argument("--spread", type=float, default=None)
    p.add_argument("--doc-length", type=int, default=120)
    p.add_argument("--overlap", type=float, default=0.6)
    p.add_argument("--concentration", type=float, default=0.3)

    p = sub.add_parser("fit", parents=[common], help="fit per-class mixtures")
    p.add_argument("data", nargs="?", help="training set (or 'dataset' in the config)")
    p.add_argument("--out", help="model JSON (default: <out-dir>/model.json)")

    p = sub.add_parser("poison", parents=[common], help="split and attack a dataset")
    p.add_argument("data", nargs="?", help="full dataset (or 'dataset' in the config)")

    p = sub.add_parser("defend", parents=[common], help="sanitize a training set")
    p.add_argument("train")
    p.add_argument("--truth", help="0/1 poison flags, one per line")
    p.add_argument("--model", help="mixtures from `fit` (BIC defense); fit here when omitted")
    p.add_argument("--test", help="test set for the per-step accuracy column")

    p = sub.add_parser("evaluate", parents=[common], help="victim accuracy")
    p.add_argument("train")
    p.add_argument("test")

    p = sub.add_parser("run", parents=[common], help="full pipeline")
    p.add_argument("data", nargs="?", help="dataset (or 'dataset' in the config)")
    return parser


def _config(args, need_dataset=True):
    overrides = {k: getattr(args, k, None) for k in _OVERRIDES}
    if getattr(args, "data", None):
        overrides["dataset"] = args.data
    with stage("config"):
        return build_config(args.config, overrides).validate(need_dataset=need_dataset)


def _suffix(fmt, path):
    return ".csv" if fmt == "csv" else (Path(path).suffix or ".txt")


def _fmt_of(cfg, path):
    return cfg.format or ("csv" if str(path).endswith(".csv") else "sparse")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    with stage("write"):
        if args.kind == "gaussian":
            data = synth.gaussian_blobs(args.n_per_class, args.classes, args.dim or 5, args.separation,
                                        args.scale, args.subclusters or 1, args.spread or 0.0, args.seed)
            save_dataset(data, args.out, "csv")
        else:
            data = synth.topic_documents(args.n_per_class, args.classes, args.dim or 200, args.doc_length,
                                         args.overlap, args.concentration, args.subclusters or 3,
                                         0.9 if args.spread is None else args.spread, args.seed)
            save_dataset(data, args.out, "sparse")
    print(f"wrote {data.T} samples ({data.n_classes} classes, d={data.d}) to {args.out}")


def cmd_fit(args):
    cfg = _config(args)
    outputs = OutputSet(Path(args.out).parent if args.out else cfg.out_dir)
    try:
        with stage("load"):
            data = load_dataset(cfg.dataset, cfg.format, cfg.n_classes)
        with stage("fit"):
            pdata, scaler = preprocess(data)
            model = mixtures.fit_models(pdata, cfg.m_max, cfg.seed)
        with stage("write"):
            payload = {
                "feature_kind": data.feature_kind,
                "scaler": scaler.to_dict() if scaler else None,
                "seed": cfg.seed,
                "model": model.to_dict(),
            }
            out = outputs.path(Path(args.out).name if args.out else "model.json")
            out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except PipelineError:
        outputs.cleanup()
        raise
    print(f"fitted orders {[model.mixtures[c].M for c in model.classes]} -> {out}")


def cmd_poison(args):
    cfg = _config(args)
    outputs = OutputSet(cfg.out_dir)
    try:
        with stage("load"):
            full = load_dataset(cfg.dataset, cfg.format, cfg.n_classes)
            fmt = _fmt_of(cfg, cfg.dataset)
        with stage("attack"):
            train, test, pools = attacks.split_pools(full, cfg.fractions, cfg.seed)
            poisoned = make_attack(cfg, train, pools)
        with stage("write"):
            sfx = _suffix(fmt, cfg.dataset)
            save_dataset(poisoned.dataset, outputs.path(f"train{sfx}"), fmt)
            save_dataset(test, outputs.path(f"test{sfx}"), fmt)
            outputs.path("train_truth.txt").write_text(
                "".join(f"{int(v)}\n" for v in poisoned.truth))
    except PipelineError:
        outputs.cleanup()
        raise
    print(f"train {poisoned.dataset.T} ({int(poisoned.truth.sum())} poisoned), test {test.T} -> {cfg.out_dir}")


def _read_truth(path, n):
    values = np.loadtxt(path, dtype=int, ndmin=1)
    if values.shape != (n,) or not np.isin(values, (0, 1)).all():
        raise ValueError(f"{path}: expected {n} lines of 0/1")
    return values.astype(bool)


def cmd_defend(args):
    cfg = _config(args, need_dataset=False)
    outputs = OutputSet(cfg.out_dir)
    timing = {}
    try:
        with stage("load", timing):
            train = load_dataset(args.train, cfg.format, cfg.n_classes)
            fmt = _fmt_of(cfg, args.train)
            if args.truth:
                train.poison_truth = _read_truth(args.truth, train.T)
            test = load_dataset(args.test, cfg.format, train.n_classes) if args.test else None
            model, scaler = None, None
            if args.model:
                payload = json.loads(Path(args.model).read_text())
                model = mixtures.ModelSet.from_dict(payload["model"])
                if payload.get("scaler"):
                    scaler = Scaler.from_dict(payload["scaler"])
        with stage("defend", timing):
            if train.feature_kind == CONTINUOUS:
                scaler = scaler or Scaler().fit(train.X)
                ptrain = train.with_features(scaler.transform(train.X))
                ptest = test.with_features(scaler.transform(test.X)) if test is not None else None
            else:
                ptrain, ptest = train, test
        outcome = run_defense(cfg, ptrain, model=model, test=ptest, timing=timing)
        report = {
            "defense": cfg.defense,
            "n_train": train.T,
            "num_detected": len(outcome.detected),
            "detected_sample_ids": outcome.detected,
            "removed_sample_ids": [int(i) for i in np.flatnonzero(~outcome.keep)],
            "hypothesis": outcome.verdict,
            "per_class": outcome.per_class,
            "bic_trace": trace_records(outcome.trace) if outcome.trace else None,
        }
        if train.poison_truth is not None:
            m = evaluation.detection_metrics(outcome.detected, train.poison_truth)
            report.update(tpr=m.tpr, fpr=m.fpr)
        report["timing"] = timing
        with stage("write"):
            save_dataset(outcome.apply(train), outputs.path(f"sanitized{_suffix(fmt, args.train)}"), fmt)
            if outcome.trace:
                emit_trace(outcome.trace, outputs.path("bic_trace.csv"))
            outputs.path("defense.json").write_text(dumps_report(report))
    except PipelineError:
        outputs.cleanup()
        raise
    print(f"{cfg.defense}: {len(outcome.detected)} of {train.T} samples flagged -> {cfg.out_dir}")


def cmd_evaluate(args):
    cfg = _config(args, need_dataset=False)
    with stage("load"):
        train = load_dataset(args.train, cfg.format, cfg.n_classes)
        test = load_dataset(args.test, cfg.format, train.n_classes)
    with stage("evaluate"):
        ptrain, ptest, _ = preprocess(train, test)
        model = evaluation.train_linear(ptrain, cfg.victim, seed=cfg.seed)
        acc = evaluation.test_accuracy(model, ptest)
    print(json.dumps({"victim": cfg.victim, "accuracy": acc}))


def cmd_run(args):
    cfg = _config(args)
    report = run_experiment(cfg)
    acc = report["accuracies"]
    print(f"clean {acc['clean_baseline']:.4f}  poisoned {acc['poisoned']:.4f}  "
          f"sanitized {acc['sanitized']:.4f}  tpr {report['tpr']}  fpr {report['fpr']}  -> {cfg.out_dir}")


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "poison": cmd_poison,
    "defend": cmd_defend,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except PipelineError as exc:
        print(f"bicdefense {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"bicdefense {args.command}: [config] {exc}", file=sys.stderr)
        return STAGE_CODES["config"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
