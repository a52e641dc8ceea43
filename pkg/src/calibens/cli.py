"""Command-line pipeline: gen, train-heads, train-meta, evaluate, report.

Every command accepts ``--config FILE`` with a JSON object whose keys match
the long flag names (dashes as underscores); explicit flags override file
values, and one file can carry the keys for the whole pipeline. All
randomness in a run derives from one ``--seed``; fixed offsets give each
stage its own stream (heads: seed+1+i, splits: seed+1000, combiner models:
seed+2000+kind tag).

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 training error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .combiners import (
    KIND_TAGS,
    KINDS,
    HeadOutputs,
    MetaTrainConfig,
    build_metamodel,
    combine_average,
    combine_metamodel,
    combine_vote,
    load_metamodel,
    param_count,
    save_metamodel,
    train_metamodel,
)
from .data import SynthSpec, load_dataset, save_dataset, split, synth_clusters
from .errors import (
    CalibensError,
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    LabelError,
    TrainingError,
)
from .heads import HeadTrainConfig, head_predict, load_head, save_head, train_head_family
from .metrics import calibration_report, predictions_from_probs, write_reliability_csv
from .numerics import derive_seed, softmax

JOBS_ENV_VAR = "CALIB_ENSEMBLE_JOBS"

_SPLIT_STREAM = 1000
_HEAD_STREAM = 1
_META_STREAM = 2000
_GEN_TEST_STREAM = 500000  # far from the other offsets so streams never coincide


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=2) + "\n")


def _load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON config: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return cfg


def _resolve(args, defaults: dict) -> dict:
    """Merge defaults < config file < explicit flags."""
    file_cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = file_cfg.get(key, default)
        out[key] = value
    return out


def _default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV_VAR)
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{JOBS_ENV_VAR}={raw!r} is not an integer") from None


def _parse_meta_kinds(raw) -> list[str]:
    if raw is None or raw == "" or raw == "none":
        return []
    names = raw.split(",") if isinstance(raw, str) else list(raw)
    kinds = []
    for name in names:
        name = name.strip()
        if name == "all":
            kinds.extend(k for k in KINDS if k not in kinds)
            continue
        if name not in KINDS:
            raise ConfigError(f"unknown combiner kind {name!r}; expected one of {KINDS} or 'all'")
        if name not in kinds:
            kinds.append(name)
    return kinds


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

GEN_DEFAULTS = {
    "kind": "clusters",
    "classes": 10,
    "dim": 16,
    "n": 4000,
    "test_n": None,
    "sep": 6.0,
    "noise": 0.2,
    "seed": 0,
    "out": "data",
}


def cmd_gen(args) -> int:
    cfg = _resolve(args, GEN_DEFAULTS)
    if cfg["kind"] != "clusters":
        raise ConfigError(f"unknown generator kind {cfg['kind']!r}; expected 'clusters'")
    test_n = cfg["test_n"] if cfg["test_n"] is not None else cfg["n"]
    train_spec = SynthSpec(
        num_classes=int(cfg["classes"]),
        dim=int(cfg["dim"]),
        num_samples=int(cfg["n"]),
        cluster_separation=float(cfg["sep"]),
        label_noise=float(cfg["noise"]),
        seed=int(cfg["seed"]),
    )
    test_spec = SynthSpec(
        num_classes=train_spec.num_classes,
        dim=train_spec.dim,
        num_samples=int(test_n),
        cluster_separation=train_spec.cluster_separation,
        label_noise=train_spec.label_noise,
        seed=derive_seed(train_spec.seed, _GEN_TEST_STREAM),
    )
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    train = synth_clusters(train_spec)
    test = synth_clusters(test_spec)
    save_dataset(train, out_dir / "train.fds")
    save_dataset(test, out_dir / "test.fds")
    print(f"wrote {out_dir / 'train.fds'} ({train.n} samples)")
    print(f"wrote {out_dir / 'test.fds'} ({test.n} samples)")
    return 0


# ---------------------------------------------------------------------------
# train-heads
# ---------------------------------------------------------------------------

TRAIN_HEADS_DEFAULTS = {
    "train": None,
    "m": 5,
    "seed": 0,
    "val_fraction": 0.1,
    "jobs": None,
    "out": "artifacts",
    "lr": 0.1,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "batch_size": 128,
    "max_epochs": 100,
    "plateau_factor": 0.5,
    "plateau_patience": 5,
    "early_stop_patience": 15,
}


def _head_train_config(cfg, seed=0) -> HeadTrainConfig:
    return HeadTrainConfig(
        initial_lr=float(cfg["lr"]),
        momentum=float(cfg["momentum"]),
        weight_decay=float(cfg["weight_decay"]),
        batch_size=int(cfg["batch_size"]),
        max_epochs=int(cfg["max_epochs"]),
        plateau_factor=float(cfg["plateau_factor"]),
        plateau_patience=int(cfg["plateau_patience"]),
        early_stop_patience=int(cfg["early_stop_patience"]),
        seed=seed,
    )


def _head_config_echo(cfg) -> dict:
    return {
        "initial_lr": float(cfg["lr"]),
        "momentum": float(cfg["momentum"]),
        "weight_decay": float(cfg["weight_decay"]),
        "batch_size": int(cfg["batch_size"]),
        "max_epochs": int(cfg["max_epochs"]),
        "plateau_factor": float(cfg["plateau_factor"]),
        "plateau_patience": int(cfg["plateau_patience"]),
        "early_stop_patience": int(cfg["early_stop_patience"]),
    }


def _best_epoch(history) -> tuple[int | None, float | None]:
    if not history:
        return None, None
    best = min(history, key=lambda rec: rec[2])
    return best[0], best[2]


def cmd_train_heads(args) -> int:
    cfg = _resolve(args, TRAIN_HEADS_DEFAULTS)
    if cfg["train"] is None:
        raise ConfigError("missing training dataset path (--train)")
    m = int(cfg["m"])
    if m < 1:
        raise ConfigError(f"head count must be >= 1, got {m}")
    seed = int(cfg["seed"])
    jobs = int(cfg["jobs"]) if cfg["jobs"] is not None else _default_jobs()
    dataset = load_dataset(cfg["train"])
    train, val = split(dataset, float(cfg["val_fraction"]), derive_seed(seed, _SPLIT_STREAM))
    heads = train_head_family(
        train, val, m, derive_seed(seed, _HEAD_STREAM), _head_train_config(cfg), jobs=jobs
    )
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, head in enumerate(heads):
        filename = f"head_{i}.hdw"
        save_head(head, out_dir / filename)
        best_epoch, best_val = _best_epoch(head.training_history)
        entries.append(
            {
                "index": i,
                "name": f"Head {i + 1}",
                "seed": head.seed,
                "file": filename,
                "epochs_run": len(head.training_history),
                "best_epoch": best_epoch,
                "best_val_loss": best_val,
                "history": [list(rec) for rec in head.training_history],
            }
        )
    _write_json(
        out_dir / "heads.json",
        {
            "version": __version__,
            "seed": seed,
            "m": m,
            "train_path": str(cfg["train"]),
            "val_fraction": float(cfg["val_fraction"]),
            "config": _head_config_echo(cfg),
            "heads": entries,
        },
    )
    print(f"wrote {m} head file(s) and heads.json to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train-meta
# ---------------------------------------------------------------------------

TRAIN_META_DEFAULTS = {
    "kind": None,
    "train": None,
    "heads_dir": "artifacts",
    "seed": 0,
    "val_fraction": 0.1,
    "out": None,
    "meta_input": "probs",
    "epochs": 20,
    "lr": 2e-4,
    "momentum": 0.9,
    "weight_decay": 0.0,
    "batch_size": 128,
    "plateau_factor": 0.5,
    "plateau_patience": 3,
    "dropout": 0.5,
}


def _discover_heads(heads_dir) -> list:
    heads_dir = Path(heads_dir)
    if not heads_dir.is_dir():
        raise DataError(f"heads directory not found: {heads_dir}")
    paths = []
    i = 0
    while (heads_dir / f"head_{i}.hdw").exists():
        paths.append(heads_dir / f"head_{i}.hdw")
        i += 1
    if not paths:
        raise DataError(f"no head_*.hdw files found in {heads_dir}")
    return [load_head(p) for p in paths]


def _head_outputs(heads, features, meta_input: str) -> HeadOutputs:
    logits = [head_predict(h, features) for h in heads]
    if meta_input == "logits":
        return HeadOutputs([l.copy() for l in logits], rows_are_probs=False)
    return HeadOutputs([softmax(l) for l in logits])


def _meta_config_echo(cfg) -> dict:
    return {
        "epochs": int(cfg["epochs"]),
        "initial_lr": float(cfg["lr"]),
        "momentum": float(cfg["momentum"]),
        "weight_decay": float(cfg["weight_decay"]),
        "batch_size": int(cfg["batch_size"]),
        "plateau_factor": float(cfg["plateau_factor"]),
        "plateau_patience": int(cfg["plateau_patience"]),
        "dropout_p": float(cfg["dropout"]),
    }


def cmd_train_meta(args) -> int:
    cfg = _resolve(args, TRAIN_META_DEFAULTS)
    if cfg["kind"] is None:
        raise ConfigError("missing combiner kind (--kind)")
    kind = str(cfg["kind"])
    if kind not in KINDS:
        raise ConfigError(f"unknown combiner kind {kind!r}; expected one of {KINDS}")
    if cfg["train"] is None:
        raise ConfigError("missing training dataset path (--train)")
    if cfg["meta_input"] not in ("probs", "logits"):
        raise ConfigError(f"meta input must be 'probs' or 'logits', got {cfg['meta_input']!r}")
    seed = int(cfg["seed"])
    dataset = load_dataset(cfg["train"])
    train, val = split(dataset, float(cfg["val_fraction"]), derive_seed(seed, _SPLIT_STREAM))
    heads = _discover_heads(cfg["heads_dir"])
    train_outputs = _head_outputs(heads, train.features, cfg["meta_input"])
    val_outputs = _head_outputs(heads, val.features, cfg["meta_input"])

    meta_seed = derive_seed(seed, _META_STREAM + KIND_TAGS[kind])
    meta = build_metamodel(
        kind, len(heads), dataset.num_classes, meta_seed, dropout_p=float(cfg["dropout"])
    )
    train_cfg = MetaTrainConfig(
        epochs=int(cfg["epochs"]),
        initial_lr=float(cfg["lr"]),
        momentum=float(cfg["momentum"]),
        weight_decay=float(cfg["weight_decay"]),
        batch_size=int(cfg["batch_size"]),
        plateau_factor=float(cfg["plateau_factor"]),
        plateau_patience=int(cfg["plateau_patience"]),
        dropout_p=float(cfg["dropout"]),
        seed=meta_seed,
    )
    trained = train_metamodel(
        meta, train_outputs, train.labels, val_outputs, val.labels, train_cfg
    )
    out_dir = Path(cfg["out"]) if cfg["out"] is not None else Path(cfg["heads_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_metamodel(trained, out_dir / f"meta_{kind}.mmd")
    best_epoch, best_val = _best_epoch(trained.training_history)
    _write_json(
        out_dir / f"meta_{kind}.json",
        {
            "version": __version__,
            "kind": kind,
            "seed": seed,
            "train_path": str(cfg["train"]),
            "val_fraction": float(cfg["val_fraction"]),
            "meta_input": cfg["meta_input"],
            "m": len(heads),
            "num_classes": dataset.num_classes,
            "param_count": trained.param_count,
            "config": _meta_config_echo(cfg),
            "best_epoch": best_epoch,
            "best_val_loss": best_val,
            "history": [list(rec) for rec in trained.training_history],
        },
    )
    print(f"wrote {out_dir / f'meta_{kind}.mmd'}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

EVALUATE_DEFAULTS = {
    "test": None,
    "heads_dir": "artifacts",
    "meta_dir": None,
    "meta": None,
    "bins": 15,
    "norm_degree": 1,
    "meta_input": "probs",
    "out": "results",
}


def _row(name, slug, report, params) -> dict:
    return {
        "name": name,
        "kind": "head" if slug.startswith("head_") else "combiner",
        "accuracy_pct": report.accuracy * 100.0,
        "ece_pct": report.ece * 100.0,
        "mce_pct": report.mce * 100.0,
        "param_count": params,
        "reliability_csv": f"reliability_{slug}.csv",
    }


def cmd_evaluate(args) -> int:
    cfg = _resolve(args, EVALUATE_DEFAULTS)
    if cfg["test"] is None:
        raise ConfigError("missing test dataset path (--test)")
    num_bins = int(cfg["bins"])
    degree = int(cfg["norm_degree"])
    if num_bins < 1:
        raise ConfigError(f"bin count must be >= 1, got {num_bins}")
    if degree < 1:
        raise ConfigError(f"norm degree must be >= 1, got {degree}")
    if cfg["meta_input"] not in ("probs", "logits"):
        raise ConfigError(f"meta input must be 'probs' or 'logits', got {cfg['meta_input']!r}")
    kinds = _parse_meta_kinds(cfg["meta"])
    heads_dir = Path(cfg["heads_dir"])
    meta_dir = Path(cfg["meta_dir"]) if cfg["meta_dir"] is not None else heads_dir

    missing = []
    if not Path(cfg["test"]).exists():
        missing.append(str(cfg["test"]))
    meta_paths = {kind: meta_dir / f"meta_{kind}.mmd" for kind in kinds}
    missing.extend(str(p) for p in meta_paths.values() if not p.exists())
    if missing:
        raise DataError("missing artifact(s): " + ", ".join(missing))

    test = load_dataset(cfg["test"])
    heads = _discover_heads(heads_dir)
    probs = [softmax(head_predict(h, test.features)) for h in heads]

    rows, csvs = [], {}

    def add(name, slug, pred, params):
        report = calibration_report(pred, num_bins, degree)
        rows.append(_row(name, slug, report, params))
        csvs[f"reliability_{slug}.csv"] = report.bins

    for i, head in enumerate(heads):
        pred = predictions_from_probs(probs[i], test.labels)
        add(f"Head {i + 1}", f"head_{i + 1}", pred, head.param_count)

    outputs = HeadOutputs(probs)
    add("Avg.", "avg", combine_average(outputs, test.labels), 0)
    add("Vot.", "vot", combine_vote(outputs, test.labels), 0)

    meta_outputs = outputs
    if cfg["meta_input"] == "logits":
        meta_outputs = HeadOutputs(
            [head_predict(h, test.features) for h in heads], rows_are_probs=False
        )
    for kind in kinds:
        meta = load_metamodel(meta_paths[kind])
        pred = combine_metamodel(meta, meta_outputs, test.labels)
        add(kind, kind.lower(), pred, meta.param_count)

    heads_meta = {}
    heads_json = heads_dir / "heads.json"
    if heads_json.exists():
        with open(heads_json, "r", encoding="utf-8") as fh:
            recorded = json.load(fh)
        heads_meta = {
            "seed": recorded.get("seed"),
            "val_fraction": recorded.get("val_fraction"),
            "config": recorded.get("config"),
        }
    meta_training = {}
    for kind in kinds:
        sidecar = meta_dir / f"meta_{kind}.json"
        if sidecar.exists():
            with open(sidecar, "r", encoding="utf-8") as fh:
                recorded = json.load(fh)
            meta_training[kind] = {
                "seed": recorded.get("seed"),
                "config": recorded.get("config"),
                "meta_input": recorded.get("meta_input"),
            }

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for filename, bins in csvs.items():
        write_reliability_csv(bins, out_dir / filename)
    summary = {
        "version": __version__,
        "seed": heads_meta.get("seed"),
        "config": {
            "test_path": str(cfg["test"]),
            "heads_dir": str(cfg["heads_dir"]),
            "meta_dir": str(meta_dir),
            "m": len(heads),
            "num_bins": num_bins,
            "norm_degree": degree,
            "meta_kinds": kinds,
            "meta_input": cfg["meta_input"],
            "heads_training": heads_meta,
            "meta_training": meta_training,
        },
        "rows": rows,
    }
    _write_json(out_dir / "summary.json", summary)
    print(f"wrote summary.json and {len(csvs)} reliability CSV(s) to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    path = Path(args.summary)
    if not path.exists():
        raise DataError(f"summary file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            summary = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    rows = summary.get("rows")
    if not isinstance(rows, list):
        raise FormatError(f"{path}: missing 'rows' list")
    ordered = sorted(rows, key=lambda r: 0 if r.get("kind") == "head" else 1)
    name_w = max([len("Name")] + [len(str(r.get("name", ""))) for r in ordered])
    params_w = max([len("Params")] + [len(str(r.get("param_count", "")))for r in ordered])
    header = f"{'Name':<{name_w}}  {'Acc':>6}  {'ECE':>6}  {'MCE':>6}  {'Params':>{params_w}}"
    print(header)
    print("-" * len(header))
    for r in ordered:
        try:
            line = (
                f"{r['name']:<{name_w}}  {r['accuracy_pct']:>6.2f}  "
                f"{r['ece_pct']:>6.2f}  {r['mce_pct']:>6.2f}  "
                f"{r['param_count']:>{params_w}}"
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed row {r!r}: {exc}") from None
        print(line)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calibens",
        description="Classifier-ensemble uncertainty calibration pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="JSON config file; flags override its values")

    p = sub.add_parser("gen", help="generate synthetic train/test feature datasets")
    add_config(p)
    p.add_argument("--kind", choices=["clusters"], default=None)
    p.add_argument("--classes", type=int, default=None, help="number of classes")
    p.add_argument("--dim", type=int, default=None, help="feature dimension")
    p.add_argument("--n", type=int, default=None, help="training sample count")
    p.add_argument("--test-n", type=int, default=None, help="test sample count (default: same as --n)")
    p.add_argument("--sep", type=float, default=None, help="cluster separation (sphere radius)")
    p.add_argument("--noise", type=float, default=None, help="label noise fraction in [0, 1)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("train-heads", help="train a family of seeded linear heads")
    add_config(p)
    p.add_argument("--train", default=None, help="training dataset (.fds)")
    p.add_argument("--m", type=int, default=None, help="number of heads")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--jobs", type=int, default=None,
                   help=f"concurrent head trainings (default: ${JOBS_ENV_VAR} or 1)")
    p.add_argument("--out", default=None, help="artifact directory")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--plateau-factor", type=float, default=None)
    p.add_argument("--plateau-patience", type=int, default=None)
    p.add_argument("--early-stop-patience", type=int, default=None)
    p.set_defaults(handler=cmd_train_heads)

    p = sub.add_parser("train-meta", help="train one combiner model on head outputs")
    add_config(p)
    p.add_argument("--kind", choices=list(KINDS), default=None)
    p.add_argument("--train", default=None, help="training dataset (.fds)")
    p.add_argument("--heads-dir", default=None, help="directory with head_*.hdw")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--out", default=None, help="output directory (default: heads dir)")
    p.add_argument("--meta-input", choices=["probs", "logits"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--plateau-factor", type=float, default=None)
    p.add_argument("--plateau-patience", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.set_defaults(handler=cmd_train_meta)

    p = sub.add_parser("evaluate", help="evaluate heads and combiners on a test set")
    add_config(p)
    p.add_argument("--test", default=None, help="test dataset (.fds)")
    p.add_argument("--heads-dir", default=None)
    p.add_argument("--meta-dir", default=None, help="directory with meta_*.mmd (default: heads dir)")
    p.add_argument("--meta", default=None,
                   help="comma-separated combiner kinds to evaluate, or 'all'/'none'")
    p.add_argument("--bins", type=int, default=None, help="number of confidence bins")
    p.add_argument("--norm-degree", type=int, default=None)
    p.add_argument("--meta-input", choices=["probs", "logits"], default=None)
    p.add_argument("--out", default=None, help="results directory")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report", help="print a summary.json as a fixed-width table")
    p.add_argument("summary", help="path to summary.json")
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, DimensionError, LabelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except CalibensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
