"""Command-line entry point.

    mobilecaps {train,tune,kfold,evaluate,predict,ablation,report}
        --config run.json [--set key=value ...] [--out DIR]

The run config is one JSON document; ``--set`` applies dot-path overrides
whose values are parsed as JSON when possible (``--set schedule.lr_max=0.003``).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ArrayDataset,
    AugmentConfig,
    balance_classes,
    kfold_split,
    load_dataset,
    make_blob_classification,
    make_blob_severity,
    materialize,
)
from .data.pgm import PGMError, read_pgm
from .data.transforms import preprocess
from .hypertune import Dimension, SearchSpace, optimize, read_trace, write_trace
from .losses import MarginLossConfig
from .metrics import (
    EvalReport,
    average_reports,
    classification_report,
    severity_report,
    severity_to_rale,
)
from .model import VARIANTS, ModelConfig, build_model
from .trainer import (
    CheckpointError,
    ScheduleConfig,
    Snapshot,
    TrainConfig,
    TrainingDiverged,
    ensemble_predict,
    load_ensemble,
    save_ensemble,
    train,
)

log = logging.getLogger("mobilecaps")

COMMANDS = ("train", "tune", "kfold", "evaluate", "predict", "ablation", "report")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_IO = 5

DEFAULT_CONFIG: dict = {
    "seed": None,
    "profile": "desk",
    "task": "classify",
    "variant": "mobilecaps",
    "out": "runs/default",
    "model": {},
    "schedule": {"lr_max": 0.01, "total_epochs": 30, "cycles": 3},
    "optimizer": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-7, "batch_size": 32},
    "margin": {"m_plus": 0.9, "m_minus": 0.1, "lam": 0.5},
    "augment": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(AugmentConfig()).items()},
    "data": {"manifest": None, "image_root": None, "synthetic": None, "balance": None},
    "tune": {"budget": 10, "lr": [1e-5, 1e-1], "cycle_len": [10, 100], "val_fold": 5},
    "kfold": {"k": 5},
    "ensemble": {"normalize": True},
    "class_names": None,
    "snapshots": None,
    "images": [],
}

# sections whose keys are checked against the defaults (``model`` is checked by ModelConfig)
STRICT_SECTIONS = ("schedule", "optimizer", "margin", "augment", "data", "tune", "kfold", "ensemble")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            if path.rstrip(".") in ("", *STRICT_SECTIONS):
                raise ConfigError(f"unknown config key {where!r}")
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "synthetic":
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    return parts, value


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    for text in overrides:
        parts, value = parse_override(text)
        patch: dict = value
        for p in reversed(parts):
            patch = {p: patch}
        cfg = _merge(cfg, patch)
    return cfg


def load_config(path: str | None, overrides: list[str] = (), out: str | None = None) -> dict:
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    cfg = apply_overrides(_merge(DEFAULT_CONFIG, user), list(overrides))
    if out is not None:
        cfg["out"] = out
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["seed"] is None:
        raise ConfigError("seed is mandatory")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
    try:
        mcfg = model_config(cfg)
        schedule_config(cfg)
        train_config(cfg)
        AugmentConfig.from_dict(cfg["augment"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    data = cfg["data"]
    if data["manifest"] is not None:
        if not Path(data["manifest"]).is_file():
            raise ConfigError(f"manifest {data['manifest']} does not exist")
        if data["image_root"] is not None and not Path(data["image_root"]).is_dir():
            raise ConfigError(f"image_root {data['image_root']} does not exist")
    names = cfg["class_names"]
    if names is not None and len(names) != mcfg.num_classes:
        raise ConfigError(f"class_names has {len(names)} entries for {mcfg.num_classes} classes")
    if cfg["kfold"]["k"] < 2:
        raise ConfigError("kfold.k must be >= 2")
    if cfg["tune"]["budget"] < 3:
        raise ConfigError("tune.budget must be >= 3")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def model_config(cfg: dict, **overrides) -> ModelConfig:
    fields = {"profile": cfg["profile"], "task": cfg["task"], "variant": cfg["variant"],
              "init_seed": cfg["seed"], **cfg["model"], **overrides}
    if cfg["profile"] not in ("paper", "desk"):
        raise ValueError(f"unknown profile {cfg['profile']!r}")
    return ModelConfig(**fields)


def schedule_config(cfg: dict) -> ScheduleConfig:
    return ScheduleConfig(**cfg["schedule"])


def train_config(cfg: dict, schedule: ScheduleConfig | None = None) -> TrainConfig:
    opt = cfg["optimizer"]
    return TrainConfig(schedule=schedule or schedule_config(cfg), batch_size=opt["batch_size"],
                       seed=cfg["seed"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
                       margin=MarginLossConfig(**cfg["margin"]))


# ---------------------------------------------------------------------------
# data


def input_size(cfg: dict) -> int:
    return 224 if cfg["profile"] == "paper" else 32


def _synthetic(cfg: dict) -> ArrayDataset:
    synth = dict(cfg["data"]["synthetic"])
    synth.setdefault("size", input_size(cfg))
    synth.setdefault("seed", cfg["seed"])
    if synth["size"] != input_size(cfg):
        raise ConfigError(f"synthetic size {synth['size']} does not match the {cfg['profile']} input")
    maker = make_blob_classification if cfg["task"] == "classify" else make_blob_severity
    try:
        return maker(**synth)
    except TypeError as exc:
        raise ConfigError(f"bad data.synthetic entry: {exc}") from exc


def load_splits(cfg: dict, balance: bool = True) -> tuple[ArrayDataset, ArrayDataset | None]:
    """Training partition (balanced if requested) and the held-out test split, if any."""
    data = cfg["data"]
    if data["synthetic"] is not None:
        return _synthetic(cfg), None
    if data["manifest"] is None:
        raise ConfigError("data.manifest or data.synthetic must be set")
    try:
        loaded = load_dataset(data["manifest"], data["image_root"])
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load manifest: {exc}") from exc
    for err in loaded.errors:
        print(f"warning: {err}", file=sys.stderr)
    need = "label" if cfg["task"] == "classify" else "severity"
    records = [r for r in loaded.records if getattr(r, need) is not None]
    train_recs = [r for r in records if r.split != "test"]
    test_recs = [r for r in records if r.split == "test"]
    if not train_recs:
        raise DataError(f"no usable training rows with a {need} in {data['manifest']}")
    if balance and data["balance"] and cfg["task"] == "classify":
        # balance strictly inside the training partition to keep the test split clean
        train_recs = balance_classes(train_recs, int(data["balance"]), np.random.default_rng(cfg["seed"]),
                                     num_classes=model_config(cfg).num_classes)
    aug = AugmentConfig.from_dict(cfg["augment"])
    size = input_size(cfg)
    train_set = materialize(train_recs, loaded.images, size, aug)
    test_set = materialize(test_recs, loaded.images, size, aug) if test_recs else None
    return train_set, test_set


def eval_split(train_set: ArrayDataset, test_set: ArrayDataset | None) -> tuple[str, ArrayDataset]:
    return ("test", test_set) if test_set is not None and len(test_set) else ("train", train_set)


# ---------------------------------------------------------------------------
# outputs


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def write_run_manifest(out: Path, command: str, cfg: dict, dataset: ArrayDataset | None) -> None:
    write_json(out / "run_manifest.json", {
        "command": command,
        "version": __version__,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "dataset_hash": dataset.fingerprint() if dataset is not None else None,
        "config": cfg,
    })


def report_for(task: str, preds: np.ndarray, data: ArrayDataset, class_names=None) -> EvalReport:
    if task == "severity":
        return severity_report(preds, data.rale)
    return classification_report(preds, data.labels, class_names=class_names)


def save_predictions(path: Path, task: str, preds: np.ndarray, data: ArrayDataset, split: str) -> None:
    entry = {"task": task, "split": split, "paths": list(data.paths)}
    if task == "severity":
        entry.update(p=[round(float(v), 9) for v in preds], rale=[int(v) for v in data.rale])
    else:
        entry.update(scores=np.round(preds, 9).tolist(), labels=[int(v) for v in data.labels])
    write_json(path, entry)


def run_training(cfg: dict, out: Path, train_set: ArrayDataset, test_set: ArrayDataset | None,
                 command: str = "train", schedule: ScheduleConfig | None = None, **model_overrides) -> dict:
    """Train, persist snapshots/history/report under ``out`` and return the report dict."""
    model = build_model(model_config(cfg, **model_overrides))
    tcfg = train_config(cfg, schedule)
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, command, cfg, train_set)
    try:
        result = train(model, train_set, tcfg, val_data=test_set)
        snapshots, history = result.snapshots, result.history
    except TrainingDiverged as exc:
        if exc.snapshots:
            save_ensemble(out / "snapshots", exc.snapshots)
        write_json(out / "history.json", exc.history)
        raise
    write_json(out / "history.json", history)
    save_ensemble(out / "snapshots", snapshots)
    split, data = eval_split(train_set, test_set)
    preds = ensemble_predict(snapshots, data.images, model, normalize=cfg["ensemble"]["normalize"])
    report = report_for(cfg["task"], preds, data, cfg["class_names"]).to_dict()
    report["split"] = split
    report["snapshots"] = [s.epoch for s in snapshots]
    write_json(out / "report.json", report)
    save_predictions(out / "predictions.json", cfg["task"], preds, data, split)
    return report


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: dict, out: Path) -> int:
    train_set, test_set = load_splits(cfg)
    report = run_training(cfg, out, train_set, test_set)
    print(summary_line("train", report))
    return EXIT_OK


def _holdout(cfg: dict, data: ArrayDataset) -> tuple[ArrayDataset, ArrayDataset]:
    """Patient-wise holdout: the first fold of a ``val_fold``-way split."""
    from .data.manifest import ManifestRecord

    recs = [ManifestRecord(p, pid, label=0) for p, pid in zip(data.paths, data.patient_ids)]
    k = min(cfg["tune"]["val_fold"], len(set(data.patient_ids)))
    tr, va = kfold_split(recs, max(k, 2), cfg["seed"])[0]
    return data.subset(tr), data.subset(va)


def cmd_tune(cfg: dict, out: Path) -> int:
    train_set, test_set = load_splits(cfg)
    if test_set is None:
        train_set, test_set = _holdout(cfg, train_set)
    t = cfg["tune"]
    space = SearchSpace((Dimension("lr", *t["lr"], log=True),
                         Dimension("cycle_len", *t["cycle_len"], integer=True)))
    key = "r2" if cfg["task"] == "severity" else "accuracy"
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, "tune", cfg, train_set)

    def objective(params: dict) -> float:
        # one cosine cycle, scored on the held-out split
        sched = ScheduleConfig(params["lr"], int(params["cycle_len"]), 1)
        model = build_model(model_config(cfg))
        tcfg = train_config(cfg, sched)
        tcfg.eval_train = False
        result = train(model, train_set, tcfg)
        preds = ensemble_predict(result.snapshots, test_set.images, model)
        value = getattr(report_for(cfg["task"], preds, test_set), key)
        return float("nan") if value is None else float(value)

    trace_path = out / "trace.jsonl"
    previous = read_trace(trace_path) if trace_path.exists() else None
    trace: list = list(previous or [])

    def record(obs):
        trace.append(obs)
        write_trace(trace_path, trace)
        log.info("trial %d: %s -> %.6f%s", len(trace), obs.params, obs.value, " (failed)" if obs.failed else "")

    result = optimize(objective, space, t["budget"], seed=cfg["seed"], initial_trace=previous,
                      on_observation=record)
    write_trace(trace_path, result.trace)
    best = copy.deepcopy(cfg)
    cycles = cfg["schedule"]["cycles"]
    best["schedule"] = {"lr_max": result.best.params["lr"],
                        "total_epochs": int(result.best.params["cycle_len"]) * cycles, "cycles": cycles}
    write_json(out / "best_config.json", best)
    print(f"tune\tbest_{key}\t{result.best.value:.6f}\tlr\t{result.best.params['lr']:.6g}"
          f"\tcycle_len\t{result.best.params['cycle_len']}")
    return EXIT_OK


def cmd_kfold(cfg: dict, out: Path) -> int:
    data, _ = load_splits(cfg, balance=False)  # oversampled copies would leak across folds
    from .data.manifest import ManifestRecord

    recs = [ManifestRecord(p, pid, label=0) for p, pid in zip(data.paths, data.patient_ids)]
    try:
        folds = kfold_split(recs, cfg["kfold"]["k"], cfg["seed"])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    reports = []
    for i, (tr, va) in enumerate(folds, start=1):
        rep = run_training(cfg, out / f"fold_{i}", data.subset(tr), data.subset(va), command="kfold")
        reports.append(EvalReport.from_dict(rep))
        print(summary_line(f"fold_{i}", rep))
    avg = average_reports(reports).to_dict()
    write_json(out / "report.json", {"folds": [r.to_dict() for r in reports], "average": avg})
    write_run_manifest(out, "kfold", cfg, data)
    print(summary_line("average", avg))
    return EXIT_OK


def _snapshot_dir(cfg: dict, out: Path) -> Path:
    return Path(cfg["snapshots"]) if cfg["snapshots"] else out / "snapshots"


def _load_snapshots(cfg: dict, out: Path) -> list[Snapshot]:
    directory = _snapshot_dir(cfg, out)
    try:
        snaps = load_ensemble(directory)
    except FileNotFoundError as exc:
        raise OSError(f"no snapshot ensemble at {directory}") from exc
    if not snaps:
        raise DataError(f"snapshot index at {directory} lists no snapshots")
    return snaps


def cmd_evaluate(cfg: dict, out: Path) -> int:
    snaps = _load_snapshots(cfg, out)
    train_set, test_set = load_splits(cfg)
    split, data = eval_split(train_set, test_set)
    preds = ensemble_predict(snaps, data.images, normalize=cfg["ensemble"]["normalize"])
    report = report_for(cfg["task"], preds, data, cfg["class_names"]).to_dict()
    report["split"] = split
    report["snapshots"] = [s.epoch for s in snaps]
    write_json(out / "report.json", report)
    save_predictions(out / "predictions.json", cfg["task"], preds, data, split)
    print(summary_line("evaluate", report))
    return EXIT_OK


def _predict_inputs(cfg: dict) -> tuple[list[str], np.ndarray]:
    size = input_size(cfg)
    if cfg["images"]:
        paths = [str(p) for p in cfg["images"]]
        try:
            imgs = np.stack([preprocess(read_pgm(p), size) for p in paths])
        except (OSError, PGMError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        return paths, imgs
    train_set, test_set = load_splits(cfg)
    _, data = eval_split(train_set, test_set)
    return list(data.paths), data.images


def cmd_predict(cfg: dict, out: Path) -> int:
    snaps = _load_snapshots(cfg, out)
    paths, imgs = _predict_inputs(cfg)
    preds = ensemble_predict(snaps, imgs, normalize=cfg["ensemble"]["normalize"])
    task = snaps[0].model_config["task"] if snaps[0].model_config else cfg["task"]
    rows = []
    if task == "severity":
        header = ["path", "p", "rale", "category"]
        for path, p in zip(paths, preds):
            score, cat = severity_to_rale(float(np.clip(p, 0, 1)))
            rows.append([path, f"{p:.6f}", score, cat])
    else:
        header = ["path", "predicted"] + [f"p{k}" for k in range(preds.shape[1])]
        for path, p in zip(paths, preds):
            rows.append([path, int(np.argmax(p))] + [f"{v:.6f}" for v in p])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.tsv", "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    writer = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return EXIT_OK


def cmd_ablation(cfg: dict, out: Path) -> int:
    train_set, test_set = load_splits(cfg)
    results = {}
    for variant in VARIANTS:
        sub = dict(cfg, variant=variant)
        results[variant] = run_training(sub, out / variant, train_set, test_set, command="ablation")
        print(summary_line(variant, results[variant]))
    write_json(out / "ablation.json", results)
    write_run_manifest(out, "ablation", cfg, train_set)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def summary_line(name: str, rep: dict) -> str:
    parts = [name, f"n={rep.get('n')}", f"accuracy={rep.get('accuracy')}",
             f"macro_f1={rep.get('macro', {}).get('f1')}"]
    if rep.get("r2") is not None:
        parts.append(f"r2={rep['r2']}")
    return "\t".join(parts)


def _summary_rows(name: str, rep: dict) -> list[list]:
    macro = rep.get("macro", {})
    return [[name, "n", rep.get("n")], [name, "accuracy", rep.get("accuracy")],
            [name, "macro_precision", macro.get("precision")], [name, "macro_recall", macro.get("recall")],
            [name, "macro_f1", macro.get("f1")], [name, "r2", rep.get("r2")], [name, "mae", rep.get("mae")]]


def _read_json(path: Path):
    return json.loads(path.read_text()) if path.is_file() else None


def cmd_report(cfg: dict, out: Path) -> int:
    """Summarise stored JSON under ``out`` (never retrains)."""
    from . import plotting

    if not out.is_dir():
        raise OSError(f"output directory {out} does not exist")
    rows: list[list] = []
    figures: list[Path] = []
    report = _read_json(out / "report.json")
    if report is not None:
        if "folds" in report:
            for i, fold in enumerate(report["folds"], start=1):
                rows += _summary_rows(f"fold_{i}", fold)
            rows += _summary_rows("average", report["average"])
            main = report["average"]
        else:
            rows += _summary_rows("report", report)
            main = report
        names = main.get("class_names") or [str(i) for i in range(main["num_classes"])]
        figures.append(plotting.confusion_figure(main["confusion"], names, out / "confusion.png"))
    ablation = _read_json(out / "ablation.json")
    if ablation is not None:
        for variant, rep in ablation.items():
            rows += _summary_rows(variant, rep)
    history = _read_json(out / "history.json")
    if history:
        figures.append(plotting.learning_curve(history, out / "learning_curve.png"))
        rows.append(["history", "epochs", len(history)])
        rows.append(["history", "final_loss", round(history[-1]["loss"], 6)])
    preds = _read_json(out / "predictions.json")
    if preds is not None:
        if preds["task"] == "severity":
            figures.append(plotting.severity_scatter(preds["p"], preds["rale"], out / "severity.png"))
        else:
            k = len(preds["scores"][0]) if preds["scores"] else 0
            names = (report or {}).get("class_names") or [str(i) for i in range(k)]
            if "average" in (report or {}):
                names = report["average"]["class_names"]
            figures.append(plotting.roc_figure(preds["scores"], preds["labels"], names, out / "roc.png"))
    if (out / "trace.jsonl").is_file():
        trace = read_trace(out / "trace.jsonl")
        values = [o.value for o in trace]
        best = max(trace, key=lambda o: o.value)
        rows += [["tune", "evaluations", len(trace)], ["tune", "best_value", round(best.value, 6)]]
        rows += [["tune", f"best_{k}", v] for k, v in best.params.items()]
        figures.append(plotting.tune_trace(values, out / "tune_trace.png"))
    if not rows:
        raise DataError(f"no stored results under {out}")
    with open(out / "summary.tsv", "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["section", "metric", "value"])
        writer.writerows(rows)
    writer = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    writer.writerow(["section", "metric", "value"])
    writer.writerows(rows)
    for fig in figures:
        print(f"figure\t{fig}", file=sys.stderr)
    return EXIT_OK


HANDLERS = {"train": cmd_train, "tune": cmd_tune, "kfold": cmd_kfold, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "ablation": cmd_ablation, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobilecaps", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dot-path override, value parsed as JSON when possible")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report" and args.config is None:
            # report only needs the directory
            cfg = dict(DEFAULT_CONFIG, seed=0, out=args.out or DEFAULT_CONFIG["out"])
        else:
            cfg = load_config(args.config, args.overrides, args.out)
        return HANDLERS[args.command](cfg, Path(cfg["out"]))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
