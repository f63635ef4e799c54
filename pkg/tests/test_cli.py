import csv
import json

import numpy as np
import pytest

from mobilecaps.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_IO,
    EXIT_OK,
    ConfigError,
    apply_overrides,
    load_config,
    main,
    parse_override,
)
from mobilecaps.data import write_pgm, write_synthetic_dataset
from mobilecaps.metrics import severity_to_rale

TINY = {
    "seed": 7,
    "schedule": {"lr_max": 0.01, "total_epochs": 2, "cycles": 1},
    "optimizer": {"batch_size": 16},
    "data": {"synthetic": {"n": 24}},
}


def _config(tmp_path, name="cfg.json", **extra):
    cfg = json.loads(json.dumps(TINY))
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _tsv(path):
    with open(path) as fh:
        return list(csv.reader(fh, delimiter="\t"))


# --- config ---------------------------------------------------------------------------


def test_parse_override_json_values():
    assert parse_override("schedule.lr_max=0.5") == (["schedule", "lr_max"], 0.5)
    assert parse_override("class_names=[\"a\",\"b\",\"c\"]") == (["class_names"], ["a", "b", "c"])
    assert parse_override("variant=backbone_only") == (["variant"], "backbone_only")


def test_overrides_reject_unknown_keys():
    cfg = apply_overrides(json.loads(json.dumps({"a": {"b": 1}})), ["a.b=2"])
    assert cfg == {"a": {"b": 2}}
    with pytest.raises(ConfigError):
        load_config(None, ["seed=1", "schedule.bogus=3"])


def test_seed_is_mandatory():
    with pytest.raises(ConfigError):
        load_config(None)
    assert load_config(None, ["seed=3"])["seed"] == 3


def test_class_names_length_checked():
    with pytest.raises(ConfigError):
        load_config(None, ["seed=0", 'class_names=["a","b"]'])


# --- exit codes -----------------------------------------------------------------------


def test_exit_code_missing_seed(tmp_path):
    (tmp_path / "c.json").write_text("{}")
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_exit_code_unknown_key(tmp_path):
    cfg = _config(tmp_path, optimizer={"momentum": 0.9})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_exit_code_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{seed: 1")
    assert main(["train", "--config", str(tmp_path / "c.json")]) == EXIT_CONFIG


def test_exit_code_missing_snapshots(tmp_path):
    assert main(["evaluate", "--config", _config(tmp_path), "--out", str(tmp_path / "nothing")]) == EXIT_IO


def test_exit_code_bad_image(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"garbage")
    out = tmp_path / "run"
    assert main(["train", "--config", _config(tmp_path), "--out", str(out)]) == EXIT_OK
    code = main(["predict", "--config", _config(tmp_path, images=[str(tmp_path / "x.pgm")]), "--out", str(out)])
    assert code == EXIT_DATA


def test_exit_code_report_without_results(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", "--out", str(tmp_path / "empty")]) == EXIT_DATA
    assert main(["report", "--out", str(tmp_path / "absent")]) == EXIT_IO


# --- train / evaluate / report ----------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root)
    assert main(["train", "--config", cfg, "--out", str(root / "a")]) == EXIT_OK
    assert main(["train", "--config", cfg, "--out", str(root / "b")]) == EXIT_OK
    return root, cfg


def test_train_writes_artifacts(trained):
    root, _ = trained
    for name in ("run_manifest.json", "history.json", "report.json", "predictions.json", "snapshots/index.json"):
        assert (root / "a" / name).is_file(), name
    history = json.loads((root / "a" / "history.json").read_text())
    assert [h["epoch"] for h in history] == [1, 2]
    manifest = json.loads((root / "a" / "run_manifest.json").read_text())
    assert manifest["config"]["seed"] == 7


def test_train_twice_byte_identical_history(trained):
    root, _ = trained
    assert (root / "a" / "history.json").read_bytes() == (root / "b" / "history.json").read_bytes()


def test_evaluate_matches_train_report(trained, tmp_path):
    root, cfg = trained
    ev = tmp_path / "ev"
    assert main(["evaluate", "--config", cfg, "--out", str(ev), "--set", f'snapshots="{root / "a" / "snapshots"}"']) == 0
    a = json.loads((root / "a" / "report.json").read_text())
    b = json.loads((ev / "report.json").read_text())
    assert a["accuracy"] == b["accuracy"] and a["confusion"] == b["confusion"]


def test_predict_classification_tsv(trained, tmp_path, capsys):
    root, cfg = trained
    img = tmp_path / "probe.pgm"
    write_pgm(img, np.random.default_rng(0).random((40, 40)))
    assert main(["predict", "--config", cfg, "--out", str(root / "a"), "--set", f'images=["{img}"]']) == 0
    rows = _tsv(root / "a" / "predictions.tsv")
    assert rows[0] == ["path", "predicted", "p0", "p1", "p2"]
    probs = np.array(rows[1][2:], dtype=float)
    assert abs(probs.sum() - 1) < 1e-5 and int(rows[1][1]) == int(np.argmax(probs))
    assert capsys.readouterr().out.splitlines()[0] == "path\tpredicted\tp0\tp1\tp2"


def test_report_reads_stored_results(trained, capsys):
    root, _ = trained
    assert main(["report", "--out", str(root / "a")]) == EXIT_OK
    rows = _tsv(root / "a" / "summary.tsv")
    assert rows[0] == ["section", "metric", "value"]
    assert ["history", "epochs", "2"] in rows
    for fig in ("confusion.png", "learning_curve.png", "roc.png"):
        assert (root / "a" / fig).stat().st_size > 0
    assert "accuracy" in capsys.readouterr().out


# --- severity / predict ---------------------------------------------------------------


def test_rale_endpoint_mapping():
    assert severity_to_rale(0.0) == (1, "Mild")
    assert severity_to_rale(1.0) == (8, "Severe")


def test_predict_severity_columns(tmp_path):
    cfg = _config(tmp_path, task="severity")
    out = tmp_path / "sev"
    assert main(["train", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert main(["predict", "--config", cfg, "--out", str(out)]) == EXIT_OK
    rows = _tsv(out / "predictions.tsv")
    assert rows[0] == ["path", "p", "rale", "category"]
    for _, p, rale, cat in rows[1:]:
        assert (int(rale), cat) == severity_to_rale(min(max(float(p), 0.0), 1.0))


# --- manifest-driven runs -------------------------------------------------------------


def test_train_from_manifest_with_test_split(tmp_path):
    manifest = write_synthetic_dataset(tmp_path / "data", "classify", n=18, size=32, seed=0)
    lines = manifest.read_text().splitlines()
    header = lines[0].split(",")
    split_col = header.index("split")
    body = []
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        cells[split_col] = "test" if i >= 12 else "train"
        body.append(",".join(cells))
    manifest.write_text("\n".join([lines[0]] + body) + "\n")
    cfg = _config(tmp_path, data={"synthetic": None, "manifest": str(manifest)})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "m")]) == EXIT_OK
    report = json.loads((tmp_path / "m" / "report.json").read_text())
    assert report["split"] == "test" and report["n"] == 6


# --- kfold / tune / ablation ------------------------------------------------------------


def test_kfold_emits_five_reports_and_average(tmp_path):
    cfg = _config(tmp_path, schedule={"total_epochs": 1})
    out = tmp_path / "kf"
    assert main(["kfold", "--config", cfg, "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert len(report["folds"]) == 5
    assert report["average"]["accuracy"] == pytest.approx(np.mean([f["accuracy"] for f in report["folds"]]), abs=1e-6)
    assert all((out / f"fold_{i}" / "report.json").is_file() for i in range(1, 6))
    assert main(["report", "--out", str(out)]) == EXIT_OK
    assert [r[0] for r in _tsv(out / "summary.tsv")].count("average") > 0


def test_tune_writes_trace_and_resumes(tmp_path):
    cfg = _config(tmp_path, tune={"budget": 3, "cycle_len": [1, 2]})
    out = tmp_path / "tune"
    assert main(["tune", "--config", cfg, "--out", str(out)]) == EXIT_OK
    lines = (out / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 3
    best = json.loads((out / "best_config.json").read_text())
    assert best["schedule"]["cycles"] == 1 and 1e-5 <= best["schedule"]["lr_max"] <= 1e-1
    # a rerun with the same budget finds the trace complete and does not retrain
    assert main(["tune", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert (out / "trace.jsonl").read_text().splitlines() == lines


def test_ablation_runs_every_variant(tmp_path):
    cfg = _config(tmp_path, schedule={"total_epochs": 1})
    out = tmp_path / "abl"
    assert main(["ablation", "--config", cfg, "--out", str(out)]) == EXIT_OK
    results = json.loads((out / "ablation.json").read_text())
    assert set(results) == {"mobilecaps", "backbone_only", "capsnet_only"}
    assert all((out / v / "snapshots" / "index.json").is_file() for v in results)
