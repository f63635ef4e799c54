"""Epoch loop with cosine warm restarts, Nadam and snapshot capture."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Tensor, backward, no_grad
from ..data.dataset import ArrayDataset
from ..losses import MarginLossConfig, cross_entropy, logcosh_loss, margin_loss
from ..metrics import classification_report, severity_report
from ..model import MobileCaps, ModelConfig, build_model
from .checkpoint import read_checkpoint, save_checkpoint
from .nadam import Nadam, NonFiniteGradientError
from .schedule import ScheduleConfig, cosine_lr

log = logging.getLogger(__name__)

LOSS_KINDS = ("margin", "logcosh", "cross_entropy")


@dataclass
class TrainConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    margin: MarginLossConfig = field(default_factory=MarginLossConfig)
    eval_train: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class Snapshot:
    epoch: int
    params: dict[str, np.ndarray]
    metrics: dict = field(default_factory=dict)
    model_config: dict | None = None


@dataclass
class TrainResult:
    snapshots: list[Snapshot]
    history: list[dict]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, snapshots: list[Snapshot], history: list[dict]):
        super().__init__(f"non-finite loss at epoch {epoch}; kept {len(snapshots)} snapshot(s)")
        self.epoch = epoch
        self.snapshots = snapshots
        self.history = history


def default_loss_kind(model: MobileCaps) -> str:
    if model.config.task == "severity":
        return "logcosh"
    return "cross_entropy" if model.outputs_logits else "margin"


def compute_loss(outputs: Tensor, data: ArrayDataset, idx: np.ndarray, loss_kind: str,
                 margin_cfg: MarginLossConfig = MarginLossConfig()) -> Tensor:
    if loss_kind == "margin":
        k = outputs.shape[1]
        onehot = np.eye(k, dtype=outputs.dtype)[data.labels[idx]]
        return margin_loss(outputs, onehot, margin_cfg)
    if loss_kind == "logcosh":
        y = data.severity_targets[idx].reshape(outputs.shape).astype(outputs.dtype)
        return logcosh_loss(outputs, y, reduction="mean")
    if loss_kind == "cross_entropy":
        return cross_entropy(outputs, data.labels[idx])
    raise ValueError(f"unknown loss kind {loss_kind!r}; choose from {LOSS_KINDS}")


def predict(model: MobileCaps, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Raw model outputs in inference mode (lengths, logits or severity)."""
    was_training = model.training
    model.eval()
    outs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(images[start:start + batch_size].astype(model_dtype(model)))
            outs.append(model(x).data)
    model.train(was_training)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,))


def model_dtype(model: MobileCaps):
    return model.parameters()[0].dtype


def evaluate_model(model: MobileCaps, data: ArrayDataset, batch_size: int = 64) -> dict:
    out = predict(model, data.images, batch_size)
    if model.config.task == "severity":
        rep = severity_report(out[:, 0], data.rale)
        return {"r2": rep.r2, "mae": rep.mae, "accuracy": rep.accuracy}
    rep = classification_report(model.probabilities(out), data.labels)
    return {"accuracy": rep.accuracy, "macro_f1": rep.macro["f1"]}


def _clean(metrics: dict) -> dict:
    return {k: (None if v is None else round(float(v), 6)) for k, v in metrics.items()}


def train(model: MobileCaps, data: ArrayDataset, cfg: TrainConfig, loss_kind: str | None = None,
          val_data: ArrayDataset | None = None) -> TrainResult:
    """Train for ``cfg.schedule.total_epochs`` epochs and capture a snapshot at each cycle end."""
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    loss_kind = loss_kind or default_loss_kind(model)
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}; choose from {LOSS_KINDS}")
    sched = cfg.schedule
    rng = np.random.default_rng(cfg.seed)
    params = model.trainable_parameters()
    opt = Nadam(params, cfg.beta1, cfg.beta2, cfg.eps)
    dtype = model_dtype(model)
    snapshots: list[Snapshot] = []
    history: list[dict] = []
    n = len(data)
    for epoch in range(1, sched.total_epochs + 1):
        lr = cosine_lr(epoch, sched)
        model.train()
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # a single-sample batch gives degenerate batch statistics
            x = Tensor(data.images[idx].astype(dtype))
            out = model(x, rng=rng)
            loss = compute_loss(out, data, idx, loss_kind, cfg.margin)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, snapshots, history)
            model.zero_grad()
            backward(loss)
            try:
                opt.step(lr)
            except NonFiniteGradientError as exc:
                raise TrainingDiverged(epoch, snapshots, history) from exc
            total += value * len(idx)
            count += len(idx)
        entry = {"epoch": epoch, "lr": lr, "loss": total / max(count, 1)}
        if cfg.eval_train:
            entry["train"] = _clean(evaluate_model(model, data))
        if val_data is not None and len(val_data):
            entry["val"] = _clean(evaluate_model(model, val_data))
        history.append(entry)
        log.info("epoch %d lr %.6g loss %.6f %s", epoch, lr, entry["loss"],
                 entry.get("val", entry.get("train", "")))
        if sched.is_snapshot_epoch(epoch):
            snapshots.append(Snapshot(epoch, {k: v.copy() for k, v in model.state_dict().items()},
                                      entry.get("val", entry.get("train", {})),
                                      model.config.to_dict()))
    return TrainResult(snapshots, history)


def history_to_json(history: list[dict]) -> str:
    return json.dumps(history, indent=2)


# ---------------------------------------------------------------------------
# ensembles


def _normalise_rows(p: np.ndarray) -> np.ndarray:
    s = p.sum(axis=1, keepdims=True)
    k = p.shape[1]
    return np.where(s > 0, p / np.where(s > 0, s, 1), 1.0 / k)


def snapshot_predictions(snapshots: list[Snapshot], images: np.ndarray, model: MobileCaps | None = None,
                         normalize: bool = True, batch_size: int = 64) -> list[np.ndarray]:
    """Per-snapshot class probabilities (or severity), ordered by snapshot epoch."""
    if not snapshots:
        raise ValueError("ensemble_predict needs at least one snapshot")
    if model is None:
        if snapshots[0].model_config is None:
            raise ValueError("snapshots carry no model config; pass a model")
        model = build_model(snapshots[0].model_config)
    preds = []
    for snap in sorted(snapshots, key=lambda s: s.epoch):
        try:
            model.load_state_dict(snap.params)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"snapshot at epoch {snap.epoch} does not fit the model: {exc}") from exc
        out = predict(model, images, batch_size)
        if model.config.task == "severity":
            preds.append(out[:, 0].astype(np.float64))
        else:
            probs = model.probabilities(out).astype(np.float64)
            preds.append(_normalise_rows(probs) if normalize else probs)
    return preds


def ensemble_predict(snapshots: list[Snapshot], images: np.ndarray, model: MobileCaps | None = None,
                     normalize: bool = True, batch_size: int = 64) -> np.ndarray:
    """Arithmetic mean of snapshot predictions.

    Classification: each snapshot's capsule lengths are L1-normalised to a
    probability vector before averaging (``normalize=False`` averages raw
    lengths). Severity: plain mean of the predicted probability.
    """
    preds = snapshot_predictions(snapshots, images, model, normalize, batch_size)
    return np.mean(np.stack(preds), axis=0)


def save_ensemble(directory, snapshots: list[Snapshot]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for snap in sorted(snapshots, key=lambda s: s.epoch):
        name = f"snapshot_{snap.epoch:04d}.mcap"
        save_checkpoint(snap.params, directory / name)
        entries.append({"epoch": snap.epoch, "file": name, "metrics": snap.metrics})
    index = {"model_config": snapshots[0].model_config if snapshots else None, "snapshots": entries}
    (directory / "index.json").write_text(json.dumps(index, indent=2))
    return directory


def load_ensemble(directory) -> list[Snapshot]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    return [Snapshot(e["epoch"], read_checkpoint(directory / e["file"]), e.get("metrics", {}),
                     index.get("model_config")) for e in index["snapshots"]]


def model_from_snapshot(snap: Snapshot) -> MobileCaps:
    model = build_model(ModelConfig.from_dict(snap.model_config))
    model.load_state_dict(snap.params)
    return model
