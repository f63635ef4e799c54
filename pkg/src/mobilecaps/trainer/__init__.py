"""Cosine warm-restart training with Nadam, snapshot ensembles and checkpoints."""

from .checkpoint import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    UnknownParameterError,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from .loop import (
    Snapshot,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    compute_loss,
    default_loss_kind,
    ensemble_predict,
    evaluate_model,
    load_ensemble,
    model_from_snapshot,
    predict,
    save_ensemble,
    snapshot_predictions,
    train,
)
from .nadam import Nadam, NadamState, NonFiniteGradientError, nadam_step
from .schedule import ScheduleConfig, cosine_lr

__all__ = [
    "CheckpointError", "CheckpointFormatError", "CheckpointTruncatedError", "Nadam", "NadamState",
    "NonFiniteGradientError", "ScheduleConfig", "Snapshot", "TrainConfig", "TrainResult",
    "TrainingDiverged", "UnknownParameterError", "compute_loss", "cosine_lr", "default_loss_kind",
    "ensemble_predict", "evaluate_model", "load_checkpoint", "load_ensemble", "model_from_snapshot",
    "nadam_step", "predict", "read_checkpoint", "save_checkpoint", "save_ensemble",
    "snapshot_predictions", "train",
]
