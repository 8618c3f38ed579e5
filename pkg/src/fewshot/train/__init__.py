from .checkpoint import MAGIC, ModelCheckpoint, load_checkpoint, save_checkpoint, snapshot
from .loops import (
    HEAD_DEFAULTS,
    EarlyStopping,
    TrainConfig,
    TrainResult,
    early_stop_update,
    episodic_accuracy,
    episodic_validation,
    evaluate,
    pair_accuracy,
    pair_validation,
    train,
    train_episodic,
    train_siamese,
)
from .metrics import MetricsReport, compute_metrics, confusion_matrix, metrics_from_confusion

__all__ = [
    "HEAD_DEFAULTS", "MAGIC", "EarlyStopping", "MetricsReport", "ModelCheckpoint", "TrainConfig",
    "TrainResult", "compute_metrics", "confusion_matrix", "early_stop_update", "episodic_accuracy", "episodic_validation",
    "evaluate", "load_checkpoint", "metrics_from_confusion", "pair_accuracy", "pair_validation", "save_checkpoint",
    "snapshot", "train", "train_episodic", "train_siamese",
]
