"""Training loop: epochs of momentum SGD, per-epoch validation, early
stopping on validation loss, best-weight checkpointing and test evaluation.

Epoch ``e`` (numbered from 1) shuffles the training set with seed
``cfg.seed + e``.  When training stops, the weights of the best epoch are
restored before the test set is scored.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import IMAGE_SIZE, Batch, ClassIndex, Sample, SplitSpec, make_batches
from .metrics import ClassificationReport, classification_report, confusion_matrix
from .model import ModelConfig, ModelParams, build_model, forward, parameters
from .optim import SGD, EarlyStopping, cross_entropy

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Non-finite loss during training."""


@dataclass
class TrainConfig:
    max_epochs: int = 50
    batch_size: int = 32
    lr: float = 0.001
    momentum: float = 0.9
    patience: int = 3
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    checkpoint_path: str | None = None
    log_path: str | None = None
    image_size: int = IMAGE_SIZE
    cache_images: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.split, dict):
            self.split = SplitSpec(**self.split)
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be at least 1, got {self.patience}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["split"] = self.split.to_dict()
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    params: ModelParams
    history: list[EpochRecord]
    report: ClassificationReport | None
    best_epoch: int
    stopped_early: bool


def _as_tensor(batch: Batch) -> T.Tensor:
    return T.Tensor(batch.images)


def train_epoch(params: ModelParams, optim: SGD, batches: Iterable[Batch]) -> float:
    """One pass of forward / loss / backward / step per batch; mean batch loss."""
    losses = []
    for batch in batches:
        logits = forward(params, _as_tensor(batch), training=True)
        loss = cross_entropy(logits, batch.labels)
        value = loss.item()
        if not math.isfinite(value):
            T.get_tape().clear()
            raise TrainingDivergedError(
                f"non-finite training loss {value} at batch {len(losses) + 1} "
                f"(labels {batch.labels.tolist()}, max |logit| {np.abs(logits.data).max():.3g})"
            )
        T.backward(loss)
        optim.step()
        losses.append(value)
    if not losses:
        raise ValueError("train_epoch needs at least one batch")
    return float(np.mean(losses))


def predict_logits(params: ModelParams, batches: Iterable[Batch]) -> tuple[np.ndarray, np.ndarray]:
    outs, labels = [], []
    for batch in batches:
        outs.append(forward(params, _as_tensor(batch), training=False).data)
        labels.append(batch.labels)
    if not outs:
        raise ValueError("no batches to evaluate")
    return np.concatenate(outs), np.concatenate(labels)


def validate(params: ModelParams, batches: Iterable[Batch]) -> tuple[float, float]:
    """Eval-mode (loss, accuracy), weighting every sample equally.  Leaves
    params and running statistics untouched and records no tape."""
    logits, labels = predict_logits(params, batches)
    with T.no_grad():
        loss = cross_entropy(T.Tensor(logits), labels).item()
    acc = float((logits.argmax(axis=1) == labels).mean())
    return float(loss), acc


def evaluate(params: ModelParams, batches: Iterable[Batch], class_index: ClassIndex) -> ClassificationReport:
    logits, labels = predict_logits(params, batches)
    cm = confusion_matrix(labels, logits.argmax(axis=1), len(class_index), class_index.names)
    return classification_report(cm)


ValidateFn = Callable[[ModelParams, int], tuple[float, float]]


def fit(
    cfg: TrainConfig,
    datasets: tuple[Sequence[Sample], Sequence[Sample], Sequence[Sample]],
    class_index: ClassIndex | None = None,
    validate_fn: ValidateFn | None = None,
    params: ModelParams | None = None,
) -> FitResult:
    """Train on ``datasets[0]``, early-stop on ``datasets[1]``, score ``datasets[2]``.

    ``validate_fn(params, epoch) -> (val_loss, val_accuracy)`` replaces the
    real validation pass when given.
    """
    train_set, val_set, test_set = datasets
    if not train_set or (validate_fn is None and not val_set):
        raise ValueError("training and validation sets must be non-empty")
    class_index = class_index or ClassIndex.default()
    params = params or build_model(cfg.model, seed=cfg.seed)
    trainable = [t for _, t in parameters(params, trainable_only=True)]
    optim = SGD(trainable, lr=cfg.lr, momentum=cfg.momentum)
    stopper = EarlyStopping(patience=cfg.patience)
    history: list[EpochRecord] = []
    best_state = params.state_dict()
    saved = False
    ckpt = Path(cfg.checkpoint_path) if cfg.checkpoint_path else None
    logf = open(cfg.log_path, "w") if cfg.log_path else None
    run_meta = {"seed": cfg.seed, "split": cfg.split.to_dict()}

    def batches(samples, seed=None):
        return make_batches(samples, cfg.batch_size, seed, cfg.image_size, cache=cfg.cache_images)

    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            train_loss = train_epoch(params, optim, batches(train_set, cfg.seed + epoch))
            if validate_fn is not None:
                val_loss, val_acc = validate_fn(params, epoch)
            else:
                val_loss, val_acc = validate(params, batches(val_set))
            rec = EpochRecord(epoch, train_loss, float(val_loss), float(val_acc), time.perf_counter() - t0)
            history.append(rec)
            if logf:
                logf.write(json.dumps(rec.to_dict()) + "\n")
                logf.flush()
            log.info(
                "epoch %d train_loss %.4f val_loss %.4f val_acc %.4f", epoch, train_loss, val_loss, val_acc
            )
            if stopper.update(val_loss):
                best_state = params.state_dict()
                if ckpt:
                    # wall time stays in the log so checkpoints are reproducible
                    best = {k: v for k, v in rec.to_dict().items() if k != "wall_time"}
                    save_checkpoint(params, ckpt, class_index, cfg.image_size, best, run_meta)
                    saved = True
            if stopper.stopped:
                log.info("early stop at epoch %d; best epoch %d", epoch, stopper.best_epoch)
                break
    finally:
        if logf:
            logf.close()

    if saved:
        params.load_state_dict(load_checkpoint(ckpt).state)
    else:
        params.load_state_dict(best_state)

    report = evaluate(params, batches(test_set), class_index) if test_set else None
    return FitResult(params, history, report, stopper.best_epoch, stopper.stopped)


def read_log(path: str | os.PathLike) -> list[EpochRecord]:
    with open(path) as f:
        return [EpochRecord(**json.loads(line)) for line in f if line.strip()]
