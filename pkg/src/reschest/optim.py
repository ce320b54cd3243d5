"""Softmax cross-entropy, momentum SGD and patience-based early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, record


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits)))


def sigmoid(logits: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(logits)))


def cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Batch-mean negative log-likelihood of ``labels`` under softmax(logits).

    Uses the max-shifted log-sum-exp, so saturated logits do not overflow.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy got {labels.shape[0]} labels for {n} rows")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} out of range [0, {c})")

    logp = log_softmax(logits.data.astype(np.float64))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def _backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return ((grad * (float(g) / n)).astype(DTYPE),)

    return record(np.asarray(loss, dtype=DTYPE), (logits,), _backward, "cross_entropy")


class MissingGradientError(RuntimeError):
    pass


class SGD:
    """Heavy-ball SGD: ``v = momentum * v + g``; ``w -= lr * v``.

    Gradients are cleared after each step.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 0.001, momentum: float = 0.9):
        if not lr >= 0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                label = p.name or f"parameter #{i}"
                raise MissingGradientError(f"{label} has no gradient")
        lr = DTYPE(self.lr)
        mom = DTYPE(self.momentum)
        for p, v in zip(self.params, self.velocity):
            v *= mom
            v += p.grad
            p.data -= lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class EarlyStoppingError(RuntimeError):
    pass


@dataclass
class EarlyStopping:
    """Stops once ``patience`` consecutive updates fail to strictly beat the
    best loss seen.  Epochs are numbered from 1 in update order."""

    patience: int = 3
    best_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    epoch: int = 0
    stopped: bool = False
    history: list[float] = field(default_factory=list)

    def update(self, val_loss: float) -> bool:
        """Feed one epoch's validation loss; returns True on improvement."""
        if self.stopped:
            raise EarlyStoppingError("update after early stopping already triggered")
        self.epoch += 1
        self.history.append(float(val_loss))
        improved = val_loss < self.best_loss
        if improved:
            self.best_loss = float(val_loss)
            self.best_epoch = self.epoch
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        self.stopped = self.epochs_since_improvement >= self.patience
        return improved
