"""Deterministic seeded training with validation-based early stopping.

One PCG64 generator (reseeded by ``seed_all``) drives weight init and
batch shuffling, so a (spec, data, config) triple fully determines the
returned checkpoint. The best checkpoint is selected on validation
accuracy with ties broken by lower validation loss, and training stops
once ``patience`` consecutive epochs bring no improvement.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from . import tensor as T
from .encoders import (
    EncoderSpec,
    EncoderWeights,
    encoder_forward_batch,
    init_encoder_weights,
)
from .tensor import NonFiniteError, ShapeError, Tensor

_rng = np.random.default_rng(0)

EVAL_BATCH = 64


def seed_all(seed: int) -> None:
    """Reseed the process-wide generator used for init and shuffling."""
    global _rng
    _rng = np.random.default_rng(seed)


def generator() -> np.random.Generator:
    return _rng


def derive_seed(base_seed: int, *parts) -> int:
    """Stable sub-seed from a base seed and arbitrary tags (e.g. encoder id)."""
    digest = hashlib.sha256(
        ":".join([str(base_seed)] + [str(p) for p in parts]).encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


@dataclass
class TrainConfig:
    epochs_max: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 8
    patience: int = 10
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class DataSplit:
    """Materialized split arrays consumed by one training run."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    def __post_init__(self):
        if len(self.train_x) == 0 or len(self.val_x) == 0:
            raise ValueError("train and validation parts must be nonempty")


@dataclass
class Checkpoint:
    """Best-on-validation weight snapshot (restores bit-identical forwards)."""

    weights: dict  # name -> float64 array copy
    epoch: int
    validation_metric: float


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``epoch`` is where it happened."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


@dataclass
class EarlyStopper:
    """Best-checkpoint tracking: accuracy first, lower loss breaks ties."""

    patience: int
    best_epoch: int = 0
    best_accuracy: float = -np.inf
    best_loss: float = np.inf

    def update(self, epoch: int, accuracy: float, loss: float) -> Tuple[bool, bool]:
        """Returns (improved, stop_now) after this epoch's validation."""
        improved = (accuracy > self.best_accuracy
                    or (accuracy == self.best_accuracy and loss < self.best_loss))
        if improved:
            self.best_epoch = epoch
            self.best_accuracy = accuracy
            self.best_loss = loss
        return improved, (epoch - self.best_epoch) >= self.patience


def optimizer_step(kind: str, params: dict, grads: dict,
                   state: Optional[dict], lr: float) -> dict:
    """Apply one update in place; returns the (possibly new) optimizer state.

    adam uses beta = (0.9, 0.999), eps = 1e-8, with bias correction.
    """
    if kind == "sgd":
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"{name}: grad {g.shape} != param {p.shape}")
            p.data = p.data - lr * g
        return state if state is not None else {}
    if kind != "adam":
        raise ValueError(f"unknown optimizer {kind!r}")
    if state is None or not state:
        state = {"t": 0,
                 "m": {n: np.zeros_like(p.data) for n, p in params.items()},
                 "v": {n: np.zeros_like(p.data) for n, p in params.items()}}
    state["t"] += 1
    t = state["t"]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} != param {p.shape}")
        m = state["m"][name] = b1 * state["m"][name] + (1 - b1) * g
        v = state["v"][name] = b2 * state["v"][name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_scores(spec: EncoderSpec, weights: EncoderWeights,
                   images: np.ndarray) -> np.ndarray:
    """Softmax class scores [n, num_classes], computed without a tape."""
    scores = np.empty((len(images), spec.num_classes))
    with T.no_grad():
        for start in range(0, len(images), EVAL_BATCH):
            chunk = images[start : start + EVAL_BATCH]
            logits = encoder_forward_batch(Tensor(chunk), spec, weights).data
            scores[start : start + len(chunk)] = _softmax_rows(logits)
    return scores


def evaluate(spec: EncoderSpec, weights: EncoderWeights, images: np.ndarray,
             labels: np.ndarray) -> Tuple[float, float]:
    """(accuracy, mean NLL) on a labeled set."""
    scores = predict_scores(spec, weights, images)
    preds = scores.argmax(axis=1)
    acc = float(np.mean(preds == labels))
    eps = 1e-12
    nll = -np.log(np.maximum(scores[np.arange(len(labels)), labels], eps))
    return acc, float(nll.mean())


def snapshot_weights(weights: EncoderWeights) -> dict:
    return {name: t.data.copy() for name, t in weights.named.items()}


def restore_snapshot(weights: EncoderWeights, snapshot: dict) -> None:
    for name, t in weights.named.items():
        t.data = snapshot[name].copy()


def train_run(spec: EncoderSpec, split: DataSplit,
              config: TrainConfig) -> Tuple[Checkpoint, list]:
    """Train one encoder; returns (best-on-validation checkpoint, history).

    Raises DivergenceError (with the epoch index) if any loss turns
    non-finite. Rebuild live weights from the checkpoint with
    ``encoders.restore_weights(spec, checkpoint.weights)``.
    """
    seed_all(config.seed)
    weights = init_encoder_weights(spec, generator())
    state: Optional[dict] = None
    stopper = EarlyStopper(patience=config.patience)
    history: list = []
    best: Optional[Checkpoint] = None
    n = len(split.train_x)

    for epoch in range(1, config.epochs_max + 1):
        order = generator().permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = Tensor(split.train_x[idx])
            try:
                logits = encoder_forward_batch(xb, spec, weights)
                loss = T.softmax_cross_entropy(logits, split.train_y[idx])
                loss.backward()
            except NonFiniteError as exc:
                raise DivergenceError(epoch, f"epoch {epoch}: {exc}") from exc
            loss_sum += loss.item() * len(idx)
            grads = {name: t.grad for name, t in weights.named.items()}
            state = optimizer_step(config.optimizer, weights.named, grads,
                                   state, config.learning_rate)
            T.zero_grads(weights.named.values())
        train_loss = loss_sum / n
        if not np.isfinite(train_loss):
            raise DivergenceError(epoch)

        val_acc, val_loss = evaluate(spec, weights, split.val_x, split.val_y)
        history.append(EpochRecord(epoch=epoch, train_loss=train_loss,
                                   val_accuracy=val_acc))
        improved, stop = stopper.update(epoch, val_acc, val_loss)
        if improved:
            best = Checkpoint(weights=snapshot_weights(weights), epoch=epoch,
                              validation_metric=val_acc)
        if stop:
            break

    assert best is not None
    return best, history


def history_lines(history: Iterable[EpochRecord]) -> str:
    """Structured text form: epoch, train loss, val accuracy per line."""
    lines = ["epoch\ttrain_loss\tval_accuracy"]
    for rec in history:
        lines.append(f"{rec.epoch}\t{rec.train_loss!r}\t{rec.val_accuracy!r}")
    return "\n".join(lines) + "\n"
