"""ADAM, the mini-batch training loop and z-scoring of training frames."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SegmentSet, Standardizer, standardize_apply, standardize_fit  # noqa: F401
from .network import Model, cross_entropy, model_backward, save_model  # noqa: F401
from .numkernel import Rng, ShapeError

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              masks: dict[str, np.ndarray] | None = None) -> None:
    """One bias-corrected ADAM update, in place on ``params`` and ``state``.

    Masked parameters get their mask re-applied after the update, and their
    moments are kept at zero wherever the mask is zero.
    """
    masks = masks or {}
    if set(grads) != set(params):
        raise ShapeError(f"gradient names differ from parameters: {sorted(set(grads) ^ set(params))}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mask = masks.get(name)
        if mask is not None:
            m *= mask
            v *= mask
        theta -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        if mask is not None:
            theta *= mask


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 200
    lr: float = 1e-3
    seed: int = 0
    patience: int = 20
    checkpoint: str | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


def voted_accuracy(model: Model, data: SegmentSet, batch_size: int = 512) -> float:
    from .inference import predict_segment_set

    predictions = predict_segment_set(model, data, batch_size)
    return float(np.mean([p.predicted == y for p, y in zip(predictions, data.file_labels)]))


def train(model: Model, train_set: SegmentSet, val_set: SegmentSet, config: TrainConfig,
          on_epoch=None) -> tuple[Model, list[EpochRecord]]:
    """Fit ``model`` in place; on return it holds the best-validation parameters."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation splits must be non-empty")
    rng = Rng(config.seed)
    shuffle_rng = rng.spawn(1)
    dropout_rng = rng.spawn(2)
    state = AdamState(config.lr, config.beta1, config.beta2, config.epsilon)
    params = model.parameters()
    masks = model.masks()
    best_acc, best_params, stale = -1.0, model.copy_parameters(), 0
    history = []
    n = len(train_set)
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = model_backward(model, train_set.segments[idx], train_set.labels[idx],
                                         training=True, rng=dropout_rng)
            adam_step(params, grads, state, masks)
            total += loss * len(idx)
        acc = voted_accuracy(model, val_set)
        record = EpochRecord(epoch, total / n, acc)
        history.append(record)
        log.info("epoch %d  loss %.5f  val acc %.4f", epoch, record.train_loss, acc)
        if on_epoch is not None:
            on_epoch(record)
        if acc > best_acc:
            best_acc, best_params, stale = acc, model.copy_parameters(), 0
            if config.checkpoint:
                save_model(model, config.checkpoint)
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.set_parameters(best_params)
    return model, history


def write_history_csv(history: list[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_accuracy"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_accuracy)])
