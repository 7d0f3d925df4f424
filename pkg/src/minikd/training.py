"""Adam, the mini-batch training loop, and split evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import AugmentConfig, Dataset, rotate_batch
from .metrics import ConfusionCounts, confusion_from_pairs
from .models import ModelGraph, forward, make_rng, predict

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "AdamState",
    "NumericError",
    "adam_step",
    "cross_entropy_loss",
    "fit_loop",
    "train_supervised",
    "evaluate_model",
]


class NumericError(RuntimeError):
    """A loss became NaN or infinite during training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    loss: str = "cross-entropy"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.loss != "cross-entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return state


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    return ad.scale(ad.sum_all(ad.pick(ad.log_softmax(logits), labels)), -1.0 / logits.shape[0])


def _as_arrays(data) -> tuple:
    if isinstance(data, Dataset):
        return data.images, data.labels
    images, labels = data
    return np.asarray(images, dtype=np.float32), np.asarray(labels, dtype=np.int64)


def fit_loop(
    model: ModelGraph,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    loss_fn: Callable[[Tensor, np.ndarray, np.ndarray], Tensor],
    augment: Optional[AugmentConfig] = None,
) -> list:
    """Shared mini-batch Adam loop.

    ``loss_fn(logits, labels, batch_images)`` builds the scalar loss.  Batch
    order, augmentation angles and dropout masks are all derived from
    ``cfg.seed`` so two runs with the same inputs are bit-identical.
    """
    if len(labels) == 0:
        raise ValueError("training data is empty")
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamState.zeros_like(params)
    history = []
    n = len(labels)
    for epoch in range(cfg.epochs):
        order = make_rng([cfg.seed, epoch, 0]).permutation(n)
        aug_rng = make_rng([cfg.seed, epoch, 1])
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xb = images[idx]
            if augment is not None:
                xb = rotate_batch(xb, augment, aug_rng)
            yb = labels[idx]
            model.zero_grad()
            with Tape() as tape:
                logits = forward(model, xb, training=True, rng_seed=[cfg.seed, epoch, step, 2])
                loss = loss_fn(logits, yb, xb)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            ad.backward(tape, loss)
            adam_step(params, [p.grad for p in params], state, cfg.learning_rate)
            total += value * len(idx)
        history.append(total / n)
        logger.debug("epoch %d loss %.6f", epoch, history[-1])
    model.zero_grad()
    return history


def train_supervised(model: ModelGraph, data, cfg: TrainConfig, augment: Optional[AugmentConfig] = None):
    """Train ``model`` in place with cross-entropy; returns (model, per-epoch loss)."""
    images, labels = _as_arrays(data)
    if len(labels) == 0:
        raise ValueError("training data is empty")
    if np.any((labels < 0) | (labels >= model.classes)):
        raise ValueError(f"labels must lie in [0, {model.classes})")
    history = fit_loop(model, images, labels, cfg, lambda logits, y, _x: cross_entropy_loss(logits, y), augment)
    return model, history


def evaluate_model(model: ModelGraph, split) -> ConfusionCounts:
    """Inference-mode confusion counts with class 1 as the positive class."""
    images, labels = _as_arrays(split)
    if len(labels) == 0:
        raise ValueError("evaluation split is empty")
    return confusion_from_pairs(predict(model, images), labels)

