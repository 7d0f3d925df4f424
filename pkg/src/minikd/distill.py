"""Temperature softmax, KL divergence and the distillation objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AugmentConfig
from .models import ModelGraph, forward
from .training import TrainConfig, _as_arrays, fit_loop

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
KL_DIRECTIONS = ("teacher", "student")

__all__ = [
    "DistillConfig",
    "softmax_temperature",
    "kl_divergence",
    "cross_entropy_hard",
    "kd_loss",
    "train_distill",
    "ALPHA_GRID",
    "TEMPERATURE_GRID",
]

ALPHA_GRID = (0.5, 0.7, 0.9)
TEMPERATURE_GRID = (2.0, 4.0, 8.0)


@dataclass(frozen=True)
class DistillConfig:
    """Mixing weight and temperature of the distillation loss.

    ``kl_direction="teacher"`` measures KL(teacher ‖ student), the usual
    soft-target reading; ``"student"`` swaps the arguments.
    """

    alpha: float = 0.9
    temperature: float = 4.0
    kl_direction: str = "teacher"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}, got {self.kl_direction!r}")


def _logits_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return np.atleast_2d(arr)


def softmax_temperature(logits, T: float) -> np.ndarray:
    """Row-wise ``softmax(logits / T)`` with max subtraction."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = _logits_array(logits) / T
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kl_divergence(reference, approx) -> float:
    """Mean over rows of KL(reference ‖ approx) in nats.

    Zero reference entries contribute nothing; approx entries are floored at
    1e-12 so saturated softmax rows stay finite.
    """
    p = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    q = np.atleast_2d(np.asarray(approx, dtype=np.float64))
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    clamped = int(np.sum((q < PROB_FLOOR) & (p > 0)))
    if clamped:
        logger.info("kl_divergence: floored %d approx probabilities at %g", clamped, PROB_FLOOR)
    q = np.maximum(q, PROB_FLOOR)
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(q)), 0.0)
    return float(terms.sum(axis=1).mean())


def cross_entropy_hard(logits, labels) -> Tensor:
    """Mean hard-label cross-entropy at temperature 1 (differentiable)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(_logits_array(logits))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    k = logits.shape[1]
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    if np.any((labels < 0) | (labels >= k)):
        raise ValueError(f"labels must lie in [0, {k})")
    return ad.scale(ad.sum_all(ad.pick(ad.log_softmax(logits), labels)), -1.0 / logits.shape[0])


def _soft_kl(student_logits: Tensor, teacher_logits: np.ndarray, cfg: DistillConfig) -> Tensor:
    n = student_logits.shape[0]
    T = cfg.temperature
    log_p = ad.log_softmax(ad.scale(student_logits, 1.0 / T))
    log_floor = float(np.log(PROB_FLOOR))
    clamped = int(np.sum(log_p.data < log_floor))
    if clamped:
        logger.debug("kd_loss: floored %d student probabilities", clamped)
    log_p = ad.maximum_const(log_p, log_floor)
    q = softmax_temperature(teacher_logits.astype(student_logits.dtype, copy=False), T)
    if cfg.kl_direction == "teacher":
        # KL(q ‖ p) = Σ q log q − Σ q log p, with the first sum constant
        safe_q = np.where(q > 0, q, 1.0)
        const = float(np.where(q > 0, q * np.log(safe_q), 0.0).sum()) / n
        cross = ad.scale(ad.sum_all(ad.mul(log_p, Tensor(q, dtype=log_p.dtype))), -1.0 / n)
        return ad.add(cross, Tensor(np.asarray(const), dtype=log_p.dtype))
    log_q = np.log(np.maximum(q, PROB_FLOOR))
    p = ad.exp(log_p)
    diff = ad.sub(log_p, Tensor(log_q, dtype=log_p.dtype))
    return ad.scale(ad.sum_all(ad.mul(p, diff)), 1.0 / n)


def kd_loss(student_logits, teacher_logits, labels, cfg: DistillConfig) -> Tensor:
    """``alpha * T² * KL + (1 - alpha) * CE`` on the student logits.

    The teacher side is treated as a constant; only the student logits carry
    a gradient path.
    """
    if not isinstance(cfg, DistillConfig):
        raise TypeError("cfg must be a DistillConfig")
    student_logits = student_logits if isinstance(student_logits, Tensor) else Tensor(_logits_array(student_logits))
    teacher = _logits_array(teacher_logits)
    if teacher.shape != student_logits.shape:
        raise ValueError(f"teacher logits {teacher.shape} and student logits {student_logits.shape} differ")
    ce = cross_entropy_hard(student_logits, labels)
    if cfg.alpha == 0.0:
        return ce
    kl = _soft_kl(student_logits, teacher, cfg)
    soft = ad.scale(kl, cfg.alpha * cfg.temperature**2)
    if cfg.alpha == 1.0:
        return soft
    return ad.add(soft, ad.scale(ce, 1.0 - cfg.alpha))


def train_distill(
    teacher: ModelGraph,
    student: ModelGraph,
    data,
    cfg: DistillConfig,
    train_cfg: TrainConfig,
    augment: Optional[AugmentConfig] = None,
):
    """Fit ``student`` against a frozen ``teacher``; returns (student, loss history).

    Both networks see the same (augmented) batch.  The teacher runs in
    inference mode, so its dropout is off while producing soft targets.
    """
    if teacher.trainable:
        raise ValueError("teacher must be frozen (call teacher.freeze()) before distillation")
    if teacher.classes != student.classes:
        raise ValueError("teacher and student disagree on the number of classes")
    images, labels = _as_arrays(data)

    def loss_fn(logits, y, xb):
        t_logits = forward(teacher, xb, training=False).data
        return kd_loss(logits, t_logits, y, cfg)

    history = fit_loop(student, images, labels, train_cfg, loss_fn, augment)
    return student, history
