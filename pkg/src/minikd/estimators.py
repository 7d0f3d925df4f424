"""scikit-learn compatible wrappers around the models and training loops.

Images go in as ``N×H×W`` or ``N×1×H×W`` arrays of floats in [0, 1] (use
:class:`PixelNormalizer` for 0..255 input).  The estimators clone, grid-search
and pipeline like any other sklearn estimator::

    pipe = make_pipeline(PixelNormalizer(), CNNClassifier(epochs=10))
    pipe.fit(raw_images, labels).score(raw_test, test_labels)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted

from .data import AugmentConfig, normalize, resize_bilinear
from .distill import DistillConfig, softmax_temperature, train_distill
from .models import ArchScale, build_mini_student, build_mini_teacher, count_params, forward, predict_from_logits
from .training import TrainConfig, train_supervised

__all__ = [
    "check_images",
    "check_labels",
    "PixelNormalizer",
    "ImageResizer",
    "CNNClassifier",
    "DistilledCNNClassifier",
]


def check_images(X, *, channels_first: bool = True, dtype=np.float32) -> np.ndarray:
    """Validate an image batch and return it as ``N×C×H×W``.

    Accepts ``N×H×W`` (a channel axis is added) or ``N×C×H×W``; rejects
    empty batches, NaN/inf and any other rank.
    """
    arr = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False, ensure_all_finite=True)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ValueError(f"expected images shaped N×H×W or N×C×H×W, got {arr.ndim}-d input of shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("image batch is empty")
    return np.ascontiguousarray(arr) if channels_first else arr


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for {n} images")
    return y


class PixelNormalizer(TransformerMixin, BaseEstimator):
    """Scale 0..255 pixels into [0, 1]; stateless apart from input checks."""

    def fit(self, X, y=None):
        check_images(X)
        self.n_features_in_ = int(np.prod(np.shape(X)[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return normalize(check_images(X))


class ImageResizer(TransformerMixin, BaseEstimator):
    """Half-pixel-centred bilinear resize to ``side × side``."""

    def __init__(self, side: int = 32):
        self.side = side

    def fit(self, X, y=None):
        if int(self.side) < 1:
            raise ValueError(f"side must be positive, got {self.side}")
        check_images(X)
        self.fitted_side_ = int(self.side)
        return self

    def transform(self, X):
        check_is_fitted(self, "fitted_side_")
        return resize_bilinear(check_images(X), self.fitted_side_, self.fitted_side_)


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Mini teacher or student network trained with Adam and cross-entropy."""

    def __init__(
        self,
        architecture: str = "student",
        width: int = 8,
        stages: int = 2,
        student_blocks: int = 3,
        expansion: int = 3,
        learning_rate: float = 1e-5,
        batch_size: int = 32,
        epochs: int = 30,
        rotation=(0.0, 20.0),
        augment: bool = True,
        random_state: int = 0,
    ):
        self.architecture = architecture
        self.width = width
        self.stages = stages
        self.student_blocks = student_blocks
        self.expansion = expansion
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.rotation = rotation
        self.augment = augment
        self.random_state = random_state

    def _build(self, side: int, channels: int, classes: int):
        if self.architecture not in ("teacher", "student"):
            raise ValueError(f"architecture must be 'teacher' or 'student', got {self.architecture!r}")
        scale = ArchScale(side=side, width=self.width, stages=self.stages,
                          student_blocks=self.student_blocks, expansion=self.expansion)
        build = build_mini_teacher if self.architecture == "teacher" else build_mini_student
        return build(scale, classes, seed=[int(self.random_state), 0], in_channels=channels)

    def _train_cfg(self):
        return TrainConfig(self.learning_rate, self.batch_size, self.epochs, seed=int(self.random_state))

    def _augment_cfg(self):
        return AugmentConfig(tuple(self.rotation), int(self.random_state)) if self.augment else None

    def _prepare(self, X, y):
        X = check_images(X)
        if X.shape[2] != X.shape[3]:
            raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
        y = check_labels(y, X.shape[0])
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit a classifier")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return X, self._encoder.transform(y).astype(np.int64)

    def fit(self, X, y):
        X, yi = self._prepare(X, y)
        self.model_ = self._build(X.shape[2], X.shape[1], len(self.classes_))
        _, self.loss_history_ = train_supervised(self.model_, (X, yi), self._train_cfg(), self._augment_cfg())
        self.n_params_ = count_params(self.model_)
        return self

    def decision_function(self, X) -> np.ndarray:
        """Raw logits, ``N × n_classes``."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        out = [forward(self.model_, X[i : i + 256]).data for i in range(0, len(X), 256)]
        return np.concatenate(out).astype(np.float64)

    def predict_proba(self, X) -> np.ndarray:
        return softmax_temperature(self.decision_function(X), 1.0)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[predict_from_logits(self.decision_function(X))]


class DistilledCNNClassifier(CNNClassifier):
    """Student network fitted against a frozen teacher's softened outputs.

    ``teacher`` may be a fitted :class:`CNNClassifier` (used as is) or an
    unfitted one, which is cloned and fitted on the same data first.  With
    ``teacher=None`` a default teacher-architecture classifier with this
    estimator's training settings is used.
    """

    def __init__(
        self,
        teacher=None,
        alpha: float = 0.9,
        temperature: float = 4.0,
        kl_direction: str = "teacher",
        width: int = 8,
        stages: int = 2,
        student_blocks: int = 3,
        expansion: int = 3,
        learning_rate: float = 1e-5,
        batch_size: int = 32,
        epochs: int = 30,
        rotation=(0.0, 20.0),
        augment: bool = True,
        random_state: int = 0,
    ):
        super().__init__("student", width, stages, student_blocks, expansion, learning_rate, batch_size, epochs,
                         rotation, augment, random_state)
        self.teacher = teacher
        self.alpha = alpha
        self.temperature = temperature
        self.kl_direction = kl_direction

    def _fitted_teacher(self, X, y):
        t = self.teacher
        if t is None:
            t = CNNClassifier("teacher", self.width, self.stages, self.student_blocks, self.expansion,
                              self.learning_rate, self.batch_size, self.epochs, self.rotation, self.augment,
                              self.random_state)
        if not hasattr(t, "model_"):
            t = clone(t).fit(X, y)
        if t.model_.kind != "teacher":
            raise ValueError("the teacher estimator must wrap a teacher-architecture network")
        return t

    def fit(self, X, y):
        cfg = DistillConfig(self.alpha, self.temperature, self.kl_direction)
        Xc, yi = self._prepare(X, y)
        self.teacher_ = self._fitted_teacher(X, y)
        if list(self.teacher_.classes_) != list(self.classes_):
            raise ValueError("teacher and student were fitted on different class sets")
        frozen = self.teacher_.model_.copy().freeze()
        self.model_ = self._build(Xc.shape[2], Xc.shape[1], len(self.classes_))
        _, self.loss_history_ = train_distill(frozen, self.model_, (Xc, yi), cfg, self._train_cfg(),
                                              self._augment_cfg())
        self.n_params_ = count_params(self.model_)
        return self
