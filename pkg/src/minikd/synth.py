"""Synthetic two-class grayscale texture set in the raw container format.

Each image is a bright disc on a dark surround (so zero-filled rotation adds
no new edge), shaded by random soft blobs, with a gaussian window placed near
the centre.  Negatives (label 0) get a faint brightness lift under the window;
positives (label 1) get a stronger lift plus a sinusoidal grating of random
orientation, period and phase.  Noise is smoothed twice, so the images are
band-limited and survive bilinear resampling.  Raw-pixel templates separate
the classes only partly; small CNNs pick up the grating.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import write_container
from .models import make_rng

# positive grating amplitude and period (pixels), brightness lift under each
# window, pixel noise sigma and smoothing passes
AMP_LO, AMP_HI = 0.08, 0.16
P_LO, P_HI = 5.0, 9.0
SHIFT, SHIFT0 = 0.14, 0.07
NOISE = 0.03
BLUR = 2

__all__ = ["synth_images", "synth_dataset", "nearest_centroid_accuracy"]


def _blobs(rng, side, count, yy, xx):
    img = np.zeros((side, side))
    for _ in range(count):
        cy, cx = rng.uniform(0, side, size=2)
        sigma = rng.uniform(side / 10, side / 5)
        amp = rng.uniform(-0.25, 0.25)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return img


def _smooth(img):
    # separable [1, 2, 1] / 4 with edge replication
    p = np.pad(img, 1, mode="edge")
    p = (p[:-2] + 2 * p[1:-1] + p[2:]) / 4
    return (p[:, :-2] + 2 * p[:, 1:-1] + p[:, 2:]) / 4


def _one(rng, side, label, yy, xx, body):
    img = body * (0.5 + _blobs(rng, side, 4, yy, xx))
    cy, cx = rng.uniform(side * 0.3, side * 0.7, size=2)
    radius = rng.uniform(side / 7, side / 4)
    window = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
    if label == 1:
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(P_LO, P_HI)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(AMP_LO, AMP_HI)
        wave = np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period + phase)
        img += amp * window * wave + SHIFT * window
    else:
        img += rng.uniform(0.0, 2 * SHIFT0) * window
    img += rng.normal(0.0, NOISE, size=img.shape)
    for _ in range(BLUR):
        img = _smooth(img)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def synth_images(n_per_class: int, side: int = 32, seed: int = 0):
    """Return (uint8 images N×H×W, labels) with classes interleaved 0,1,0,1..."""
    if n_per_class < 10:
        raise ValueError(f"n_per_class must be >= 10, got {n_per_class}")
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2
    # dark surround, like the border of a radiograph
    body = 1.0 / (1.0 + np.exp((np.hypot(yy - c, xx - c) - 0.4 * side) / (0.05 * side)))
    rng = make_rng([seed, side, n_per_class])
    images, labels = [], []
    for _ in range(n_per_class):
        for label in (0, 1):
            images.append(_one(rng, side, label, yy, xx, body))
            labels.append(label)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def synth_dataset(path, n_per_class: int = 1000, side: int = 32, seed: int = 7, classes: int = 2) -> Path:
    """Write the synthetic set to ``path`` as a raw container; deterministic per seed."""
    if classes != 2:
        raise ValueError("the synthetic generator produces exactly two classes")
    images, labels = synth_images(n_per_class, side, seed)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_container(path, list(images), list(labels))
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc
    return path


def nearest_centroid_accuracy(images, labels, train_fraction: float = 0.5, seed: int = 0) -> float:
    """Held-out accuracy of a raw-pixel nearest-centroid classifier."""
    x = np.asarray(images, dtype=np.float64).reshape(len(labels), -1)
    y = np.asarray(labels)
    order = make_rng(seed).permutation(len(y))
    cut = int(len(y) * train_fraction)
    tr, te = order[:cut], order[cut:]
    cents = np.stack([x[tr][y[tr] == c].mean(axis=0) for c in (0, 1)])
    d = ((x[te][:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float(np.mean(d.argmin(axis=1) == y[te]))
