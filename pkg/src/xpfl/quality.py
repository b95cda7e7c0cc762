"""Image-quality and classification metrics."""

from dataclasses import dataclass

import numpy as np

from .numkit import DimensionError, ParameterError


@dataclass(frozen=True)
class SsimParams:
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y):
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y, max_i=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    if not max_i > 0:
        raise ParameterError(f"max_i must be positive, got {max_i}")
    err = mse(x, y)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(max_i * max_i / err))


def ssim(x, y, params=SsimParams()):
    """Structural similarity from whole-image means, variances and covariance."""
    x, y = _pair(x, y)
    mx, my = x.mean(), y.mean()
    vx = np.mean((x - mx) ** 2)
    vy = np.mean((y - my) ** 2)
    cov = np.mean((x - mx) * (y - my))
    c1, c2 = params.c1, params.c2
    return float(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))


def confusion(preds, truths, n_classes):
    """Counts with rows = truth, columns = prediction."""
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise DimensionError(f"{preds.size} predictions vs {truths.size} truths")
    for name, arr in (("prediction", preds), ("truth", truths)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ParameterError(f"{name} class outside [0, {n_classes})")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (truths, preds), 1)
    return out


def accuracy(preds, truths):
    preds = np.asarray(preds)
    truths = np.asarray(truths)
    if preds.shape != truths.shape:
        raise DimensionError(f"{preds.size} predictions vs {truths.size} truths")
    return float(np.mean(preds == truths)) if preds.size else 0.0


def accuracy_from_confusion(cm):
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def per_class_accuracy(preds, truths, n_classes):
    """Recall per class; classes absent from ``truths`` get 0."""
    cm = confusion(preds, truths, n_classes)
    rows = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(rows > 0, np.diag(cm) / np.maximum(rows, 1), 0.0)
    return acc
