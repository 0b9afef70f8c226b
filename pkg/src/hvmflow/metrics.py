"""End-point error and threshold accuracy."""

import numpy as np

from .errors import EmptyMaskError, ShapeError


def _errors(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    err = np.linalg.norm(pred - gt, axis=-1)
    m = np.ones(err.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != err.shape:
        raise ShapeError(f"mask {m.shape} vs flow {err.shape}")
    if not m.any():
        raise EmptyMaskError("metric mask is empty")
    return err[m]


def metric_epe(pred, gt, mask=None):
    """Mean Euclidean end-point error over ``mask``."""
    return float(np.mean(_errors(pred, gt, mask)))


def metric_acc(pred, gt, mask=None, threshold=1.0):
    """Percentage of masked entries whose end-point error is below ``threshold``."""
    return float(100.0 * np.mean(_errors(pred, gt, mask) < threshold))
