"""Bilinear sampling with analytic derivatives, and finite-difference image gradients."""

import numpy as np


def image_gradient(img):
    """Central differences with replicated borders; returns ``(gx, gy)``."""
    a = np.asarray(img, dtype=np.float64)
    pad = [(1, 1), (1, 1)] + [(0, 0)] * (a.ndim - 2)
    p = np.pad(a, pad, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def bilinear(img, xs, ys, derivatives=True):
    """Sample ``img`` at continuous ``(xs, ys)`` (column, row) positions.

    Positions outside ``[0, W-1] x [0, H-1]`` return 0 with zero derivative.

    Returns:
        values, d(values)/dx, d(values)/dy, inside mask. Values and
        derivatives carry any trailing channel axis of ``img``. With
        ``derivatives=False`` the two derivative slots are None.
    """
    a = np.asarray(img, dtype=np.float64)
    h, w = a.shape[:2]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.where(inside, xs, 0.0)
    yc = np.where(inside, ys, 0.0)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    if a.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
        m = inside[..., None]
    else:
        m = inside
    i00 = a[y0, x0]
    i01 = a[y0, x1]
    i10 = a[y1, x0]
    i11 = a[y1, x1]
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    val = top + fy * (bot - top)
    if not derivatives:
        return np.where(m, val, 0.0), None, None, inside
    dx = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    dy = bot - top
    return np.where(m, val, 0.0), np.where(m, dx, 0.0), np.where(m, dy, 0.0), inside


def pixel_grid(h, w):
    """Column and row coordinate arrays of shape ``(h, w)``."""
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)
