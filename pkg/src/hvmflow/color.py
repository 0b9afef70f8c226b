"""BT.601 full-range YUV (JFIF convention), chroma offset to 0.5."""

import numpy as np

from .errors import FormatError, ShapeError
from .types import Image

KR = 0.299
KB = 0.114
KG = 1.0 - KR - KB


def rgb_to_yuv(img):
    """Split an RGB image into ``(Y, U, V)`` planes, each in [0, 1]."""
    if not isinstance(img, Image) or img.semantics != "RGB":
        tag = getattr(img, "semantics", type(img).__name__)
        raise FormatError(f"rgb_to_yuv expects an RGB image, got {tag}")
    r, g, b = (img.data[..., k] for k in range(3))
    y = KR * r + KG * g + KB * b
    u = (b - y) / (2.0 * (1.0 - KB)) + 0.5
    v = (r - y) / (2.0 * (1.0 - KR)) + 0.5
    # guard rounding excursions of order 1e-16 outside the unit interval
    return (Image(np.clip(y, 0.0, 1.0), "LUMA"),
            Image(np.clip(u, 0.0, 1.0), "YUV"),
            Image(np.clip(v, 0.0, 1.0), "YUV"))


def yuv_to_rgb(y, u, v):
    """Inverse of :func:`rgb_to_yuv`, clamped to [0, 1]."""
    y, u, v = (np.asarray(a, dtype=np.float64) for a in (y, u, v))
    if not (y.shape == u.shape == v.shape):
        raise ShapeError(f"plane shapes differ: {y.shape}, {u.shape}, {v.shape}")
    r = y + 2.0 * (1.0 - KR) * (v - 0.5)
    b = y + 2.0 * (1.0 - KB) * (u - 0.5)
    g = (y - KR * r - KB * b) / KG
    rgb = np.stack([r, g, b], axis=-1)
    return Image(np.clip(rgb, 0.0, 1.0), "RGB")


def luma(img):
    """Luma plane of an RGB image, or the data itself for single-channel input."""
    data = np.asarray(img, dtype=np.float64)
    if data.ndim == 3:
        return KR * data[..., 0] + KG * data[..., 1] + KB * data[..., 2]
    return data
