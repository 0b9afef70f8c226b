"""Event/RGB fusion in luminance space and the losses that constrain it."""

import numpy as np

from .color import rgb_to_yuv, yuv_to_rgb
from .errors import DegenerateWeightsError, DomainError, EmptyMaskError, ShapeError
from .events import accumulate_intensity
from .sampling import bilinear, image_gradient, pixel_grid
from .types import FlowField2D, FusionWeights, Image, LossValue

__all__ = [
    "accumulate_intensity",
    "blend_luminance",
    "fuse_luminance",
    "recombine_color",
    "fuse_rgb",
    "adversarial_loss",
    "spatiotemporal_residual",
    "consistency_loss",
    "valid_mask",
]


def _same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def _flow(U):
    if isinstance(U, FlowField2D):
        return U.flow
    return np.asarray(U, dtype=np.float64)


def blend_luminance(I_Y, I_X, w):
    """Weighted luminance ``(w_y*I_Y + w_x*I_X) / (w_y + w_x)`` before clamping."""
    I_Y = np.asarray(I_Y, dtype=np.float64)
    I_X = np.asarray(I_X, dtype=np.float64)
    _same_shape(I_Y, I_X)
    total = w.w_event + w.w_rgb
    if not total > 0:
        raise DegenerateWeightsError("w_event + w_rgb must be positive")
    # normalised coefficients make the w_event == 0 case return I_Y unchanged
    a = w.w_rgb / total
    b = w.w_event / total
    return a * I_Y + b * I_X


def fuse_luminance(I_Y, I_X, w=FusionWeights()):
    """Fuse RGB luma with an event intensity frame.

    Returns:
        (fused LUMA image clamped to [0, 1], number of clamped pixels)
    """
    raw = blend_luminance(I_Y, I_X, w)
    clamped = int(np.count_nonzero((raw < 0.0) | (raw > 1.0)))
    return Image(np.clip(raw, 0.0, 1.0), "LUMA"), clamped


def recombine_color(H_Y, I_U, I_V):
    _same_shape(np.asarray(H_Y), np.asarray(I_U), np.asarray(I_V))
    return yuv_to_rgb(H_Y, I_U, I_V)


def fuse_rgb(rgb, I_X, w=FusionWeights()):
    """Full luminance fusion of one RGB frame: split, fuse Y, recombine.

    Returns:
        (fused RGB image, fused LUMA image, clamp count)
    """
    y, u, v = rgb_to_yuv(rgb)
    fused_y, clamped = fuse_luminance(y, I_X, w)
    return recombine_color(fused_y, u, v), fused_y, clamped


def adversarial_loss(scores_t, scores_t2):
    """Generator-side adversarial term from discriminator outputs on both fused frames.

    ``mean(log(1 - D_t)) + mean(log(1 - D_t2))``; the value is <= 0.
    """
    out = 0.0
    grads = {}
    for name, s in (("scores_t", scores_t), ("scores_t2", scores_t2)):
        s = np.asarray(s, dtype=np.float64)
        if s.size == 0:
            raise DomainError(f"{name} is empty")
        if np.any(~np.isfinite(s)) or np.any(s <= 0.0) or np.any(s >= 1.0):
            raise DomainError(f"{name}: discriminator scores must lie strictly in (0, 1)")
        out += float(np.mean(np.log1p(-s)))
        grads[name] = -1.0 / ((1.0 - s) * s.size)
    return LossValue(out, grads)


def _residual_parts(I, E, U):
    I = np.asarray(I, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    U = _flow(U)
    _same_shape(I, E)
    if U.shape != I.shape + (2,):
        raise ShapeError(f"flow shape {U.shape} does not match image {I.shape}")
    xs, ys = pixel_grid(*I.shape)
    ew, ewx, ewy, inside = bilinear(E, xs + U[..., 0], ys + U[..., 1])
    gx, gy = image_gradient(I)
    r = ew + gx * U[..., 0] + gy * U[..., 1]
    return r, (ewx + gx, ewy + gy), inside


def spatiotemporal_residual(I, E, U):
    """Brightness-constancy residual ``warp(E, U) + grad(I) . U`` per pixel.

    ``E`` is the event intensity frame over the inter-frame interval. The
    warp samples ``E`` bilinearly at ``x + U(x)``; samples that leave the
    frame read 0 and are cleared in the returned mask.

    Returns:
        (residual map, in-bounds mask)
    """
    r, _, inside = _residual_parts(I, E, U)
    return r, inside


def consistency_loss(I, E, U, V):
    """Masked L1 of the spatiotemporal residual, with gradient w.r.t. the flow.

    Args:
        I: luma of the current (fused) frame.
        E: event intensity frame between the two frames.
        U: optical flow, ``(H, W, 2)`` or :class:`FlowField2D`.
        V: binary validity mask.

    Returns:
        LossValue with ``grads["U"]`` of shape ``(H, W, 2)``.
    """
    V = np.asarray(V, dtype=np.float64)
    if np.any((V != 0) & (V != 1)):
        raise ValueError("mask must be binary")
    n = V.sum()
    if n <= 0:
        raise EmptyMaskError("consistency mask is empty")
    r, (dr_du, dr_dv), _ = _residual_parts(I, E, U)
    _same_shape(r, V)
    value = float(np.sum(np.abs(r) * V) / n)
    # subgradient of |.| taken as 0 at the kink
    g = np.sign(r) * V / n
    grad = np.stack([g * dr_du, g * dr_dv], axis=-1)
    return LossValue(value, {"U": grad})


def valid_mask(U, ev, window=None):
    """Pixels whose flow target stays in frame and that saw at least one event."""
    U = _flow(U)
    h, w = U.shape[:2]
    xs, ys = pixel_grid(h, w)
    tx = xs + U[..., 0]
    ty = ys + U[..., 1]
    inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    t0, t1 = ev.window if window is None else window
    fired = np.zeros((h, w), dtype=bool)
    sel = (ev.t >= t0) & (ev.t <= t1)
    fired[ev.y[sel], ev.x[sel]] = True
    return inside & fired
