"""Warps, forward-backward occlusion checks and the robust photometric loss."""

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMaskError, ShapeError
from .sampling import bilinear, pixel_grid
from .types import FlowField2D, FlowField3D, LossValue

PSI_EPS = 1e-3
PSI_P = 0.4


def psi(x, eps=PSI_EPS, p=PSI_P):
    """Generalised Charbonnier ``(x^2 + eps^2)^(p/2) - eps^p``; zero at zero."""
    x = np.asarray(x, dtype=np.float64)
    return (x * x + eps * eps) ** (0.5 * p) - eps ** p


def psi_prime(x, eps=PSI_EPS, p=PSI_P):
    x = np.asarray(x, dtype=np.float64)
    return p * x * (x * x + eps * eps) ** (0.5 * p - 1.0)


def _flow2(U):
    return U.flow if isinstance(U, FlowField2D) else np.asarray(U, dtype=np.float64)


def warp_image(I, U):
    """Backward bilinear warp ``out(x) = I(x + U(x))``.

    Returns:
        (warped image, in-bounds mask); out-of-bounds pixels read 0.
    """
    I = np.asarray(I, dtype=np.float64)
    U = _flow2(U)
    if U.shape[:2] != I.shape[:2]:
        raise ShapeError(f"flow {U.shape[:2]} vs image {I.shape[:2]}")
    xs, ys = pixel_grid(*I.shape[:2])
    val, _, _, inside = bilinear(I, xs + U[..., 0], ys + U[..., 1])
    return val, inside


def warp_points(pc, flow3d):
    """Additive per-point displacement."""
    p = np.asarray(pc, dtype=np.float64)
    f = flow3d.flow if isinstance(flow3d, FlowField3D) else np.asarray(flow3d, dtype=np.float64)
    if p.shape != f.shape:
        raise ShapeError(f"points {p.shape} vs flow {f.shape}")
    return p + f


def default_tau(fwd_sq, bwd_sq):
    return 0.01 + 0.05 * (fwd_sq + bwd_sq)


def occlusion_mask(fwd, bwd, tau=None):
    """Forward-backward consistency for dense 2-D flow.

    A pixel is valid when its forward target lies in frame and
    ``|fwd(x) + bwd(x + fwd(x))| <= tau``; ``bwd`` is read bilinearly. The
    default ``tau`` is ``0.01 + 0.05 * (|fwd|^2 + |bwd|^2)``.
    """
    f = _flow2(fwd)
    b = _flow2(bwd)
    if f.shape != b.shape:
        raise ShapeError(f"forward {f.shape} vs backward {b.shape}")
    xs, ys = pixel_grid(*f.shape[:2])
    bw, _, _, inside = bilinear(b, xs + f[..., 0], ys + f[..., 1])
    err = np.linalg.norm(f + bw, axis=-1)
    if tau is None:
        tau = default_tau(np.sum(f * f, axis=-1), np.sum(bw * bw, axis=-1))
    return inside & (err <= tau)


def occlusion_mask_3d(points1, fwd, points2, bwd, tau=None):
    """Forward-backward consistency for sparse scene flow via nearest samples.

    ``fwd`` is defined on ``points1``, ``bwd`` on ``points2``; each forward
    target is matched to its nearest ``points2`` entry.
    """
    p1 = np.asarray(points1, dtype=np.float64)
    p2 = np.asarray(points2, dtype=np.float64)
    f = fwd.flow if isinstance(fwd, FlowField3D) else np.asarray(fwd, dtype=np.float64)
    b = bwd.flow if isinstance(bwd, FlowField3D) else np.asarray(bwd, dtype=np.float64)
    if p1.shape != f.shape or p2.shape != b.shape:
        raise ShapeError("point/flow shape mismatch")
    if p2.shape[0] == 0:
        return np.zeros(p1.shape[0], dtype=bool)
    _, nn = cKDTree(p2).query(p1 + f)
    bw = b[nn]
    err = np.linalg.norm(f + bw, axis=-1)
    if tau is None:
        tau = default_tau(np.sum(f * f, axis=-1), np.sum(bw * bw, axis=-1))
    return err <= tau


def photometric_loss(I_t, I_t2, U, pts_t=None, pc_t2=None, flow3d=None,
                     mask_2d=None, mask_3d=None, eps=PSI_EPS, p=PSI_P):
    """Robust photometric loss over image and point residuals.

    2-D term: masked mean of ``psi(I_t - warp(I_t2, U))`` (channel mean for
    colour input); pixels whose warp leaves the frame are dropped from the
    mask. 3-D term (when ``pts_t`` is given): masked mean over samples of
    ``sum_c psi(r_c)`` with ``r = pts_t + flow3d - nn(pts_t + flow3d)`` and
    ``nn`` the nearest ``pc_t2`` point; association is held fixed for the
    gradient.

    Returns:
        LossValue with gradients ``"U"`` ``(H, W, 2)`` and, when the 3-D term
        is present, ``"flow3d"`` ``(N, 3)``.
    """
    a = np.asarray(I_t, dtype=np.float64)
    b = np.asarray(I_t2, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"frames differ: {a.shape} vs {b.shape}")
    U = _flow2(U)
    h, w = a.shape[:2]
    if U.shape != (h, w, 2):
        raise ShapeError(f"flow {U.shape} vs frame {(h, w)}")
    m2 = np.ones((h, w), dtype=bool) if mask_2d is None else np.asarray(mask_2d, dtype=bool)
    xs, ys = pixel_grid(h, w)
    val, dx, dy, inside = bilinear(b, xs + U[..., 0], ys + U[..., 1])
    m2 = m2 & inside
    n2 = int(m2.sum())
    if n2 == 0:
        raise EmptyMaskError("2-D photometric mask is empty")
    res = a - val
    if res.ndim == 3:
        nc = res.shape[2]
        per_pix = psi(res, eps, p).mean(axis=2)
        dpsi = psi_prime(res, eps, p) / nc
        gu = -np.sum(dpsi * dx, axis=2)
        gv = -np.sum(dpsi * dy, axis=2)
    else:
        per_pix = psi(res, eps, p)
        dpsi = psi_prime(res, eps, p)
        gu = -dpsi * dx
        gv = -dpsi * dy
    value = float(np.sum(per_pix[m2]) / n2)
    scale = m2 / n2
    grads = {"U": np.stack([gu * scale, gv * scale], axis=-1)}

    if pts_t is not None:
        pts = np.asarray(pts_t, dtype=np.float64)
        f = flow3d.flow if isinstance(flow3d, FlowField3D) else np.asarray(flow3d, dtype=np.float64)
        if f.shape != pts.shape:
            raise ShapeError(f"scene flow {f.shape} vs points {pts.shape}")
        m3 = np.ones(pts.shape[0], dtype=bool) if mask_3d is None else np.asarray(mask_3d, bool)
        n3 = int(m3.sum())
        target = np.asarray(pc_t2, dtype=np.float64)
        if n3 == 0 or target.shape[0] == 0:
            raise EmptyMaskError("3-D photometric mask is empty")
        moved = pts + f
        _, nn = cKDTree(target).query(moved)
        r3 = moved - target[nn]
        value += float(np.sum(psi(r3, eps, p)[m3]) / n3)
        grads["flow3d"] = psi_prime(r3, eps, p) * (m3[:, None] / n3)
    return LossValue(value, grads)
