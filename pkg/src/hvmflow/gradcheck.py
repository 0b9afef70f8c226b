"""Finite-difference audit of every analytic loss gradient.

Each check builds a seeded random instance, perturbs individual inputs by
``+-h`` and compares the central difference with the analytic gradient.
Coordinates sitting in a non-smooth neighbourhood are skipped and counted:

* bilinear lookups within ``grid_margin`` of an integer pixel line (the
  interpolant is only piecewise linear there);
* L1 residuals (consistency, pseudo-label) closer than ``l1_margin`` to 0;
* robust photometric residuals closer than ``psi_margin`` to 0, where the
  Charbonnier curvature is large enough to swamp a central difference;
* 3-D points whose nearest-neighbour association flips under ``+-h``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .correlation import SENTINEL, kl_alignment_loss
from .luminance import _residual_parts, adversarial_loss, consistency_loss
from .photometric import photometric_loss
from .sampling import bilinear, pixel_grid
from .structure import pseudo_label_loss

LOSSES = ("consis", "adv", "pse", "kl", "pho")


@dataclass
class CheckResult:
    loss: str
    seed: int
    max_rel_error: float
    checked: int
    excluded: int
    tol: float

    @property
    def passed(self):
        return self.checked > 0 and self.max_rel_error < self.tol


def relative_error(a, n, floor=1e-7):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero pairs stable."""
    return abs(a - n) / max(abs(a), abs(n), floor)


def _near_grid(pos, margin):
    return np.abs(pos - np.rint(pos)) < margin


def _check(fn, x, grad, coords, h):
    """Max relative error of ``grad`` against central differences of ``fn`` at ``coords``."""
    worst = 0.0
    for c in coords:
        orig = x[c]
        x[c] = orig + h
        fp = fn()
        x[c] = orig - h
        fm = fn()
        x[c] = orig
        num = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(float(grad[c]), num))
    return worst


def _pick(rng, candidates, count):
    idx = np.flatnonzero(candidates.ravel())
    if idx.size > count:
        idx = rng.choice(idx, size=count, replace=False)
    return [np.unravel_index(i, candidates.shape) for i in np.sort(idx)]


def _flow_coords_ok(U, margin):
    """Flow entries whose warped position is away from grid lines in both axes."""
    h, w = U.shape[:2]
    xs, ys = pixel_grid(h, w)
    tx, ty = xs + U[..., 0], ys + U[..., 1]
    ok = ~_near_grid(tx, margin) & ~_near_grid(ty, margin)
    return np.repeat(ok[..., None], 2, axis=2)


def check_consis(seed, h=1e-5, count=30, grid_margin=1e-3, l1_margin=1e-3):
    rng = np.random.default_rng(seed)
    H, W = 14, 16
    I = rng.uniform(0, 1, (H, W))
    E = rng.normal(0, 0.2, (H, W))
    U = rng.uniform(-2.5, 2.5, (H, W, 2))
    V = (rng.uniform(size=(H, W)) < 0.7).astype(np.float64)
    V[0, 0] = 1.0
    loss = consistency_loss(I, E, U, V)
    r, _, _ = _residual_parts(I, E, U)
    ok = _flow_coords_ok(U, grid_margin) & (np.abs(r) >= l1_margin)[..., None]
    coords = _pick(rng, ok, count)
    err = _check(lambda: consistency_loss(I, E, U, V).value, U, loss.grads["U"], coords, h)
    return err, len(coords), int(ok.size - ok.sum())


def check_adv(seed, h=1e-5, count=30):
    rng = np.random.default_rng(seed)
    st = rng.uniform(0.05, 0.95, rng.integers(3, 12))
    st2 = rng.uniform(0.05, 0.95, rng.integers(3, 12))
    loss = adversarial_loss(st, st2)
    worst, n = 0.0, 0
    for arr, name in ((st, "scores_t"), (st2, "scores_t2")):
        coords = _pick(rng, np.ones(arr.shape, dtype=bool), count // 2)
        worst = max(worst, _check(lambda: adversarial_loss(st, st2).value, arr,
                                  loss.grads[name], coords, h))
        n += len(coords)
    return worst, n, 0


def check_pse(seed, h=1e-5, count=30, l1_margin=1e-3):
    rng = np.random.default_rng(seed)
    shape = (12, 12)
    pse = [np.where(rng.uniform(size=shape) < 0.5, rng.uniform(1, 10, shape), 0.0)
           for _ in range(2)]
    for p in pse:
        p[0, 0] = 5.0
    pred = [p + rng.normal(0, 0.5, shape) for p in pse]
    loss = pseudo_label_loss(pred[0], pse[0], pred[1], pse[1])
    worst, n, skipped = 0.0, 0, 0
    for k, name in enumerate(("d_pred_t", "d_pred_t2")):
        ok = (pse[k] <= 0) | (np.abs(pred[k] - pse[k]) >= l1_margin)
        skipped += int(ok.size - ok.sum())
        coords = _pick(rng, ok, count // 2)
        worst = max(worst, _check(lambda: pseudo_label_loss(pred[0], pse[0], pred[1], pse[1]).value,
                                  pred[k], loss.grads[name], coords, h))
        n += len(coords)
    return worst, n, skipped


def check_kl(seed, h=1e-5, count=30):
    rng = np.random.default_rng(seed)
    T, N, L = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(3, 10))
    cv_l = rng.normal(0, 1, (2, N, L))
    cv_r = rng.normal(0, 1, (2, N, L))
    cv_e = rng.normal(0, 1, (T, 2, N, L))
    for arr in (cv_l, cv_r, cv_e):
        arr[rng.uniform(size=arr.shape) < 0.1] = SENTINEL
    loss = kl_alignment_loss(cv_l, cv_r, cv_e)
    worst, n, skipped = 0.0, 0, 0
    for arr, name in ((cv_l, "cv_l"), (cv_r, "cv_r"), (cv_e, "cv_e")):
        ok = arr > SENTINEL / 10
        skipped += int(ok.size - ok.sum())
        coords = _pick(rng, ok, count // 3)
        worst = max(worst, _check(lambda: kl_alignment_loss(cv_l, cv_r, cv_e).value, arr,
                                  loss.grads[name], coords, h))
        n += len(coords)
    return worst, n, skipped


def check_pho(seed, h=1e-5, count=30, grid_margin=1e-3, psi_margin=1e-2):
    rng = np.random.default_rng(seed)
    H, W = 14, 16
    I1 = rng.uniform(0, 1, (H, W))
    I2 = rng.uniform(0, 1, (H, W))
    U = rng.uniform(-2.5, 2.5, (H, W, 2))
    mask = rng.uniform(size=(H, W)) < 0.8
    pts = rng.uniform(-1, 1, (20, 3)) + [0, 0, 5]
    target = rng.uniform(-1, 1, (40, 3)) + [0, 0, 5]
    flow3d = rng.normal(0, 0.1, (20, 3))

    def value():
        return photometric_loss(I1, I2, U, pts, target, flow3d, mask_2d=mask).value

    loss = photometric_loss(I1, I2, U, pts, target, flow3d, mask_2d=mask)
    xs, ys = pixel_grid(H, W)
    warped, _, _, _ = bilinear(I2, xs + U[..., 0], ys + U[..., 1])
    ok2 = _flow_coords_ok(U, grid_margin) & (np.abs(I1 - warped) >= psi_margin)[..., None]
    coords = _pick(rng, ok2, count // 2)
    worst = _check(value, U, loss.grads["U"], coords, h)
    n = len(coords)

    tree = cKDTree(target)
    moved = pts + flow3d
    _, nn = tree.query(moved)
    resid = moved - target[nn]
    stable = np.ones(flow3d.shape, dtype=bool)
    for i in range(flow3d.shape[0]):
        for c in range(3):
            for sgn in (1, -1):
                q = moved[i].copy()
                q[c] += sgn * h
                if tree.query(q)[1] != nn[i]:
                    stable[i, c] = False
    ok3 = stable & (np.abs(resid) >= psi_margin)
    coords = _pick(rng, ok3, count // 2)
    worst = max(worst, _check(value, flow3d, loss.grads["flow3d"], coords, h))
    n += len(coords)
    skipped = int(ok2.size - ok2.sum() + ok3.size - ok3.sum())
    return worst, n, skipped


CHECKS = {"consis": check_consis, "adv": check_adv, "pse": check_pse,
          "kl": check_kl, "pho": check_pho}


def run_gradcheck(losses=LOSSES, seeds=20, h=1e-5, tol=1e-4):
    """Audit ``losses`` over ``seeds`` random instances each.

    Returns:
        (list of CheckResult, elapsed seconds)
    """
    start = time.perf_counter()
    results = []
    for name in losses:
        if name not in CHECKS:
            raise ValueError(f"unknown loss {name!r}; choose from {', '.join(LOSSES)}")
        for seed in range(seeds):
            err, n, skipped = CHECKS[name](seed, h=h)
            results.append(CheckResult(name, seed, float(err), n, skipped, tol))
    return results, time.perf_counter() - start
