"""Event/LiDAR fusion in image-plane structure space.

Events (position + polarity) and projected LiDAR returns (position +
normalised depth) are clustered jointly into superpixel-like neighbourhoods.
Inside each neighbourhood, event coordinates densify the LiDAR contour and
LiDAR depths are propagated onto the events by inverse-distance weighting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, EmptyMaskError, ShapeError
from .types import Image, LossValue, ProjectedPoints

logger = logging.getLogger(__name__)

EPS_WEIGHT = 1e-6


@dataclass
class Event2DPoints:
    """Time-collapsed events: one ``(u, v, p)`` entry per event, duplicates kept."""

    u: np.ndarray
    v: np.ndarray
    p: np.ndarray

    def __len__(self):
        return self.u.size


@dataclass(frozen=True)
class DistanceParams:
    """``n_s`` is the spatial normaliser in pixels (the expected neighbourhood extent)."""

    n_s: float = 16.0

    def __post_init__(self):
        if not self.n_s > 0:
            raise ValueError(f"n_s must be positive, got {self.n_s}")


@dataclass
class ClusterMap:
    """Joint clustering result.

    Centers carry a shared position plus one value per modality: mean
    polarity over event members and mean normalised depth over LiDAR
    members. ``objective`` is the sum of squared joint distances of every
    point to its center; ``history`` holds it after each iteration.
    """

    event_labels: np.ndarray
    lidar_labels: np.ndarray
    centers: np.ndarray
    center_polarity: np.ndarray
    center_depth: np.ndarray
    objective: float
    history: list = field(default_factory=list)
    pitch: float = 0.0
    k_reduced: bool = False
    depth_scale: float = 1.0

    @property
    def n_clusters(self):
        return self.centers.shape[0]


@dataclass
class Densified2D:
    """LiDAR coordinates followed by the event coordinates added to them.

    ``event_index`` is -1 for original LiDAR entries; ``d`` is 0 for added
    event coordinates, whose depth is produced by :func:`fuse_depth`.
    """

    u: np.ndarray
    v: np.ndarray
    d: np.ndarray
    event_index: np.ndarray
    n_lidar: int

    def __len__(self):
        return self.u.size

    @property
    def added(self):
        return self.event_index[self.n_lidar:]


def normalize_event_coords(ev):
    """Drop timestamps: ``u = x, v = y`` with the polarity kept."""
    return Event2DPoints(ev.x.astype(np.float64), ev.y.astype(np.float64),
                         ev.p.astype(np.float64))


def depth_values(P_l, d_max=None):
    """LiDAR depth normalised by the per-frame maximum, in (0, 1]."""
    d = np.asarray(P_l.d, dtype=np.float64)
    if d.size == 0:
        return d
    scale = float(d.max()) if d_max is None else float(d_max)
    return d / scale


def joint_distance(a, b, params=DistanceParams()):
    """Self-similarity distance between two ``(u, v, value)`` points.

    ``value`` is polarity for events and normalised depth for LiDAR:
    ``sqrt(dv^2 + (ds / n_s)^2)``. Pass ``value=None`` on either side for a
    cross-modal pair, where only the spatial term is comparable.
    """
    ds = np.hypot(a[0] - b[0], a[1] - b[1])
    if len(a) < 3 or len(b) < 3 or a[2] is None or b[2] is None:
        dp = 0.0
    else:
        dp = np.sqrt((a[2] - b[2]) ** 2)
    return float(np.sqrt(dp ** 2 + (ds / params.n_s) ** 2))


def _grid_seeds(width, height, k):
    """``k`` seeds laid out in near-square rows across the image plane."""
    rows = max(1, min(k, int(round(np.sqrt(k * height / width)))))
    per_row = [k // rows + (1 if r < k % rows else 0) for r in range(rows)]
    seeds = []
    for r, n in enumerate(per_row):
        y = (r + 0.5) * height / rows
        for c in range(n):
            seeds.append(((c + 0.5) * width / n, y))
    return np.array(seeds, dtype=np.float64)


def _sq_dist(pos, val, is_event, centers, cpol, cdep, n_s):
    d2 = ((pos[:, None, 0] - centers[None, :, 0]) ** 2
          + (pos[:, None, 1] - centers[None, :, 1]) ** 2) / n_s ** 2
    cval = np.where(is_event[:, None], cpol[None, :], cdep[None, :])
    return d2 + (val[:, None] - cval) ** 2


def _update(pos, val, is_event, labels, centers, cpol, cdep):
    k = centers.shape[0]
    count = np.bincount(labels, minlength=k)
    has = count > 0
    centers = centers.copy()
    for axis in (0, 1):
        s = np.bincount(labels, weights=pos[:, axis], minlength=k)
        centers[has, axis] = s[has] / count[has]
    for sel, cv in ((is_event, cpol), (~is_event, cdep)):
        n = np.bincount(labels[sel], minlength=k)
        s = np.bincount(labels[sel], weights=val[sel], minlength=k)
        ok = n > 0
        cv[ok] = s[ok] / n[ok]
    return centers


def _objective(d2, labels):
    return float(np.sum(d2[np.arange(labels.size), labels]))


def cluster_neighbors(P_e, P_l, k_clusters, iters=10, params=DistanceParams(),
                      seed=0, image_size=None, d_max=None, jitter=0.25):
    """Jointly cluster event and projected-LiDAR coordinates.

    Seeds sit on a grid of pitch ``S = sqrt(W*H/K)`` and are jittered by up
    to ``jitter * S`` (seeded). Each iteration assigns every point to the
    nearest center whose ``2S x 2S`` window contains it, never leaving its
    current center for an equal or worse one, then moves centers to member
    means. The summed squared distance therefore never increases.

    Args:
        P_e: event coordinates.
        P_l: projected LiDAR entries.
        k_clusters: requested number of clusters; reduced to the point count
            when larger (``k_reduced`` is set).
        iters: maximum number of assign/update rounds.
        params: distance normaliser.
        seed: jitter seed.
        image_size: ``(width, height)``; inferred from the points if omitted.
        d_max: depth normaliser; per-frame maximum by default.
    """
    n_e, n_l = len(P_e), len(P_l)
    n = n_e + n_l
    if n == 0:
        raise EmptyInputError("clustering needs at least one point")
    if k_clusters < 1:
        raise ValueError(f"k_clusters must be >= 1, got {k_clusters}")
    pos = np.concatenate([np.stack([P_e.u, P_e.v], axis=1).reshape(-1, 2),
                          np.stack([P_l.u, P_l.v], axis=1).reshape(-1, 2)])
    scale = float(np.max(P_l.d)) if (d_max is None and n_l) else (d_max or 1.0)
    val = np.concatenate([np.asarray(P_e.p, dtype=np.float64), depth_values(P_l, scale)])
    is_event = np.arange(n) < n_e

    k_reduced = k_clusters > n
    if k_reduced:
        logger.warning("k_clusters=%d exceeds %d points; reducing", k_clusters, n)
        k_clusters = n
    if image_size is None:
        width = float(pos[:, 0].max()) + 1.0
        height = float(pos[:, 1].max()) + 1.0
    else:
        width, height = image_size
    pitch = float(np.sqrt(width * height / k_clusters))
    centers = _grid_seeds(width, height, k_clusters)
    if jitter > 0:
        rng = np.random.default_rng(seed)
        centers += rng.uniform(-jitter * pitch, jitter * pitch, size=centers.shape)
        centers[:, 0] = np.clip(centers[:, 0], 0.0, width)
        centers[:, 1] = np.clip(centers[:, 1], 0.0, height)

    # initial center values from points inside each seed's window
    near = ((np.abs(pos[:, None, 0] - centers[None, :, 0]) <= pitch)
            & (np.abs(pos[:, None, 1] - centers[None, :, 1]) <= pitch))
    cpol = np.zeros(k_clusters)
    cdep = np.full(k_clusters, float(val[~is_event].mean()) if n_l else 0.5)
    for sel, cv in ((is_event, cpol), (~is_event, cdep)):
        cnt = near[sel].sum(axis=0)
        s = (near[sel] * val[sel, None]).sum(axis=0)
        ok = cnt > 0
        cv[ok] = s[ok] / cnt[ok]

    labels = None
    history = []
    for _ in range(max(iters, 1)):
        d2 = _sq_dist(pos, val, is_event, centers, cpol, cdep, params.n_s)
        win = ((np.abs(pos[:, None, 0] - centers[None, :, 0]) <= pitch)
               & (np.abs(pos[:, None, 1] - centers[None, :, 1]) <= pitch))
        cand = np.where(win, d2, np.inf)
        best = np.argmin(cand, axis=1)
        none = ~np.isfinite(cand[np.arange(n), best])
        if np.any(none):
            best[none] = np.argmin(d2[none], axis=1)
        if labels is None:
            new = best
        else:
            stay = d2[np.arange(n), labels]
            move = d2[np.arange(n), best] < stay
            new = np.where(move, best, labels)
        changed = labels is None or np.any(new != labels)
        labels = new
        centers = _update(pos, val, is_event, labels, centers, cpol, cdep)
        d2 = _sq_dist(pos, val, is_event, centers, cpol, cdep, params.n_s)
        obj = _objective(d2, labels)
        done = not changed or (history and history[-1] - obj < 1e-9)
        history.append(obj)
        if done:
            break

    used, labels = np.unique(labels, return_inverse=True)
    return ClusterMap(
        event_labels=labels[:n_e],
        lidar_labels=labels[n_e:],
        centers=centers[used],
        center_polarity=cpol[used],
        center_depth=cdep[used],
        objective=history[-1],
        history=history,
        pitch=pitch,
        k_reduced=k_reduced,
        depth_scale=scale,
    )


def _nearest_in_cluster(qu, qv, su, sv, k, n_s):
    """Indices (into the source arrays) of the ``k`` nearest sources per query.

    Ties resolve to the earlier source. Returns index and distance arrays of
    shape ``(n_query, min(k, n_source))``.
    """
    d = np.hypot(qu[:, None] - su[None, :], qv[:, None] - sv[None, :]) / n_s
    kk = min(k, su.size)
    order = np.argsort(d, axis=1, kind="stable")[:, :kk]
    return order, np.take_along_axis(d, order, axis=1)


def fill_boundary(P_l, P_e, clusters, k=5, params=DistanceParams()):
    """Event-to-LiDAR structure fusion.

    Each projected LiDAR coordinate pulls in the ``k`` most similar event
    coordinates from its own cluster. Originals are kept; every event is
    added at most once, in order of first selection.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n_l = len(P_l)
    chosen = []
    e_lab = clusters.event_labels
    l_lab = clusters.lidar_labels
    for c in np.unique(l_lab):
        ev_idx = np.flatnonzero(e_lab == c)
        if ev_idx.size == 0:
            continue
        li = np.flatnonzero(l_lab == c)
        order, _ = _nearest_in_cluster(P_l.u[li], P_l.v[li], P_e.u[ev_idx],
                                       P_e.v[ev_idx], k, params.n_s)
        chosen.append(ev_idx[order.reshape(-1)])
    if chosen:
        picked = np.concatenate(chosen)
        _, first = np.unique(picked, return_index=True)
        added = picked[np.sort(first)]
    else:
        added = np.zeros(0, dtype=np.int64)
    return Densified2D(
        u=np.concatenate([P_l.u, P_e.u[added]]),
        v=np.concatenate([P_l.v, P_e.v[added]]),
        d=np.concatenate([P_l.d, np.zeros(added.size)]),
        event_index=np.concatenate([np.full(n_l, -1, dtype=np.int64), added]),
        n_lidar=n_l,
    )


@dataclass
class DepthFusion:
    """Per-event fused depths alongside the rendered depth image."""

    depth: Image
    event_depth: np.ndarray
    source_min: np.ndarray
    source_max: np.ndarray


def fuse_depth_detailed(P_l, P_e, clusters, k, K, params=DistanceParams()):
    """LiDAR-to-event depth fusion, returning per-event diagnostics as well."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n_e = len(P_e)
    ev_depth = np.zeros(n_e)
    lo = np.zeros(n_e)
    hi = np.zeros(n_e)
    e_lab = clusters.event_labels
    l_lab = clusters.lidar_labels
    for c in np.unique(e_lab):
        li = np.flatnonzero(l_lab == c)
        if li.size == 0:
            continue
        ei = np.flatnonzero(e_lab == c)
        order, dist = _nearest_in_cluster(P_e.u[ei], P_e.v[ei], P_l.u[li], P_l.v[li],
                                          k, params.n_s)
        src = P_l.d[li][order]
        w = 1.0 / (dist + EPS_WEIGHT)
        w /= w.sum(axis=1, keepdims=True)
        lo[ei] = src.min(axis=1)
        hi[ei] = src.max(axis=1)
        # a convex combination; the clip only removes last-bit rounding overshoot
        ev_depth[ei] = np.clip(np.sum(w * src, axis=1), lo[ei], hi[ei])

    img = np.full(K.shape, np.inf)
    has = ev_depth > 0
    cols = np.clip(np.rint(P_e.u[has]).astype(np.int64), 0, K.width - 1)
    rows = np.clip(np.rint(P_e.v[has]).astype(np.int64), 0, K.height - 1)
    np.minimum.at(img, (rows, cols), ev_depth[has])
    if len(P_l):
        cols = np.clip(np.rint(P_l.u).astype(np.int64), 0, K.width - 1)
        rows = np.clip(np.rint(P_l.v).astype(np.int64), 0, K.height - 1)
        np.minimum.at(img, (rows, cols), P_l.d)
    img[~np.isfinite(img)] = 0.0
    return DepthFusion(Image(img, "DEPTH"), ev_depth, lo, hi)


def fuse_depth(P_l, P_e, clusters, k, K, params=DistanceParams()):
    """Depth image where each event pixel gets the inverse-distance-weighted
    depth of its ``k`` most similar co-clustered LiDAR entries.

    LiDAR entries splat their own depth; collisions keep the nearest depth;
    pixels reached by neither stay 0.
    """
    return fuse_depth_detailed(P_l, P_e, clusters, k, K, params).depth


def pseudo_label_loss(d_pred_t, d_pse_t, d_pred_t2, d_pse_t2):
    """L1 between predicted depth and pseudo labels, summed over both frames.

    Each frame contributes its mean absolute error over pixels with a
    positive pseudo label.
    """
    total = 0.0
    grads = {}
    for name, pred, pse in (("d_pred_t", d_pred_t, d_pse_t),
                            ("d_pred_t2", d_pred_t2, d_pse_t2)):
        pred = np.asarray(pred, dtype=np.float64)
        pse = np.asarray(pse, dtype=np.float64)
        if pred.shape != pse.shape:
            raise ShapeError(f"{name}: {pred.shape} vs pseudo label {pse.shape}")
        valid = pse > 0
        n = int(valid.sum())
        if n == 0:
            raise EmptyMaskError(f"{name}: no pixel carries a pseudo label")
        diff = np.where(valid, pred - pse, 0.0)
        total += float(np.sum(np.abs(diff)) / n)
        grads[name] = np.sign(diff) / n
    return LossValue(total, grads)


def coverage(depth, region):
    """Fraction of ``region`` pixels holding a positive depth."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        return 0.0
    return float(np.count_nonzero((np.asarray(depth) > 0) & region) / region.sum())


def event_points_to_projected(P_e, depth):
    """Attach fused depths to event coordinates, dropping those without depth."""
    keep = depth > 0
    idx = np.flatnonzero(keep)
    return ProjectedPoints(P_e.u[idx], P_e.v[idx], depth[idx], idx)
