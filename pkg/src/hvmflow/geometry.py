"""Pinhole projection and depth back-projection."""

import numpy as np

from .types import Image, PointCloud, ProjectedPoints


def project_points(pc, K):
    """Project a cloud into the image plane.

    Points behind the camera or outside ``0 < u < w, 0 < v < h`` are
    dropped. When several points round to the same pixel only the nearest
    survives. Output keeps source-index order.
    """
    pts = np.asarray(pc, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return ProjectedPoints.empty()
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = K.f * x / zs + K.cx
    v = K.f * y / zs + K.cy
    keep = front & (u > 0) & (u < K.width) & (v > 0) & (v < K.height)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return ProjectedPoints.empty()
    u, v, d = u[idx], v[idx], z[idx]
    key = np.rint(v).astype(np.int64) * (K.width + 1) + np.rint(u).astype(np.int64)
    # nearest depth first, then lowest source index, so unique() keeps the winner
    order = np.lexsort((idx, d, key))
    _, first = np.unique(key[order], return_index=True)
    win = np.sort(order[first])
    return ProjectedPoints(u[win], v[win], d[win], idx[win])


def backproject_depth(depth, K):
    """Lift every pixel with positive depth to a 3-D point."""
    d = np.asarray(depth, dtype=np.float64)
    rows, cols = np.nonzero(d > 0)
    z = d[rows, cols]
    x = (cols - K.cx) * z / K.f
    y = (rows - K.cy) * z / K.f
    return PointCloud(np.stack([x, y, z], axis=1))


def splat_depth(proj, K):
    """Render projected points into a DEPTH image with a z-buffer."""
    out = np.zeros(K.shape)
    if len(proj) == 0:
        return Image(out, "DEPTH")
    cols = np.clip(np.rint(proj.u).astype(np.int64), 0, K.width - 1)
    rows = np.clip(np.rint(proj.v).astype(np.int64), 0, K.height - 1)
    order = np.argsort(-proj.d, kind="stable")
    # far-to-near writes: the last (nearest) one sticks
    out[rows[order], cols[order]] = proj.d[order]
    return Image(out, "DEPTH")
