"""Per-modality correlation profiles, distribution alignment, fusion and readout.

Profiles are stored as arrays of shape ``(A, N, L)``: axis, sample, and
displacement index with ``L = 2r + 1``. Event profiles add a leading slice
axis, ``(T, A, N, L)``. Lookups with no valid target hold ``SENTINEL``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import uniform_filter
from scipy.spatial import cKDTree

from .errors import EmptyInputError, ShapeError
from .geometry import project_points
from .sampling import bilinear, image_gradient, pixel_grid
from .types import FlowField2D, FlowField3D, LossValue

SENTINEL = -1e9
_SENT_CUT = -1e8
SIGMA_FLOOR = 1e-6
MODALITIES = ("RGB", "EVENT_SLICE", "LIDAR")


def is_sentinel(a):
    return np.asarray(a) <= _SENT_CUT


@dataclass
class FeatureMap:
    """Encoder output. Images: ``data`` is ``(H, W, C)``. LiDAR: ``(N, C)`` with ``points``."""

    data: np.ndarray
    modality: str
    points: np.ndarray = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def channels(self):
        return self.data.shape[-1]


@dataclass
class SampleSet:
    """``N`` cloud indices with their 3-D positions and image projections."""

    index: np.ndarray
    points: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __len__(self):
        return self.index.size


@dataclass
class CorrelationVolume:
    """Axis profiles for one modality. ``profiles`` is ``(A, N, 2r+1)``."""

    profiles: np.ndarray
    radius: int
    axes: str
    modality: str
    slice_index: int = None

    @property
    def valid(self):
        """Samples with at least one finite entry on every axis."""
        return np.all(np.any(~is_sentinel(self.profiles), axis=-1), axis=0)


def sample_points(pc, N, K, seed=0):
    """Uniformly pick ``N`` projectable cloud points without replacement.

    When fewer than ``N`` points project inside the image every one of them
    is returned once, in a seeded random order.
    """
    pts = np.asarray(pc, dtype=np.float64).reshape(-1, 3)
    proj = project_points(pts, K)
    if len(proj) == 0:
        raise EmptyInputError("no cloud point projects inside the image")
    rng = np.random.default_rng(seed)
    m = len(proj)
    pick = rng.permutation(m) if N >= m else rng.choice(m, size=N, replace=False)
    idx = proj.index[pick]
    return SampleSet(idx, pts[idx], proj.u[pick], proj.v[pick])


def _standardize(ch):
    mu = ch.mean(axis=tuple(range(ch.ndim - 1)), keepdims=True)
    sd = ch.std(axis=tuple(range(ch.ndim - 1)), keepdims=True)
    return (ch - mu) / np.maximum(sd, SIGMA_FLOOR)


def encode_image(img, modality="RGB"):
    """Hand-crafted per-pixel features: intensity, |d/dx|, |d/dy|, 3x3 mean.

    Multi-channel input is reduced to its channel mean first. Each channel
    is standardised to zero mean and unit variance over the frame.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=2)
    gx, gy = image_gradient(a)
    box = uniform_filter(a, size=3, mode="nearest")
    ch = np.stack([a, np.abs(gx), np.abs(gy), box], axis=-1)
    return FeatureMap(_standardize(ch), modality)


def encode_cloud(pc, rho=0.2):
    """Translation-invariant local geometry per point.

    Channels: offset of the point from its radius-``rho`` neighbourhood
    centroid (divided by ``rho``, three channels) and the neighbour count.
    Standardised per frame.
    """
    pts = np.asarray(pc, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return FeatureMap(np.zeros((0, 4)), "LIDAR", pts)
    tree = cKDTree(pts)
    nbrs = tree.query_ball_point(pts, rho)
    counts = np.array([len(n) for n in nbrs], dtype=np.float64)
    flat = np.concatenate(nbrs).astype(np.int64)
    owner = np.repeat(np.arange(pts.shape[0]), counts.astype(np.int64))
    sums = np.zeros_like(pts)
    np.add.at(sums, owner, pts[flat])
    centroid = sums / counts[:, None]
    ch = np.concatenate([(pts - centroid) / rho, counts[:, None]], axis=1)
    return FeatureMap(_standardize(ch), "LIDAR", pts)


def encode_features(data, modality="RGB", rho=0.2):
    """Dispatch to the image or point-cloud encoder by modality."""
    if modality == "LIDAR":
        return encode_cloud(data, rho)
    return encode_image(data, modality)


def _warp_map(F, U):
    if U is None:
        return F
    flow = U.flow if isinstance(U, FlowField2D) else np.asarray(U, dtype=np.float64)
    if not np.any(flow):
        return F
    xs, ys = pixel_grid(*F.shape[:2])
    val, _, _, _ = bilinear(F, xs + flow[..., 0], ys + flow[..., 1])
    return val


def _normalize(desc, normalize):
    if normalize:
        c = desc.shape[-1]
        norm = np.linalg.norm(desc, axis=-1, keepdims=True)
        desc = desc / np.maximum(norm, SIGMA_FLOOR) * c ** 0.25
    return desc


def _descriptors(F, xs, ys, patch, normalize):
    """Stack features over a ``(2p+1)^2`` neighbourhood at each position."""
    offs = np.arange(-patch, patch + 1, dtype=np.float64)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    val, _, _, _ = bilinear(F, xs[..., None] + ox.ravel(), ys[..., None] + oy.ravel(),
                            derivatives=False)
    return _normalize(val.reshape(val.shape[:-2] + (-1,)), normalize)


def _strip_descriptors(F, cu, cv, axis, r, patch, normalize):
    """Descriptors at ``c + d * e_axis`` for ``d = -r..r``, shape ``(N, 2r+1, C')``.

    Neighbouring displacements share all but one row (or column) of patch
    taps, so one strip of ``(2p+1) x (2r+2p+1)`` samples per centre is read
    and the patches are cut from it with a sliding window.
    """
    k = 2 * patch + 1
    along = np.arange(-(r + patch), r + patch + 1, dtype=np.float64)
    across = np.arange(-patch, patch + 1, dtype=np.float64)
    if axis == 0:
        X = cu[:, None, None] + along[None, None, :]
        Y = cv[:, None, None] + across[None, :, None]
    else:
        X = cu[:, None, None] + across[None, None, :]
        Y = cv[:, None, None] + along[None, :, None]
    val, _, _, _ = bilinear(F, X, Y, derivatives=False)
    if val.ndim == 3:
        val = val[..., None]
    if axis == 0:
        # (N, row, col, C) -> windows over col: (N, row, L, C, col) -> (N, L, row, col, C)
        win = sliding_window_view(val, k, axis=2).transpose(0, 2, 1, 4, 3)
    else:
        # (N, row, col, C) -> windows over row: (N, L, col, C, row) -> (N, L, row, col, C)
        win = sliding_window_view(val, k, axis=1).transpose(0, 1, 4, 2, 3)
    n, L = win.shape[:2]
    return _normalize(win.reshape(n, L, -1), normalize)


def build_correlation_2d(F1, F2, samples, U_init=None, r=4, patch=2, normalize=True,
                         axes="xy"):
    """x- and y-axis correlation profiles between two image feature maps.

    ``U_init`` is either a dense ``(H, W, 2)`` flow by which ``F2`` is
    warped first, or ``(N, 2)`` per-sample displacements that shift each
    sample's search window. The full window score is
    ``<f1(x), f2(x + d)> / sqrt(C)`` where ``f`` stacks the feature channels
    over a ``(2*patch+1)^2`` neighbourhood; with ``normalize`` each stacked
    descriptor is scaled so the score is the cosine similarity. The x
    profile is the ``dy = 0`` row of the window and the y profile the
    ``dx = 0`` column. Displacements whose centre leaves the frame score
    ``SENTINEL``.

    Returns:
        (cv_x, cv_y) CorrelationVolumes with one-axis profiles; an axis left
        out of ``axes`` is returned as None.
    """
    a, b = np.asarray(F1.data), np.asarray(F2.data)
    if a.shape != b.shape:
        raise ShapeError(f"feature maps differ: {a.shape} vs {b.shape}")
    if r < 1:
        raise ValueError("radius must be >= 1")
    h, w = a.shape[:2]
    u = np.asarray(samples.u, dtype=np.float64)
    v = np.asarray(samples.v, dtype=np.float64)
    base = np.zeros((u.size, 2))
    if U_init is not None and np.ndim(U_init) == 2 and not isinstance(U_init, FlowField2D):
        base = np.asarray(U_init, dtype=np.float64)
        if base.shape != (u.size, 2):
            raise ShapeError(f"per-sample displacements {base.shape} vs {u.size} samples")
    else:
        b = _warp_map(b, U_init)
    d1 = _descriptors(a, u, v, patch, normalize)
    c = d1.shape[-1]
    disp = np.arange(-r, r + 1, dtype=np.float64)
    cu, cv = u + base[:, 0], v + base[:, 1]
    out = []
    for axis, name in ((0, "x"), (1, "y")):
        if name not in axes:
            out.append(None)
            continue
        d2 = _strip_descriptors(b, cu, cv, axis, r, patch, normalize)
        score = np.einsum("nc,nlc->nl", d1, d2) / np.sqrt(c)
        tx = cu[:, None] + (disp[None, :] if axis == 0 else 0.0)
        ty = cv[:, None] + (disp[None, :] if axis == 1 else 0.0)
        inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
        prof = np.where(inside, score, SENTINEL)
        out.append(CorrelationVolume(prof[None], r, name, F1.modality))
    return tuple(out)


def build_correlation_3d(pcF1, pcF2, samples, offsets, r, rho_max=0.3, rho=0.2,
                         normalize=True):
    """x-, y- and z-axis correlation profiles between two LiDAR feature sets.

    For sample ``p`` and displacement ``delta`` along axis ``a`` the score is
    ``<f1(p), f2(q)> / sqrt(C) - |p + delta e_a - q|^2 / rho^2`` with ``q``
    the nearest cloud-2 point to the displaced position. The residual term
    ranks displaced positions that land on a return above ones that fall
    between returns. No neighbour within ``rho_max`` scores ``SENTINEL``.
    With ``normalize`` the feature term is a cosine similarity, on the same
    scale as the image profiles.

    Args:
        offsets: per-axis displacements in meters, each either ``(2r+1,)``
            or ``(N, 2r+1)``; a dict keyed ``"x"``, ``"y"``, ``"z"`` or a
            sequence of three.
    """
    if pcF2.points is None or pcF2.points.shape[0] == 0:
        raise EmptyInputError("second cloud is empty")
    if isinstance(offsets, dict):
        offsets = [offsets[k] for k in "xyz"]
    L = 2 * r + 1
    p = pcF1.points[samples.index]
    f1 = pcF1.data[samples.index]
    n = p.shape[0]
    c = pcF1.channels
    tree = cKDTree(pcF2.points)
    data2 = pcF2.data
    if normalize:
        f1 = _normalize(f1, True)
        data2 = _normalize(data2, True)
    out = []
    for axis in range(3):
        off = np.broadcast_to(np.asarray(offsets[axis], dtype=np.float64), (n, L))
        q = np.repeat(p[:, None, :], L, axis=1)
        q[..., axis] += off
        dist, nn = tree.query(q.reshape(-1, 3), distance_upper_bound=rho_max)
        ok = np.isfinite(dist)
        nn = np.where(ok, nn, 0)
        f2 = data2[nn].reshape(n, L, c)
        score = np.einsum("nc,nlc->nl", f1, f2) / np.sqrt(c)
        score -= (np.where(ok, dist, 0.0) ** 2).reshape(n, L) / rho ** 2
        out.append(np.where(ok.reshape(n, L), score, SENTINEL))
    return tuple(CorrelationVolume(o[None], r, ax, "LIDAR") for o, ax in zip(out, "xyz"))


def softmax(a, axis=-1):
    """Softmax that gives sentinel entries exactly zero probability."""
    a = np.asarray(a, dtype=np.float64)
    sent = is_sentinel(a)
    m = np.max(np.where(sent, -np.inf, a), axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(sent, 0.0, np.exp(np.where(sent, 0.0, a - m)))
    s = e.sum(axis=axis, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def _kl_pair(a, b):
    """KL(softmax(a) || softmax(b)) over the entries finite in both.

    Works on the last axis. Returns the value and gradients w.r.t. ``a``
    and ``b``; rows without a shared finite entry contribute 0.
    """
    common = ~is_sentinel(a) & ~is_sentinel(b)
    aa = np.where(common, a, SENTINEL)
    bb = np.where(common, b, SENTINEL)
    P = softmax(aa)
    Q = softmax(bb)
    logP = np.log(np.where(common, P, 1.0))
    logQ = np.log(np.where(common, Q, 1.0))
    kl = np.sum(np.where(common, P * (logP - logQ), 0.0), axis=-1)
    ga = np.where(common, P * (logP - logQ - kl[..., None]), 0.0)
    gb = np.where(common, Q - P, 0.0)
    return kl, ga, gb


def kl_alignment_loss(cv_l, cv_r, cv_e):
    """Align RGB and event correlation distributions to the LiDAR one.

    ``mean_n sum_axis [KL(P_l || P_r) + mean_t KL(P_l || P_e,t)]`` with
    ``P = softmax(profile)``.

    Args:
        cv_l: LiDAR x/y profiles, ``(2, N, L)``.
        cv_r: RGB x/y profiles, ``(2, N, L)``.
        cv_e: event x/y profiles per slice, ``(T, 2, N, L)``.

    Returns:
        LossValue with gradients ``"cv_l"``, ``"cv_r"``, ``"cv_e"``.
    """
    cv_l = np.asarray(cv_l, dtype=np.float64)
    cv_r = np.asarray(cv_r, dtype=np.float64)
    cv_e = np.asarray(cv_e, dtype=np.float64)
    if cv_e.ndim == cv_l.ndim:
        cv_e = cv_e[None]
    if cv_l.shape != cv_r.shape or cv_e.shape[1:] != cv_l.shape:
        raise ShapeError(f"profile shapes differ: lidar {cv_l.shape}, rgb {cv_r.shape}, "
                         f"event {cv_e.shape}")
    n = cv_l.shape[-2]
    T = cv_e.shape[0]
    kl_r, gl, gr = _kl_pair(cv_l, cv_r)
    kl_e, gle, ge = _kl_pair(cv_l[None], cv_e)
    value = (np.sum(kl_r) + np.sum(kl_e) / T) / n
    return LossValue(float(value), {
        "cv_l": (gl + gle.sum(axis=0) / T) / n,
        "cv_r": gr / n,
        "cv_e": ge / (T * n),
    })


def fuse_correlation(cv_r, cv_e, cv_l):
    """Average RGB, event and LiDAR profiles per axis, then append LiDAR z.

    ``corr_a = (1/T) sum_t (cv_r,a + cv_e,a,t + cv_l,a) / 3`` for a in {x, y};
    ``corr_z = cv_l,z``. Any sentinel among the contributors makes the fused
    entry a sentinel.

    Args:
        cv_r: ``(2, N, L)``; cv_e: ``(T, 2, N, L)``; cv_l: ``(3, N, L)``.

    Returns:
        ``(3, N, L)`` fused profiles.
    """
    cv_r = np.asarray(cv_r, dtype=np.float64)
    cv_e = np.asarray(cv_e, dtype=np.float64)
    cv_l = np.asarray(cv_l, dtype=np.float64)
    if cv_e.ndim == cv_r.ndim:
        cv_e = cv_e[None]
    if cv_e.shape[0] < 1:
        raise ShapeError("need at least one event slice")
    if cv_r.shape[0] != 2 or cv_l.shape[0] != 3 or cv_e.shape[1:] != cv_r.shape \
            or cv_l.shape[1:] != cv_r.shape[1:]:
        raise ShapeError(f"profile shapes differ: rgb {cv_r.shape}, event {cv_e.shape}, "
                         f"lidar {cv_l.shape}")
    T = cv_e.shape[0]
    xy = (cv_r + cv_l[:2] + cv_e.sum(axis=0) / T) / 3.0
    sent = is_sentinel(cv_r) | is_sentinel(cv_l[:2]) | np.any(is_sentinel(cv_e), axis=0)
    xy = np.where(sent, SENTINEL, xy)
    return np.concatenate([xy, cv_l[2:3]], axis=0)


def soft_argmax(profiles, offsets, tau):
    """Expected displacement under ``softmax(profile / tau)`` per axis and sample.

    Args:
        profiles: ``(A, N, L)``.
        offsets: displacement values, broadcastable to ``(A, N, L)``.
        tau: temperature > 0.

    Returns:
        (values ``(N, A)``, valid ``(N,)``): a sample is invalid when any of
        its axis profiles is entirely sentinel; its values are 0.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    prof = np.asarray(profiles, dtype=np.float64)
    sent = is_sentinel(prof)
    w = softmax(np.where(sent, SENTINEL, prof / tau))
    off = np.broadcast_to(np.asarray(offsets, dtype=np.float64), prof.shape)
    val = np.sum(w * off, axis=-1).T
    valid = np.all(np.any(~sent, axis=-1), axis=0)
    return np.where(valid[:, None], val, 0.0), valid


def soft_argmax_flow(corr, offsets, tau):
    """Scene flow from fused ``(3, N, L)`` profiles with metric offsets."""
    val, valid = soft_argmax(corr, offsets, tau)
    return FlowField3D(val, valid)


def project_scene_flow(points, flow3d, K):
    """Optical flow of each point induced by its 3-D displacement."""
    p = np.asarray(points, dtype=np.float64)
    q = p + np.asarray(flow3d.flow if isinstance(flow3d, FlowField3D) else flow3d)
    du = K.f * (q[:, 0] / q[:, 2] - p[:, 0] / p[:, 2])
    dv = K.f * (q[:, 1] / q[:, 2] - p[:, 1] / p[:, 2])
    return np.stack([du, dv], axis=1)


def save_correlation(path, vol):
    """Text dump: one header comment line, then one row of 2r+1 values per sample."""
    prof = np.asarray(vol.profiles, dtype=np.float32).reshape(-1, 2 * vol.radius + 1)
    header = (f"# N {prof.shape[0]} r {vol.radius} axis {vol.axes} "
              f"modality {vol.modality}")
    if vol.slice_index is not None:
        header += f" slice {vol.slice_index}"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in prof:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_correlation(path):
    from .errors import FormatError

    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FormatError("missing correlation header", line=1)
    tok = lines[0][1:].split()
    if len(tok) % 2:
        raise FormatError("malformed correlation header", line=1)
    meta = dict(zip(tok[::2], tok[1::2]))
    try:
        n, r = int(meta["N"]), int(meta["r"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad correlation header: {exc}", line=1) from None
    if n < 0 or r < 1:
        raise FormatError("bad correlation header values", line=1)
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = [float(x) for x in line.split()]
        except ValueError:
            raise FormatError("non-numeric correlation value", line=i) from None
        if len(row) != 2 * r + 1 or not all(np.isfinite(row)):
            raise FormatError(f"expected {2 * r + 1} finite values", line=i)
        rows.append(row)
    if len(rows) != n:
        raise FormatError(f"header says {n} rows, found {len(rows)}")
    prof = np.array(rows, dtype=np.float32).astype(np.float64).reshape(1, n, 2 * r + 1)
    sl = meta.get("slice")
    return CorrelationVolume(prof, r, meta.get("axis", "x"), meta.get("modality", "RGB"),
                             int(sl) if sl is not None else None)
