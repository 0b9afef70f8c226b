"""Desk-scale multimodal scene with exact ground truth.

A textured fronto-parallel plane and an optional textured occluding quad
(nearer the camera) translate rigidly. Frames are ray-cast analytically at
any motion phase ``s`` (``s = 0`` is frame t, ``s = 1`` frame t+dt), so
frame 2 is an exact reprojection of the same surfaces. Events come from the
clean luma change over two intervals, ``(-1, 0)`` and ``(0, 1)``: each pixel
emits ``floor(|dI| / C)`` events of sign ``dI`` with timestamps evenly spread
along a linear intensity ramp. Low-light mode darkens and corrupts only the
RGB frames; events and LiDAR see the clean scene.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .color import luma
from .errors import ConfigError, NumericalError
from .types import CameraIntrinsics, EventStream, FlowField2D, Image, PointCloud


@dataclass(frozen=True)
class SceneParams:
    width: int = 128
    height: int = 128
    focal: float = 120.0
    cx: float = 64.0
    cy: float = 64.0
    plane_depth: float = 6.0
    occluder_depth: float = 4.0
    occluder: bool = True
    # occluder extent in its own metric frame: x0, x1, y0, y1
    occluder_box: tuple = (-1.2, -0.2, -0.8, 0.6)
    translation: tuple = (0.1, 0.0, 0.0)
    threshold: float = 1.0 / 32.0
    beam_stride: int = 4
    top_sparse: float = 0.25
    low_light: bool = False
    gamma: float = 0.2
    noise_sigma: float = 0.02
    texture_waves: int = 12


@dataclass
class SyntheticScene:
    rgb_t: Image
    rgb_t2: Image
    events: EventStream
    cloud_t: PointCloud
    cloud_t2: PointCloud
    K: CameraIntrinsics
    gt_flow: FlowField2D
    gt_flow_bwd: FlowField2D
    gt_scene_flow: np.ndarray
    gt_depth: Image
    gt_depth_t2: Image
    gt_occlusion: np.ndarray
    beam_mask: np.ndarray
    luma_prev: np.ndarray
    luma_t: np.ndarray
    luma_t2: np.ndarray
    translation: np.ndarray
    threshold: float
    frame_times: tuple = (0.0, 1.0)


class _Texture:
    """Smooth procedural RGB texture over metric plane coordinates."""

    def __init__(self, rng, waves, min_wavelength=0.15, max_wavelength=0.7):
        lam = rng.uniform(min_wavelength, max_wavelength, size=waves)
        ang = rng.uniform(0.0, np.pi, size=waves)
        self.kx = 2 * np.pi * np.cos(ang) / lam
        self.ky = 2 * np.pi * np.sin(ang) / lam
        self.phase = rng.uniform(0.0, 2 * np.pi, size=(waves,))
        self.amp = rng.uniform(0.5, 1.0, size=waves)
        self.amp /= self.amp.sum()
        self.tint = rng.uniform(0.75, 1.0, size=3)
        self.base = rng.uniform(0.45, 0.55)

    def __call__(self, X, Y):
        arg = X[..., None] * self.kx + Y[..., None] * self.ky + self.phase
        g = self.base + 0.38 * np.sum(self.amp * np.sin(arg), axis=-1)
        return np.clip(g[..., None] * self.tint, 0.0, 1.0)


class _Scene:
    def __init__(self, params, rng):
        self.p = params
        self.t = np.asarray(params.translation, dtype=np.float64)
        self.plane_tex = _Texture(rng, params.texture_waves)
        self.occ_tex = _Texture(rng, params.texture_waves, 0.1, 0.4)
        for s in (-1.0, 0.0, 1.0):
            if params.plane_depth + s * self.t[2] <= 0:
                raise ConfigError("plane is behind the camera at some frame")
            if params.occluder and params.occluder_depth + s * self.t[2] <= 0:
                raise ConfigError("occluder is behind the camera at some frame")
        if params.occluder and params.occluder_depth >= params.plane_depth:
            raise ConfigError("occluder must be nearer than the plane")

    def cast(self, u, v, s):
        """Ray-cast pixel positions at motion phase ``s``.

        Returns (rgb, depth, surface id, local X, local Y); surface id is 0
        for the plane and 1 for the occluder.
        """
        p = self.p
        rx = (u - p.cx) / p.focal
        ry = (v - p.cy) / p.focal
        zp = p.plane_depth + s * self.t[2]
        X = rx * zp - s * self.t[0]
        Y = ry * zp - s * self.t[1]
        depth = np.full(np.shape(u), zp, dtype=np.float64)
        surf = np.zeros(np.shape(u), dtype=np.int64)
        if p.occluder:
            zo = p.occluder_depth + s * self.t[2]
            Xo = rx * zo - s * self.t[0]
            Yo = ry * zo - s * self.t[1]
            x0, x1, y0, y1 = p.occluder_box
            hit = (Xo >= x0) & (Xo <= x1) & (Yo >= y0) & (Yo <= y1)
            depth = np.where(hit, zo, depth)
            surf = np.where(hit, 1, surf)
            X = np.where(hit, Xo, X)
            Y = np.where(hit, Yo, Y)
        rgb = np.where((surf == 1)[..., None], self.occ_tex(X, Y), self.plane_tex(X, Y))
        return rgb, depth, surf, X, Y


def _events_for(lum_a, lum_b, s0, C):
    d = lum_b - lum_a
    n = np.floor(np.abs(d) / C).astype(np.int64)
    ys, xs = np.nonzero(n > 0)
    counts = n[ys, xs]
    step = C / np.abs(d[ys, xs])
    k = np.concatenate([np.arange(1, c + 1) for c in counts]) if counts.size else np.zeros(0)
    rep = np.repeat(np.arange(counts.size), counts)
    t = s0 + (k - 0.5) * step[rep]
    return xs[rep], ys[rep], t, np.sign(d[ys, xs])[rep].astype(np.int64)


def _lidar(depth, params, K):
    h, w = depth.shape
    mask = np.zeros((h, w), dtype=bool)
    first = int(np.ceil(params.top_sparse * h))
    rows = [r for r in range(0, h, params.beam_stride) if r >= first]
    mask[rows, :] = True
    rr, cc = np.nonzero(mask & (depth > 0))
    z = depth[rr, cc]
    pts = np.stack([(cc - K.cx) * z / K.f, (rr - K.cy) * z / K.f, z], axis=1)
    return PointCloud(pts), mask


def generate_synthetic(params=SceneParams(), seed=0):
    """Render a :class:`SyntheticScene` from ``params`` under ``seed``."""
    if params.threshold <= 0:
        raise ConfigError("event threshold must be positive")
    if params.beam_stride < 1:
        raise ConfigError("beam_stride must be >= 1")
    rng = np.random.default_rng(seed)
    scene = _Scene(params, rng)
    K = CameraIntrinsics(params.focal, params.cx, params.cy, params.width, params.height)
    h, w = params.height, params.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    rgb = {}
    depth = {}
    for s in (-1.0, 0.0, 1.0):
        rgb[s], depth[s], _, _, _ = scene.cast(xs, ys, s)
    lum = {s: luma(rgb[s]) for s in rgb}

    t = scene.t

    def flow_between(s_from, s_to):
        _, z, _, _, _ = scene.cast(xs, ys, s_from)
        P = np.stack([(xs - K.cx) * z / K.f, (ys - K.cy) * z / K.f, z], axis=-1)
        Q = P + (s_to - s_from) * t
        u2 = K.f * Q[..., 0] / Q[..., 2] + K.cx
        v2 = K.f * Q[..., 1] / Q[..., 2] + K.cy
        return np.stack([u2 - xs, v2 - ys], axis=-1), u2, v2, Q[..., 2]

    fwd, u2, v2, z2 = flow_between(0.0, 1.0)
    bwd, _, _, _ = flow_between(1.0, 0.0)

    # self-check against the projection equations on the plane at a few pixels
    z0 = depth[0.0]
    probe = (np.array([h // 2, 1, h - 2]), np.array([w - 2, 1, w // 2]))
    P = np.stack([(xs[probe] - K.cx) * z0[probe] / K.f,
                  (ys[probe] - K.cy) * z0[probe] / K.f, z0[probe]], axis=-1) + t
    du = K.f * P[:, 0] / P[:, 2] + K.cx - xs[probe]
    if np.max(np.abs(du - fwd[probe][:, 0])) > 1e-9:
        raise NumericalError("ground-truth flow disagrees with the projection equations")

    inb = (u2 >= 0) & (u2 <= w - 1) & (v2 >= 0) & (v2 <= h - 1)
    _, zvis, _, _, _ = scene.cast(u2, v2, 1.0)
    occluded = ~inb | (zvis < z2 - 1e-9)

    C = float(params.threshold)
    parts = [_events_for(lum[-1.0], lum[0.0], -1.0, C), _events_for(lum[0.0], lum[1.0], 0.0, C)]
    ex = np.concatenate([q[0] for q in parts])
    ey = np.concatenate([q[1] for q in parts])
    et = np.concatenate([q[2] for q in parts])
    ep = np.concatenate([q[3] for q in parts])
    order = np.lexsort((ex, ey, et))
    events = EventStream(ex[order], ey[order], et[order], ep[order], w, h, (-1.0, 1.0))

    cloud_t, beam = _lidar(depth[0.0], params, K)
    cloud_t2, _ = _lidar(depth[1.0], params, K)

    frames = [rgb[0.0], rgb[1.0]]
    if params.low_light:
        frames = [np.clip(params.gamma * f + rng.normal(0.0, params.noise_sigma, f.shape), 0.0, 1.0)
                  for f in frames]

    return SyntheticScene(
        rgb_t=Image(frames[0], "RGB"),
        rgb_t2=Image(frames[1], "RGB"),
        events=events,
        cloud_t=cloud_t,
        cloud_t2=cloud_t2,
        K=K,
        gt_flow=FlowField2D(fwd),
        gt_flow_bwd=FlowField2D(bwd),
        gt_scene_flow=np.tile(t, (len(cloud_t), 1)),
        gt_depth=Image(depth[0.0], "DEPTH"),
        gt_depth_t2=Image(depth[1.0], "DEPTH"),
        gt_occlusion=occluded,
        beam_mask=beam,
        luma_prev=lum[-1.0],
        luma_t=lum[0.0],
        luma_t2=lum[1.0],
        translation=t.copy(),
        threshold=C,
    )
