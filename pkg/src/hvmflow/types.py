"""Domain types shared by the fusion stages.

Arrays are plain numpy; the dataclasses only validate invariants at
construction and carry the metadata (geometry, semantics, time window)
that the raw arrays cannot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError

SEMANTICS = ("RGB", "YUV", "LUMA", "INTENSITY", "DEPTH")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with square pixels and no distortion."""

    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.f > 0:
            raise FormatError(f"focal length must be positive, got {self.f}")
        if not 0 < self.cx < self.width:
            raise FormatError(f"cx={self.cx} outside (0, {self.width})")
        if not 0 < self.cy < self.height:
            raise FormatError(f"cy={self.cy} outside (0, {self.height})")

    @property
    def shape(self):
        return (self.height, self.width)


@dataclass
class Image:
    """Row-major raster, ``(H, W)`` or ``(H, W, 3)``, with a semantics tag.

    RGB/YUV/LUMA values live in [0, 1]; DEPTH is meters with 0 meaning
    missing; INTENSITY is a signed event accumulation and unbounded.
    """

    data: np.ndarray
    semantics: str = "LUMA"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.semantics not in SEMANTICS:
            raise FormatError(f"unknown image semantics {self.semantics!r}")
        if self.data.ndim == 3 and self.data.shape[2] != 3:
            raise ShapeError(f"expected 1 or 3 channels, got {self.data.shape[2]}")
        if self.data.ndim not in (2, 3):
            raise ShapeError(f"image must be 2-D or 3-D, got ndim={self.data.ndim}")
        if not np.all(np.isfinite(self.data)):
            raise FormatError("image contains non-finite values")
        if self.semantics in ("RGB", "YUV", "LUMA"):
            if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
                raise FormatError(f"{self.semantics} values must lie in [0, 1]")
        if self.semantics == "DEPTH" and self.data.size and self.data.min() < 0.0:
            raise FormatError("depth values must be >= 0")
        if self.semantics == "RGB" and self.data.ndim != 3:
            raise ShapeError("RGB image needs 3 channels")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass
class EventStream:
    """Time-ordered events ``(x, y, t, p)`` on a ``width x height`` sensor.

    Polarity is restricted to {-1, +1}. ``window`` is the closed time
    interval the stream covers.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int
    window: tuple = (0.0, 1.0)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.int64).reshape(-1)
        self.window = (float(self.window[0]), float(self.window[1]))
        n = self.t.size
        if not (self.x.size == self.y.size == self.p.size == n):
            raise ShapeError("event field arrays differ in length")
        if self.window[1] < self.window[0]:
            raise FormatError(f"window end precedes start: {self.window}")
        if n == 0:
            return
        if not np.all(np.isfinite(self.t)):
            raise FormatError("non-finite event timestamp")
        bad = np.flatnonzero(np.diff(self.t) < 0)
        if bad.size:
            raise FormatError("event timestamps not sorted", line=int(bad[0]) + 2)
        bad = np.flatnonzero((self.x < 0) | (self.x >= self.width)
                             | (self.y < 0) | (self.y >= self.height))
        if bad.size:
            raise FormatError("event coordinate out of sensor range", line=int(bad[0]) + 1)
        bad = np.flatnonzero(np.abs(self.p) != 1)
        if bad.size:
            raise FormatError("polarity must be -1 or +1", line=int(bad[0]) + 1)
        bad = np.flatnonzero((self.t < self.window[0]) | (self.t > self.window[1]))
        if bad.size:
            raise FormatError("event timestamp outside window", line=int(bad[0]) + 1)

    def __len__(self):
        return self.t.size

    @classmethod
    def empty(cls, width, height, window=(0.0, 1.0)):
        z = np.zeros(0)
        return cls(z, z, z, z, width, height, window)

    def between(self, t0, t1):
        """Events with ``t0 <= t <= t1``, as a new stream over that window."""
        sel = (self.t >= t0) & (self.t <= t1)
        return EventStream(self.x[sel], self.y[sel], self.t[sel], self.p[sel],
                           self.width, self.height, (t0, t1))


@dataclass
class PointCloud:
    """Unordered ``(N, 3)`` metric points in camera coordinates, +z forward."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"point cloud must be (N, 3), got {pts.shape}")
        bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
        if bad.size:
            raise FormatError("non-finite point coordinate", line=int(bad[0]) + 1)
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)


@dataclass
class ProjectedPoints:
    """Image-plane projections ``(u, v, d)`` with back-references into a cloud."""

    u: np.ndarray
    v: np.ndarray
    d: np.ndarray
    index: np.ndarray

    def __len__(self):
        return self.u.size

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls(z, z, z, np.zeros(0, dtype=np.int64))


@dataclass
class EventVoxelGrid:
    """``T`` temporal slices of signed ``p * C`` accumulation, shape ``(T, H, W)``.

    ``counts`` keeps the integer net polarity per slice. Summing ``slices``
    in floating point is exact only when ``C`` is a power of two;
    :meth:`total` sums the integer counts first and is exact for any ``C``.
    """

    slices: np.ndarray
    window: tuple = (0.0, 1.0)
    counts: np.ndarray = None
    C: float = None

    @property
    def T(self):
        return self.slices.shape[0]

    def total(self):
        """Full-window accumulation recovered from the slices."""
        if self.counts is None:
            return self.slices.sum(axis=0)
        return self.counts.sum(axis=0) * float(self.C)


@dataclass
class FlowField2D:
    """Dense optical flow ``(H, W, 2)`` as ``(du, dv)`` in pixels, with a validity mask."""

    flow: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise ShapeError(f"flow must be (H, W, 2), got {self.flow.shape}")
        if self.mask is None:
            self.mask = np.ones(self.flow.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.shape != self.flow.shape[:2]:
            raise ShapeError("flow mask shape mismatch")
        self.flow = np.where(self.mask[..., None], self.flow, 0.0)

    @property
    def height(self):
        return self.flow.shape[0]

    @property
    def width(self):
        return self.flow.shape[1]

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width, 2)))


@dataclass
class FlowField3D:
    """Sparse scene flow ``(N, 3)`` in meters per frame with a per-sample mask."""

    flow: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64).reshape(-1, 3)
        if self.mask is None:
            self.mask = np.ones(self.flow.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask).astype(bool).reshape(-1)
        if self.mask.size != self.flow.shape[0]:
            raise ShapeError("scene-flow mask length mismatch")

    def __len__(self):
        return self.flow.shape[0]


@dataclass(frozen=True)
class FusionWeights:
    w_event: float = 1.0
    w_rgb: float = 1.0

    def __post_init__(self):
        if self.w_event < 0 or self.w_rgb < 0:
            raise ValueError("fusion weights must be non-negative")


@dataclass
class LossValue:
    """Scalar loss plus gradients keyed by the differentiated argument's name."""

    value: float
    grads: dict = field(default_factory=dict)

    @property
    def grad(self):
        if len(self.grads) != 1:
            raise KeyError(f"loss has {len(self.grads)} gradients; index .grads by name")
        return next(iter(self.grads.values()))

    def __float__(self):
        return float(self.value)
