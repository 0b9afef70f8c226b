"""Event accumulation into intensity frames and temporal voxel grids."""

import numpy as np

from .types import EventVoxelGrid, Image


def _window(ev, window):
    return ev.window if window is None else (float(window[0]), float(window[1]))


def polarity_counts(ev, window=None):
    """Net signed event count per pixel over a closed time window (integer)."""
    t0, t1 = _window(ev, window)
    counts = np.zeros((ev.height, ev.width), dtype=np.int64)
    sel = (ev.t >= t0) & (ev.t <= t1)
    np.add.at(counts, (ev.y[sel], ev.x[sel]), ev.p[sel])
    return counts


def accumulate_intensity(ev, C, window=None):
    """Intensity frame: per-pixel sum of ``p * C`` over the window."""
    if not C > 0:
        raise ValueError(f"event threshold must be positive, got {C}")
    return Image(polarity_counts(ev, window) * float(C), "INTENSITY")


def slice_index(t, t0, t1, T):
    """Slice for each timestamp; slice i covers ``(t0 + i*dt, t0 + (i+1)*dt]``.

    The first slice also owns ``t == t0``, so an event on an interior edge
    lands in the earlier of the two slices it touches.
    """
    if t1 <= t0:
        return np.zeros(np.shape(t), dtype=np.int64)
    pos = (np.asarray(t, dtype=np.float64) - t0) * (T / (t1 - t0))
    return np.clip(np.ceil(pos).astype(np.int64) - 1, 0, T - 1)


def voxelize_events(ev, T, C, window=None):
    """Split the window into ``T`` equal slices of signed ``p * C`` accumulation.

    Counts are accumulated as integers and scaled once, so
    :meth:`EventVoxelGrid.total` reproduces :func:`accumulate_intensity` for
    the same window bit for bit.
    """
    if T < 1:
        raise ValueError(f"slice count must be >= 1, got {T}")
    if not C > 0:
        raise ValueError(f"event threshold must be positive, got {C}")
    t0, t1 = _window(ev, window)
    counts = np.zeros((T, ev.height, ev.width), dtype=np.int64)
    sel = (ev.t >= t0) & (ev.t <= t1)
    if np.any(sel):
        k = slice_index(ev.t[sel], t0, t1, T)
        np.add.at(counts, (k, ev.y[sel], ev.x[sel]), ev.p[sel])
    return EventVoxelGrid(counts * float(C), (t0, t1), counts, float(C))
