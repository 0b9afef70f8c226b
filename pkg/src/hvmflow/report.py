"""Report files: key-value text, JSON, colour-wheel flow images and figures."""

from __future__ import annotations

import json
import os

import numpy as np

from .io import save_flow, save_ppm_rgb8
from .types import FlowField2D


def _colorwheel():
    """The standard 55-entry flow colour wheel (red-yellow-green-cyan-blue-magenta)."""
    segments = [(15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)),
                (4, (0, 255, 0), (0, 255, 255)), (11, (0, 255, 255), (0, 0, 255)),
                (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for n, a, b in segments:
        t = np.arange(n)[:, None] / n
        rows.append(np.asarray(a) * (1 - t) + np.asarray(b) * t)
    return np.floor(np.concatenate(rows)) / 255.0


def flow_to_color(flow, max_norm=None):
    """Map ``(H, W, 2)`` flow to uint8 RGB: hue is direction, saturation magnitude."""
    f = np.asarray(flow, dtype=np.float64)
    u, v = f[..., 0], f[..., 1]
    mag = np.hypot(u, v)
    if max_norm is None:
        max_norm = float(mag.max())
    scale = max_norm if max_norm > 0 else 1.0
    u, v, mag = u / scale, v / scale, mag / scale
    wheel = _colorwheel()
    ncols = wheel.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    frac = (fk - k0)[..., None]
    col = (1 - frac) * wheel[k0] + frac * wheel[k1]
    m = np.minimum(mag, 1.0)[..., None]
    col = 1 - m * (1 - col)
    col = np.where((mag <= 1.0)[..., None], col, col * 0.75)
    return np.floor(255 * col).astype(np.uint8)


def write_text(path, report):
    with open(path, "w") as fh:
        fh.write(report.to_text())


def write_json(path, report):
    with open(path, "w") as fh:
        json.dump(report.values, fh, indent=2, sort_keys=False)
        fh.write("\n")


def write_artifacts(outdir, report, figures=True):
    """Write ``report.txt``, ``report.json``, flow files and (optionally) PNG figures.

    Returns the list of written paths.
    """
    os.makedirs(outdir, exist_ok=True)
    paths = []

    def p(name):
        path = os.path.join(outdir, name)
        paths.append(path)
        return path

    write_text(p("report.txt"), report)
    write_json(p("report.json"), report)
    out = report.outputs
    if out.dense_flow is not None:
        save_flow(p("flow.vmfl"), FlowField2D(out.dense_flow))
        save_ppm_rgb8(p("flow.ppm"), flow_to_color(out.dense_flow))
    if figures:
        from .plotting import render_figures

        paths += render_figures(outdir, report)
    return paths
