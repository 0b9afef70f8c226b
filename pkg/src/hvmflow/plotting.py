"""Matplotlib figures for a pipeline report (written to PNG, never shown)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .correlation import is_sentinel  # noqa: E402
from .report import flow_to_color  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_flow(path, out):
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    axes[0].imshow(out.luma_t, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("luma at t (after fusion)")
    axes[1].imshow(flow_to_color(out.dense_flow))
    axes[1].set_title("dense optical flow")
    uv = out.samples_uv[out.flow_valid]
    f = out.flow_samples[out.flow_valid]
    axes[2].imshow(out.luma_t, cmap="gray", vmin=0, vmax=1)
    axes[2].quiver(uv[:, 0], uv[:, 1], f[:, 0], -f[:, 1], color="tab:red",
                   angles="xy", scale_units="xy", scale=0.5, width=0.003)
    axes[2].set_title("sample flow")
    for ax in axes:
        ax.set_axis_off()
    return _save(fig, path)


def plot_profiles(path, out, count=4):
    prof = out.profiles
    L = prof.shape[-1]
    d = np.arange(L) - L // 2
    idx = np.flatnonzero(out.flow_valid)[:count]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, a, name in zip(axes, range(3), "xyz"):
        for i in idx:
            row = prof[a, i]
            ok = ~is_sentinel(row)
            ax.plot(d[ok], row[ok], marker="o", label=f"sample {i}")
        ax.set_title(f"fused {name} profile")
        ax.set_xlabel("displacement step")
    axes[0].legend(fontsize=7)
    return _save(fig, path)


def plot_depth(path, out):
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    vmax = max(float(out.depth_fused.max()), 1e-6)
    for ax, img, title in ((axes[0], out.depth_raw, "LiDAR depth"),
                           (axes[1], out.depth_fused, "after structure fusion")):
        shown = np.where(img > 0, img, np.nan)
        im = ax.imshow(shown, cmap="viridis", vmin=0, vmax=vmax)
        ax.set_title(f"{title} ({np.count_nonzero(img)} px)")
        ax.set_axis_off()
    fig.colorbar(im, ax=axes, shrink=0.8, label="depth [m]")
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_figures(outdir, report):
    out = report.outputs
    paths = []
    if out.dense_flow is not None:
        paths.append(plot_flow(os.path.join(outdir, "flow.png"), out))
    if out.profiles is not None:
        paths.append(plot_profiles(os.path.join(outdir, "profiles.png"), out))
    if out.depth_raw is not None:
        paths.append(plot_depth(os.path.join(outdir, "depth.png"), out))
    return paths
