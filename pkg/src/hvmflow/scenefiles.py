"""A scene on disk: one directory of plain files.

Layout::

    camera.ini        intrinsics, frame times, event threshold, known translation
    rgb_t.ppm         16-bit RGB at frame t
    rgb_t2.ppm        16-bit RGB at frame t+dt
    events.txt        t x y p, with width/height/window header lines
    cloud_t.txt       x y z per line
    cloud_t2.txt
    gt_flow.vmfl      optional ground truth (forward, backward)
    gt_flow_bwd.vmfl
    gt_depth.pgm      16-bit millimetres
    gt_occlusion.pgm  0/1 mask
    beam_mask.pgm     0/1 mask of LiDAR rows
    scene_flow.txt    per-point ground-truth scene flow for cloud_t
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .io import (
    load_events, load_flow, load_image, load_points, save_events, save_flow, save_image,
    save_points,
)
from .types import CameraIntrinsics, EventStream, FlowField2D, Image, PointCloud


@dataclass
class SceneInputs:
    """Pipeline inputs with optional ground truth (None when absent)."""

    rgb_t: Image
    rgb_t2: Image
    events: EventStream
    cloud_t: PointCloud
    cloud_t2: PointCloud
    K: CameraIntrinsics
    frame_times: tuple = (0.0, 1.0)
    threshold: float = None
    gt_flow: FlowField2D = None
    gt_flow_bwd: FlowField2D = None
    gt_depth: Image = None
    gt_occlusion: np.ndarray = None
    beam_mask: np.ndarray = None
    gt_scene_flow: np.ndarray = None
    translation: np.ndarray = None


def _mask_image(mask):
    return Image(np.asarray(mask, dtype=np.float64), "LUMA")


def save_scene(outdir, scene):
    os.makedirs(outdir, exist_ok=True)
    j = lambda name: os.path.join(outdir, name)  # noqa: E731
    K = scene.K
    cfg = configparser.ConfigParser()
    cfg["camera"] = {"f": repr(K.f), "cx": repr(K.cx), "cy": repr(K.cy),
                     "width": str(K.width), "height": str(K.height)}
    cfg["frames"] = {"t_a": repr(float(scene.frame_times[0])),
                     "t_b": repr(float(scene.frame_times[1]))}
    truth = {}
    if getattr(scene, "threshold", None) is not None:
        truth["threshold"] = repr(float(scene.threshold))
    if getattr(scene, "translation", None) is not None:
        truth["translation"] = " ".join(repr(float(v)) for v in scene.translation)
    cfg["truth"] = truth
    with open(j("camera.ini"), "w") as fh:
        cfg.write(fh)
    save_image(j("rgb_t.ppm"), scene.rgb_t, bits=16)
    save_image(j("rgb_t2.ppm"), scene.rgb_t2, bits=16)
    save_events(j("events.txt"), scene.events)
    save_points(j("cloud_t.txt"), scene.cloud_t)
    save_points(j("cloud_t2.txt"), scene.cloud_t2)
    if scene.gt_flow is not None:
        save_flow(j("gt_flow.vmfl"), scene.gt_flow)
    if getattr(scene, "gt_flow_bwd", None) is not None:
        save_flow(j("gt_flow_bwd.vmfl"), scene.gt_flow_bwd)
    if scene.gt_depth is not None:
        save_image(j("gt_depth.pgm"), scene.gt_depth)
    if scene.gt_occlusion is not None:
        save_image(j("gt_occlusion.pgm"), _mask_image(scene.gt_occlusion))
    if getattr(scene, "beam_mask", None) is not None:
        save_image(j("beam_mask.pgm"), _mask_image(scene.beam_mask))
    if getattr(scene, "gt_scene_flow", None) is not None:
        save_points(j("scene_flow.txt"), scene.gt_scene_flow)


def _floats(section, key, count):
    try:
        vals = [float(v) for v in section[key].split()]
    except (KeyError, ValueError):
        raise FormatError(f"camera.ini: missing or malformed {key!r}") from None
    if len(vals) != count or not all(np.isfinite(vals)):
        raise FormatError(f"camera.ini: {key!r} needs {count} finite values")
    return vals


def load_scene(indir):
    """Read a scene directory written by :func:`save_scene`."""
    j = lambda name: os.path.join(indir, name)  # noqa: E731
    cfg = configparser.ConfigParser()
    try:
        with open(j("camera.ini"), encoding="utf-8") as fh:
            cfg.read_file(fh)
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise FormatError(f"camera.ini: {exc}") from None
    if "camera" not in cfg or "frames" not in cfg:
        raise FormatError("camera.ini needs [camera] and [frames] sections")
    cam = cfg["camera"]
    f, cx, cy = (_floats(cam, k, 1)[0] for k in ("f", "cx", "cy"))
    w, h = (int(_floats(cam, k, 1)[0]) for k in ("width", "height"))
    try:
        K = CameraIntrinsics(f, cx, cy, w, h)
    except ValueError as exc:
        raise FormatError(f"camera.ini: {exc}") from None
    times = (_floats(cfg["frames"], "t_a", 1)[0], _floats(cfg["frames"], "t_b", 1)[0])
    truth = cfg["truth"] if "truth" in cfg else {}
    threshold = _floats(truth, "threshold", 1)[0] if "threshold" in truth else None
    translation = np.array(_floats(truth, "translation", 3)) if "translation" in truth else None

    rgb_t, rgb_t2 = load_image(j("rgb_t.ppm")), load_image(j("rgb_t2.ppm"))
    for img in (rgb_t, rgb_t2):
        if img.semantics != "RGB" or (img.height, img.width) != K.shape:
            raise FormatError(f"RGB frames must be {w}x{h} colour images")
    events = load_events(j("events.txt"), width=w, height=h)
    if (events.width, events.height) != (w, h):
        raise FormatError("event sensor size differs from the camera")

    def opt(name, loader):
        return loader(j(name)) if os.path.exists(j(name)) else None

    def mask(name):
        img = opt(name, load_image)
        if img is None:
            return None
        if img.data.shape != K.shape:
            raise FormatError(f"{name}: expected a {w}x{h} mask")
        return img.data > 0.5

    gt_flow = opt("gt_flow.vmfl", load_flow)
    gt_flow_bwd = opt("gt_flow_bwd.vmfl", load_flow)
    for fl in (gt_flow, gt_flow_bwd):
        if fl is not None and fl.flow.shape[:2] != K.shape:
            raise FormatError("ground-truth flow size differs from the camera")
    gt_depth = opt("gt_depth.pgm", load_image)
    if gt_depth is not None and (gt_depth.semantics != "DEPTH" or gt_depth.data.shape != K.shape):
        raise FormatError("gt_depth.pgm must be a DEPTH image matching the camera")
    sf = opt("scene_flow.txt", load_points)
    return SceneInputs(
        rgb_t=rgb_t, rgb_t2=rgb_t2, events=events,
        cloud_t=load_points(j("cloud_t.txt")), cloud_t2=load_points(j("cloud_t2.txt")),
        K=K, frame_times=times, threshold=threshold,
        gt_flow=gt_flow, gt_flow_bwd=gt_flow_bwd, gt_depth=gt_depth,
        gt_occlusion=mask("gt_occlusion.pgm"), beam_mask=mask("beam_mask.pgm"),
        gt_scene_flow=None if sf is None else sf.points, translation=translation,
    )
