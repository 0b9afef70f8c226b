"""End-to-end orchestration: luminance, structure and motion fusion, readout, losses.

Frames sit at ``frame_times = (t_a, t_b)``. Events in ``[t_a - dt, t_a]``
describe frame t and events in ``[t_a, t_b]`` describe frame t+dt, so the
two event frames are related by the same motion as the RGB pair.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .color import luma
from .config import PipelineConfig
from .correlation import (
    build_correlation_2d, build_correlation_3d, encode_cloud, encode_image,
    fuse_correlation, is_sentinel, kl_alignment_loss, sample_points, soft_argmax,
)
from .errors import EmptyMaskError, HVMFlowError, NumericalError, StageError
from .events import accumulate_intensity, voxelize_events
from .geometry import project_points, splat_depth
from .luminance import consistency_loss, fuse_rgb, valid_mask
from .metrics import metric_acc, metric_epe
from .photometric import occlusion_mask, occlusion_mask_3d, photometric_loss
from .sampling import bilinear, pixel_grid
from .structure import (
    DistanceParams, Event2DPoints, cluster_neighbors, coverage, fill_boundary,
    fuse_depth_detailed, normalize_event_coords, pseudo_label_loss,
)
from .synthetic import generate_synthetic
from .types import FusionWeights

logger = logging.getLogger(__name__)


def total_loss(pho, adv, consis, pse, kl, lam):
    """``pho + l1*adv + l2*consis + l3*pse + l4*kl``."""
    parts = (pho, adv, consis, pse, kl)
    if not all(np.isfinite(p) for p in parts):
        raise NumericalError(f"non-finite loss component in {parts}")
    l1, l2, l3, l4 = lam
    return float(pho + l1 * adv + l2 * consis + l3 * pse + l4 * kl)


@dataclass
class StageOutputs:
    """Intermediate products kept for figures and artifact dumps."""

    luma_t: np.ndarray = None
    luma_t2: np.ndarray = None
    event_frame_t: np.ndarray = None
    event_frame_t2: np.ndarray = None
    depth_raw: np.ndarray = None
    depth_fused: np.ndarray = None
    cloud_t: np.ndarray = None
    cloud_t2: np.ndarray = None
    event_labels: np.ndarray = None
    event_uv: np.ndarray = None
    samples_uv: np.ndarray = None
    profiles: np.ndarray = None
    flow_samples: np.ndarray = None
    flow_valid: np.ndarray = None
    scene_flow: np.ndarray = None
    dense_flow: np.ndarray = None
    dense_flow_bwd: np.ndarray = None


@dataclass
class Report:
    """Flat ``key -> value`` results plus the arrays behind them."""

    values: dict
    outputs: StageOutputs = field(default_factory=StageOutputs, repr=False)

    def __getitem__(self, key):
        return self.values[key]

    def to_text(self):
        return "".join(f"{k}: {_fmt(v)}\n" for k, v in self.values.items())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (HVMFlowError, ValueError, ArithmeticError) as exc:
                raise StageError(name, exc) from exc
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


def _windows(inputs):
    t_a, t_b = inputs.frame_times
    dt = t_b - t_a
    if not dt > 0:
        raise ValueError("frame_times must be increasing")
    return (t_a - dt, t_a), (t_a, t_b)


@_stage("luminance")
def luminance_stage(inputs, cfg):
    prev_win, cur_win = _windows(inputs)
    C = cfg.threshold
    x_t = accumulate_intensity(inputs.events, C, prev_win).data
    x_t2 = accumulate_intensity(inputs.events, C, cur_win).data
    out = {"event_frame_t": x_t, "event_frame_t2": x_t2, "clamped_t": 0, "clamped_t2": 0}
    if cfg.luminance_fusion:
        w = FusionWeights(cfg.w_event, cfg.w_rgb)
        _, y_t, out["clamped_t"] = fuse_rgb(inputs.rgb_t, x_t, w)
        _, y_t2, out["clamped_t2"] = fuse_rgb(inputs.rgb_t2, x_t2, w)
        out["luma_t"], out["luma_t2"] = y_t.data, y_t2.data
    else:
        out["luma_t"], out["luma_t2"] = luma(inputs.rgb_t), luma(inputs.rgb_t2)
    return out


def _unique_event_points(ev):
    """Events collapsed to distinct ``(u, v, p)`` triples in raster order."""
    P = normalize_event_coords(ev)
    if len(P) == 0:
        return P
    key = np.unique(np.stack([P.v, P.u, P.p], axis=1), axis=0)
    return Event2DPoints(key[:, 1], key[:, 0], key[:, 2])


def _fuse_frame(events, cloud, K, cfg, params):
    P_l = project_points(cloud, K)
    P_e = _unique_event_points(events)
    raw = splat_depth(P_l, K).data
    info = {"depth_raw": raw, "depth_fused": raw, "cloud": np.asarray(cloud, dtype=np.float64),
            "labels": None, "event_uv": None, "objective": 0.0, "clusters": 0,
            "event_depth": np.zeros(0), "event_src_lo": np.zeros(0), "event_src_hi": np.zeros(0)}
    if len(P_e) == 0 or len(P_l) == 0:
        return info
    clusters = cluster_neighbors(P_e, P_l, cfg.clusters, cfg.cluster_iters, params,
                                 seed=cfg.seed, image_size=(K.width, K.height))
    dens = fill_boundary(P_l, P_e, clusters, cfg.knn, params)
    sel = dens.added
    chosen = Event2DPoints(P_e.u[sel], P_e.v[sel], P_e.p[sel])
    sub = dataclasses.replace(clusters, event_labels=clusters.event_labels[sel])
    fused = fuse_depth_detailed(P_l, chosen, sub, cfg.knn, K, params)
    has = fused.event_depth > 0
    z = fused.event_depth[has]
    lifted = np.stack([(chosen.u[has] - K.cx) * z / K.f,
                       (chosen.v[has] - K.cy) * z / K.f, z], axis=1)
    info.update(
        depth_fused=fused.depth.data,
        cloud=np.concatenate([info["cloud"], lifted]),
        labels=clusters.event_labels,
        event_uv=np.stack([P_e.u, P_e.v], axis=1),
        objective=clusters.objective,
        clusters=clusters.n_clusters,
        event_depth=z,
        event_uv_filled=np.stack([chosen.u[has], chosen.v[has]], axis=1),
        event_src_lo=fused.source_min[has],
        event_src_hi=fused.source_max[has],
    )
    return info


@_stage("structure")
def structure_stage(inputs, cfg):
    prev_win, cur_win = _windows(inputs)
    K = inputs.K
    params = DistanceParams(cfg.n_s)
    frames = []
    for win, cloud in ((prev_win, inputs.cloud_t), (cur_win, inputs.cloud_t2)):
        ev = inputs.events.between(*win)
        if cfg.structure_fusion:
            frames.append(_fuse_frame(ev, cloud, K, cfg, params))
        else:
            raw = splat_depth(project_points(cloud, K), K).data
            frames.append({"depth_raw": raw, "depth_fused": raw,
                           "cloud": np.asarray(cloud, dtype=np.float64)})
        region = np.zeros(K.shape, dtype=bool)
        region[ev.y, ev.x] = True
        frames[-1]["region"] = region
    return frames


def _pixel_offsets(r):
    return np.arange(-r, r + 1, dtype=np.float64)


def _metric_offsets(points, K, cfg, base=None):
    """Per-sample metric displacement grids; ``base`` is ``(N, 3)`` metric shift."""
    d = _pixel_offsets(cfg.radius)
    n = points.shape[0]
    base = np.zeros((n, 3)) if base is None else base
    lateral = points[:, 2:3] / K.f * d[None, :]
    return [base[:, 0:1] + lateral, base[:, 1:2] + lateral,
            base[:, 2:3] + cfg.z_step * d[None, :]]


class _Direction:
    """Everything needed to correlate frame a against frame b."""

    def __init__(self, feat_a, feat_b, vox_a, vox_b, cloud_a, cloud_b, lidar_a, K, cfg, seed):
        self.feat_a, self.feat_b = feat_a, feat_b
        self.ev_a = [encode_image(x, "EVENT_SLICE") for x in vox_a]
        self.ev_b = [encode_image(x, "EVENT_SLICE") for x in vox_b]
        self.pc_a = encode_cloud(cloud_a, cfg.rho)
        self.pc_b = encode_cloud(cloud_b, cfg.rho)
        # anchors are measured returns only; lifted event points just densify the targets
        self.samples = sample_points(lidar_a, cfg.samples, K, seed)
        self.K, self.cfg = K, cfg

    def profiles(self, U, W, axes="xy"):
        """RGB ``(2,N,L)``, event ``(T,2,N,L)`` and LiDAR ``(3,N,L)`` profiles
        around per-sample pixel displacement ``U`` and metric displacement ``W``.

        Image axes left out of ``axes`` are filled with zeros.
        """
        cfg, s = self.cfg, self.samples
        r = cfg.radius

        def pair(fa, fb):
            vols = build_correlation_2d(fa, fb, s, U, r=r, patch=cfg.patch, axes=axes)
            return np.concatenate([np.zeros((1, len(s), 2 * r + 1)) if v is None else v.profiles
                                   for v in vols])

        cv_r = pair(self.feat_a, self.feat_b)
        cv_e = np.stack([pair(fa, fb) for fa, fb in zip(self.ev_a, self.ev_b)])
        lx, ly, lz = build_correlation_3d(self.pc_a, self.pc_b, s,
                                          _metric_offsets(s.points, self.K, cfg, W), r,
                                          rho_max=cfg.rho_max, rho=cfg.rho)
        return cv_r, cv_e, np.concatenate([lx.profiles, ly.profiles, lz.profiles])

    def fuse(self, cv_r, cv_e, cv_l):
        if self.cfg.motion_fusion:
            return fuse_correlation(cv_r, cv_e, cv_l)
        return np.concatenate([cv_r, cv_l[2:3]])

    def estimate(self):
        """Coarse-to-fine readout by alternating single-axis updates.

        Each axis profile is a slice through the current estimate of the
        other axis, so an off-axis motion is only visible once the other
        component has been found. ``refine_rounds`` rounds of x-then-y
        updates precede a final joint update of all axes.
        """
        cfg, s = self.cfg, self.samples
        n = len(s)
        z = s.points[:, 2]
        U = np.zeros((n, 2))
        Wz = np.zeros(n)
        d = _pixel_offsets(cfg.radius)
        schedule = [(0,), (1,)] * cfg.refine_rounds + [(0, 1, 2)]
        for axes in schedule:
            W = np.stack([U[:, 0] * z / self.K.f, U[:, 1] * z / self.K.f, Wz], axis=1)
            names = "".join("xy"[a] for a in axes if a < 2)
            cv_r, cv_e, cv_l = self.profiles(U, W, names)
            corr = self.fuse(cv_r, cv_e, cv_l)
            step, valid = soft_argmax(corr[:2], d, cfg.tau)
            for a in axes:
                if a < 2:
                    U[:, a] += step[:, a]
            if 2 in axes:
                dz, _ = soft_argmax(corr[2:3], cfg.z_step * d, cfg.tau)
                Wz += dz[:, 0]
        flow3d = np.stack([U[:, 0] * z / self.K.f, U[:, 1] * z / self.K.f, Wz], axis=1)
        valid3 = valid & np.any(~is_sentinel(corr[2]), axis=-1)
        return {"U": np.where(valid[:, None], U, 0.0), "valid": valid,
                "flow3d": np.where(valid3[:, None], flow3d, 0.0), "valid3": valid3,
                "corr": corr, "cv_r": cv_r, "cv_e": cv_e, "cv_l": cv_l}


def _densify(u, v, values, valid, shape):
    """Nearest-sample fill of a sparse per-sample field over the image grid."""
    h, w = shape
    out = np.zeros((h, w, values.shape[1]))
    if not valid.any():
        return out
    tree = cKDTree(np.stack([u[valid], v[valid]], axis=1))
    xs, ys = pixel_grid(h, w)
    _, nn = tree.query(np.stack([xs.ravel(), ys.ravel()], axis=1))
    return values[valid][nn].reshape(h, w, -1)


@_stage("motion")
def motion_stage(inputs, cfg, lum, frames):
    prev_win, cur_win = _windows(inputs)
    K = inputs.K
    T = cfg.slices
    vox_prev = voxelize_events(inputs.events, T, cfg.threshold, prev_win).slices
    vox_cur = voxelize_events(inputs.events, T, cfg.threshold, cur_win).slices
    f1 = encode_image(lum["luma_t"])
    f2 = encode_image(lum["luma_t2"])
    cloud_t, cloud_t2 = frames[0]["cloud"], frames[1]["cloud"]

    fwd = _Direction(f1, f2, vox_prev, vox_cur, cloud_t, cloud_t2, inputs.cloud_t, K, cfg,
                     cfg.seed)
    bwd = _Direction(f2, f1, vox_cur, vox_prev, cloud_t2, cloud_t, inputs.cloud_t2, K, cfg,
                     cfg.seed + 1)
    out = fwd.estimate()
    back = bwd.estimate()
    s, bs = fwd.samples, bwd.samples
    return {
        "samples": s, "cv_r": out["cv_r"], "cv_e": out["cv_e"], "cv_l": out["cv_l"],
        "corr": out["corr"], "flow2d": out["U"], "valid2": out["valid"],
        "flow3d": out["flow3d"], "valid3": out["valid3"],
        "b_samples": bs, "b_flow3d": back["flow3d"], "b_valid3": back["valid3"],
        "dense": _densify(s.u, s.v, out["U"], out["valid"], K.shape),
        "dense_b": _densify(bs.u, bs.v, back["U"], back["valid"], K.shape),
    }


def _nearest_fill(depth):
    """Dense depth by copying the nearest positive pixel."""
    d = np.asarray(depth)
    rows, cols = np.nonzero(d > 0)
    if rows.size == 0:
        return np.zeros_like(d)
    tree = cKDTree(np.stack([cols, rows], axis=1))
    xs, ys = pixel_grid(*d.shape)
    _, nn = tree.query(np.stack([xs.ravel(), ys.ravel()], axis=1))
    return d[rows[nn], cols[nn]].reshape(d.shape)


def _masked_or_zero(fn, flags, name):
    try:
        return fn()
    except EmptyMaskError:
        flags.append(name)
        return 0.0


@_stage("losses")
def loss_stage(inputs, cfg, lum, frames, mot):
    prev_win, cur_win = _windows(inputs)
    empty = []
    occ2 = occlusion_mask(mot["dense"], mot["dense_b"], cfg.occlusion_tau)
    s, bs = mot["samples"], mot["b_samples"]
    v3, bv3 = mot["valid3"], mot["b_valid3"]
    occ3 = np.zeros(len(s), dtype=bool)
    if v3.any() and bv3.any():
        occ3[v3] = occlusion_mask_3d(s.points[v3], mot["flow3d"][v3], bs.points[bv3],
                                     mot["b_flow3d"][bv3], cfg.occlusion_tau)

    def pho():
        return photometric_loss(lum["luma_t"], lum["luma_t2"], mot["dense"],
                                pts_t=s.points[v3], pc_t2=frames[1]["cloud"],
                                flow3d=mot["flow3d"][v3], mask_2d=occ2,
                                mask_3d=occ3[v3]).value

    def consis():
        V = valid_mask(mot["dense"], inputs.events, cur_win)
        return consistency_loss(lum["luma_t"], lum["event_frame_t2"], mot["dense"], V).value

    def pse():
        return pseudo_label_loss(_nearest_fill(frames[0]["depth_raw"]), frames[0]["depth_fused"],
                                 _nearest_fill(frames[1]["depth_raw"]), frames[1]["depth_fused"]).value

    def kl():
        return kl_alignment_loss(mot["cv_l"][:2], mot["cv_r"], mot["cv_e"]).value

    losses = {
        "loss_pho": _masked_or_zero(pho, empty, "pho"),
        "loss_adv": 0.0,
        "loss_consis": _masked_or_zero(consis, empty, "consis"),
        "loss_pse": _masked_or_zero(pse, empty, "pse") if cfg.structure_fusion else 0.0,
        "loss_kl": kl(),
    }
    losses["loss_total"] = total_loss(losses["loss_pho"], losses["loss_adv"],
                                      losses["loss_consis"], losses["loss_pse"],
                                      losses["loss_kl"], cfg.lambdas)
    losses["empty_masks"] = ",".join(empty) if empty else "none"
    losses["occlusion_fraction_2d"] = float(1.0 - occ2.mean())
    return losses


@_stage("metrics")
def metric_stage(inputs, cfg, mot):
    gt_flow = getattr(inputs, "gt_flow", None)
    if gt_flow is None:
        return {}
    s = mot["samples"]
    gt, _, _, inside = bilinear(gt_flow.flow, s.u, s.v)
    gmask, _, _, _ = bilinear(gt_flow.mask.astype(np.float64), s.u, s.v)
    keep = mot["valid2"] & inside & (gmask > 0.999)
    occ = getattr(inputs, "gt_occlusion", None)
    if occ is not None:
        rows = np.clip(np.rint(s.v).astype(np.int64), 0, occ.shape[0] - 1)
        cols = np.clip(np.rint(s.u).astype(np.int64), 0, occ.shape[1] - 1)
        visible = keep & ~occ[rows, cols]
    else:
        visible = keep
    out = {"metric_samples": int(visible.sum())}
    if visible.any():
        out["epe_2d"] = metric_epe(mot["flow2d"], gt, visible)
        out["acc_2d"] = metric_acc(mot["flow2d"], gt, visible, 1.0)
    if keep.any():
        out["epe_2d_all"] = metric_epe(mot["flow2d"], gt, keep)
    t = getattr(inputs, "translation", None)
    v3 = mot["valid3"] & visible
    if t is not None and v3.any():
        gt3 = np.broadcast_to(np.asarray(t, dtype=np.float64), mot["flow3d"].shape)
        out["epe_3d"] = metric_epe(mot["flow3d"], gt3, v3)
        out["acc_3d"] = metric_acc(mot["flow3d"], gt3, v3, 0.05)
    return out


def _structure_stats(inputs, frames, cfg):
    f = frames[0]
    out = {
        "coverage_raw": coverage(f["depth_raw"], f["region"]),
        "coverage_fused": coverage(f["depth_fused"], f["region"]),
    }
    if cfg.structure_fusion:
        out["clusters_used"] = int(f["clusters"])
        out["cluster_objective"] = float(f["objective"])
        out["filled_points"] = int(f["event_depth"].size)
        gt = getattr(inputs, "gt_depth", None)
        if gt is not None and f["event_depth"].size:
            uv = f["event_uv_filled"].astype(np.int64)
            ref = gt.data[uv[:, 1], uv[:, 0]]
            rel = np.abs(f["event_depth"] - ref) / ref
            out["filled_depth_rel_error"] = float(rel.mean())
    return out


def run_pipeline(cfg=PipelineConfig(), inputs=None):
    """Run every stage on ``inputs`` (a synthetic scene is generated when omitted).

    Returns:
        Report whose ``values`` hold losses, metrics and stage statistics.
    """
    if inputs is None:
        try:
            inputs = generate_synthetic(cfg.scene, cfg.seed)
        except HVMFlowError as exc:
            raise StageError("generate", exc) from exc
    lum = luminance_stage(inputs, cfg)
    frames = structure_stage(inputs, cfg)
    mot = motion_stage(inputs, cfg, lum, frames)
    losses = loss_stage(inputs, cfg, lum, frames, mot)
    metrics = metric_stage(inputs, cfg, mot)

    values = {
        "luminance_fusion": cfg.luminance_fusion,
        "structure_fusion": cfg.structure_fusion,
        "motion_fusion": cfg.motion_fusion,
        "seed": cfg.seed,
        "events": len(inputs.events),
        "lidar_points_t": int(len(inputs.cloud_t)),
        "clamped_t": int(lum["clamped_t"]),
        "clamped_t2": int(lum["clamped_t2"]),
    }
    values.update(_structure_stats(inputs, frames, cfg))
    values["samples"] = int(len(mot["samples"]))
    values["valid_samples"] = int(mot["valid2"].sum())
    values.update(losses)
    values.update(metrics)
    for k, v in values.items():
        if isinstance(v, float) and not np.isfinite(v):
            raise NumericalError(f"report value {k} is not finite")

    s = mot["samples"]
    outputs = StageOutputs(
        luma_t=lum["luma_t"], luma_t2=lum["luma_t2"],
        event_frame_t=lum["event_frame_t"], event_frame_t2=lum["event_frame_t2"],
        depth_raw=frames[0]["depth_raw"], depth_fused=frames[0]["depth_fused"],
        cloud_t=frames[0]["cloud"], cloud_t2=frames[1]["cloud"],
        event_labels=frames[0].get("labels"), event_uv=frames[0].get("event_uv"),
        samples_uv=np.stack([s.u, s.v], axis=1), profiles=mot["corr"],
        flow_samples=mot["flow2d"], flow_valid=mot["valid2"], scene_flow=mot["flow3d"],
        dense_flow=mot["dense"], dense_flow_bwd=mot["dense_b"],
    )
    return Report(values, outputs)
