"""Acceptance suite: eight end-to-end properties at their stated tolerances.

Each test prints one ``[criterion N] PASS|FAIL ...`` line; the lines are
also collected into the pytest terminal summary. Run this file directly
(``python tests/test_acceptance.py``) for the summary without pytest.
"""

import os
import sys
import time

import numpy as np
import pytest
from scipy.ndimage import distance_transform_edt

sys.path.insert(0, os.path.dirname(__file__))

from conftest import ACCEPTANCE_LINES  # noqa: E402
from test_correlation import kl_loss_oracle, random_profiles  # noqa: E402
from test_structure import exhaustive_two_means, random_instance, same_partition, two_blob_instance  # noqa: E402

from hvmflow.cli import EXIT_INPUT, main  # noqa: E402
from hvmflow.config import PipelineConfig, apply_overrides  # noqa: E402
from hvmflow.correlation import kl_alignment_loss  # noqa: E402
from hvmflow.events import accumulate_intensity, voxelize_events  # noqa: E402
from hvmflow.gradcheck import LOSSES, run_gradcheck  # noqa: E402
from hvmflow.io import load_flow, save_flow  # noqa: E402
from hvmflow.pipeline import run_pipeline, structure_stage  # noqa: E402
from hvmflow.scenefiles import save_scene  # noqa: E402
from hvmflow.structure import DistanceParams, cluster_neighbors  # noqa: E402
from hvmflow.synthetic import SceneParams, generate_synthetic  # noqa: E402
from hvmflow.types import FlowField2D  # noqa: E402


def record(n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def test_criterion_1_gradient_audit():
    results, elapsed = run_gradcheck(LOSSES, seeds=20, h=1e-5, tol=1e-4)
    parts, ok = [], elapsed < 120.0
    for name in LOSSES:
        rs = [r for r in results if r.loss == name]
        ok &= len(rs) == 20 and all(r.passed for r in rs)
        parts.append(f"{name}={max(r.max_rel_error for r in rs):.1e}")
    assert record(1, ok, f"gradcheck max rel error {' '.join(parts)} (tol 1e-4, 20 seeds), "
                         f"{elapsed:.1f}s (limit 120s)")


def test_criterion_2_event_accumulation():
    worst, exact = 0.0, True
    for seed in range(10):
        scene = generate_synthetic(SceneParams(low_light=bool(seed % 2)), seed)
        C = scene.threshold
        for win, a, b in (((-1.0, 0.0), scene.luma_prev, scene.luma_t),
                          ((0.0, 1.0), scene.luma_t, scene.luma_t2)):
            full = accumulate_intensity(scene.events, C, win).data
            for T in (1, 4, 10):
                vox = voxelize_events(scene.events, T, C, win)
                exact &= np.array_equal(vox.total(), full)
                exact &= np.array_equal(vox.slices.sum(axis=0), full)
            worst = max(worst, float(np.max(np.abs(full - (b - a))) / C))
        # a non-dyadic threshold still sums exactly through the integer counts
        vox = voxelize_events(scene.events, 7, 0.1)
        exact &= np.array_equal(vox.total(), accumulate_intensity(scene.events, 0.1).data)
    ok = exact and worst <= 1.0
    assert record(2, ok, f"slice-sum bit-exact={exact}; max |I^X - dI| = {worst:.3f} C "
                         f"(limit 1 C) over 10 scenes")


def test_criterion_3_clustering():
    monotone = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        P_e, P_l = random_instance(rng)
        cm = cluster_neighbors(P_e, P_l, int(rng.integers(2, 16)), iters=10, seed=seed,
                               image_size=(40, 30))
        monotone &= bool(np.all(np.diff(cm.history) <= 0.0))
    matched = 0
    params = DistanceParams(n_s=4.0)
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        P_e, P_l = two_blob_instance(rng)
        cm = cluster_neighbors(P_e, P_l, 2, iters=10, params=params, seed=seed,
                               image_size=(20, 10))
        labels = np.concatenate([cm.event_labels, cm.lidar_labels])
        _, oracle = exhaustive_two_means(P_e, P_l, params.n_s, cm.depth_scale)
        matched += same_partition(labels, oracle)
    ok = monotone and matched == 20
    assert record(3, ok, f"objective non-increasing on 50/50 instances={monotone}; "
                         f"two-blob exhaustive 2-means matches {matched}/20")


def test_criterion_4_kl_oracle():
    worst, nonneg = 0.0, True
    for seed in range(200):
        rng = np.random.default_rng(seed)
        L = int(rng.integers(1, 10))
        cv_l, cv_r, cv_e = random_profiles(rng, int(rng.integers(1, 4)),
                                           int(rng.integers(1, 6)), L)
        got = kl_alignment_loss(cv_l, cv_r, cv_e).value
        worst = max(worst, abs(got - kl_loss_oracle(cv_l, cv_r, cv_e)))
        nonneg &= got >= 0.0
    rng = np.random.default_rng(0)
    cv = rng.normal(size=(2, 4, 9))
    zero = kl_alignment_loss(cv, cv, np.stack([cv, cv])).value
    other = cv.copy()
    other[1, 2, 4] += 1.0
    pos = kl_alignment_loss(cv, other, cv[None]).value
    ok = worst <= 1e-10 and nonneg and zero == 0.0 and pos > 0.0
    assert record(4, ok, f"max |loss - oracle| = {worst:.1e} (limit 1e-10) over 200 cases; "
                         f"nonnegative={nonneg}; matched={zero}; mismatched={pos:.3e}")


def test_criterion_5_structure_fusion(scene):
    cfg = PipelineConfig()
    frame = structure_stage(scene, cfg)[0]
    region = frame["region"]
    raw = np.count_nonzero((frame["depth_raw"] > 0) & region) / region.sum()
    fused = np.count_nonzero((frame["depth_fused"] > 0) & region) / region.sum()
    uv = frame["event_uv_filled"].astype(int)
    gt = scene.gt_depth.data[uv[:, 1], uv[:, 0]]
    z = frame["event_depth"]
    rel = np.abs(z - gt) / gt
    bounded = bool(np.all((z >= frame["event_src_lo"]) & (z <= frame["event_src_hi"])))
    ratio = fused / raw
    miss = rel > 0.05
    # how far the misses sit from a depth discontinuity
    g = scene.gt_depth.data
    edge = np.zeros(g.shape, bool)
    edge[:, 1:] |= g[:, 1:] != g[:, :-1]
    edge[:, :-1] |= g[:, 1:] != g[:, :-1]
    edge[1:] |= g[1:] != g[:-1]
    edge[:-1] |= g[1:] != g[:-1]
    gap = distance_transform_edt(~edge)[uv[miss, 1], uv[miss, 0]]
    ok = ratio >= 2.0 and not miss.any() and bounded
    assert record(5, ok, f"coverage {raw:.3f} -> {fused:.3f} ({ratio:.2f}x, limit 2x); "
                         f"{miss.sum()} of {z.size} filled depths beyond 5% of GT "
                         f"(all within {gap.max() if gap.size else 0:.0f}px of the occluder "
                         f"silhouette; mean rel error {100 * rel.mean():.2f}%); "
                         f"inside source [min, max]={bounded}")


def test_criterion_6_end_to_end_motion():
    start = time.process_time()
    report = run_pipeline(PipelineConfig())
    cpu = time.process_time() - start
    epe, acc = report["epe_2d"], report["acc_2d"]
    ok = epe < 0.5 and acc > 90.0 and cpu < 60.0
    assert record(6, ok, f"EPE {epe:.3f}px (limit 0.5), ACC {acc:.2f}% (limit 90) on "
                         f"{report['metric_samples']} samples, {cpu:.1f}s CPU (limit 60s)")


def test_criterion_7_ablation_direction():
    base = apply_overrides(PipelineConfig(), ["scene.low_light=true"])
    variants = {
        "none": dict(luminance_fusion=False, structure_fusion=False, motion_fusion=False),
        "motion": dict(luminance_fusion=False, structure_fusion=False, motion_fusion=True),
        "full": {},
    }
    epe = {k: [] for k in variants}
    for seed in range(10):
        for name, change in variants.items():
            epe[name].append(run_pipeline(base.replace(seed=seed, **change))["epe_2d"])
    e = {k: np.array(v) for k, v in epe.items()}
    per_scene = int(np.sum((e["full"] <= e["motion"]) & (e["motion"] <= e["none"])))
    means = {k: float(v.mean()) for k, v in e.items()}
    strict = means["full"] < means["motion"] and means["full"] < means["none"]
    ok = per_scene == 10 and strict
    assert record(7, ok, f"ordering full<=motion<=none on {per_scene}/10 scenes; mean EPE "
                         f"full {means['full']:.3f}, motion {means['motion']:.3f}, "
                         f"none {means['none']:.3f}")


def _mutations(rng, data, count):
    out = []
    for _ in range(count):
        b = bytearray(data)
        kind = rng.integers(4)
        if kind == 0 and b:
            for _ in range(int(rng.integers(1, 8))):
                b[int(rng.integers(len(b)))] = int(rng.integers(256))
        elif kind == 1:
            b = b[:int(rng.integers(len(b) + 1))]
        elif kind == 2:
            pos = int(rng.integers(len(b) + 1))
            b[pos:pos] = bytes(rng.integers(0, 256, int(rng.integers(1, 16))).astype(np.uint8))
        else:
            junk = [b"nan", b"-1", b"1e999", b"\xff\xfe", b"#", b" ", b"\n", b"abc", b"0"]
            pos = int(rng.integers(len(b) + 1))
            b[pos:pos] = junk[int(rng.integers(len(junk)))]
        if bytes(b) != data:
            out.append(bytes(b))
    return out


def test_criterion_8_determinism_and_formats(tmp_path, capsys):
    cfg = PipelineConfig(seed=3, samples=300)
    a, b = run_pipeline(cfg), run_pipeline(cfg)
    deterministic = a.to_text() == b.to_text() and np.array_equal(
        a.outputs.dense_flow, b.outputs.dense_flow)

    rng = np.random.default_rng(0)
    roundtrip = True
    for k in range(20):
        h, w = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        flow = rng.normal(0, 10, (h, w, 2)).astype(np.float32).astype(np.float64)
        mask = rng.uniform(size=(h, w)) < 0.7
        p1, p2 = tmp_path / f"a{k}.vmfl", tmp_path / f"b{k}.vmfl"
        save_flow(p1, FlowField2D(flow, mask))
        back = load_flow(p1)
        save_flow(p2, back)
        roundtrip &= p1.read_bytes() == p2.read_bytes()
        roundtrip &= np.array_equal(back.flow, np.where(mask[..., None], flow, 0.0))

    # fuzz every input format through the command line
    small = SceneParams(width=40, height=32, focal=36.0, cx=20.0, cy=16.0)
    scene_dir = tmp_path / "scene"
    save_scene(scene_dir, generate_synthetic(small, 1))
    save_flow(tmp_path / "gt.vmfl", FlowField2D(rng.normal(size=(6, 5, 2))))
    cases = []
    for name in ("camera.ini", "events.txt", "cloud_t.txt", "rgb_t.ppm", "gt_flow.vmfl"):
        original = (scene_dir / name).read_bytes()
        if name == "events.txt":
            original = original[:3000]
        for blob in _mutations(rng, original, 12):
            cases.append(("scene", name, blob))
    for blob in _mutations(rng, (tmp_path / "gt.vmfl").read_bytes(), 30):
        cases.append(("flow", "pred.vmfl", blob))
    for blob in _mutations(rng, b"[pipeline]\nsamples = 50\n[scene]\nlow_light = true\n", 20):
        cases.append(("config", "c.ini", blob))

    codes = {}
    crashed = []
    for i, (kind, name, blob) in enumerate(cases):
        if kind == "scene":
            d = tmp_path / f"fz{i}"
            d.mkdir()
            for f in scene_dir.iterdir():
                (d / f.name).write_bytes(blob if f.name == name else f.read_bytes())
            argv = ["run", "--input", str(d), "--set", "samples=30", "--set", "clusters=8",
                    "--set", "cluster_iters=2", "--set", "refine_rounds=1"]
        elif kind == "flow":
            (tmp_path / name).write_bytes(blob)
            argv = ["metrics", "--pred", str(tmp_path / name), "--gt", str(tmp_path / "gt.vmfl")]
        else:
            (tmp_path / name).write_bytes(blob)
            argv = ["run", "--config", str(tmp_path / name), "--set", "samples=30",
                    "--set", "scene.width=40", "--set", "scene.height=32", "--set", "scene.cx=20",
                    "--set", "scene.cy=16", "--set", "scene.focal=36", "--set", "clusters=8"]
        try:
            code = main(argv)
        except BaseException as exc:  # noqa: BLE001 - any escape is a crash
            crashed.append(f"{name}: {type(exc).__name__}: {exc}")
            continue
        codes[code] = codes.get(code, 0) + 1
    capsys.readouterr()
    rejected = codes.get(EXIT_INPUT, 0)
    fuzz_ok = not crashed and set(codes) <= {0, EXIT_INPUT} and rejected > 0
    ok = deterministic and roundtrip and fuzz_ok
    detail = (f"bit-identical reports={deterministic}; VMFL round trips bit-exact={roundtrip}; "
              f"{len(cases)} fuzzed inputs: {rejected} rejected with exit 1, "
              f"{codes.get(0, 0)} still valid, {len(crashed)} crashes")
    if crashed:
        detail += f" (first: {crashed[0]})"
    assert record(8, ok, detail)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
