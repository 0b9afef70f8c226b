"""Command line interface.

Exit codes: 0 success, 1 bad input (files, config, arguments), 2 numerical
failure (NaN/Inf), 3 gradient audit failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .errors import HVMFlowError, NumericalError, StageError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3


def _config(args):
    from .config import load_config

    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def cmd_generate(args):
    from .scenefiles import save_scene
    from .synthetic import generate_synthetic

    cfg = _config(args)
    scene = generate_synthetic(cfg.scene, cfg.seed)
    save_scene(args.outdir, scene)
    print(f"scene written to {args.outdir}: {len(scene.events)} events, "
          f"{len(scene.cloud_t)} LiDAR points")
    return EXIT_OK


def cmd_run(args):
    from .pipeline import run_pipeline
    from .report import write_artifacts

    cfg = _config(args)
    inputs = None
    if args.input:
        from .scenefiles import load_scene

        inputs = load_scene(args.input)
    report = run_pipeline(cfg, inputs)
    sys.stdout.write(report.to_text())
    if args.out:
        write_artifacts(args.out, report, figures=not args.no_figures)
    return EXIT_OK


def _read_scores(path):
    from .errors import FormatError

    vals = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                vals.append(float(line))
            except ValueError:
                raise FormatError(f"not a number: {line!r}", line=ln) from None
    return np.array(vals)


def _profiles(paths):
    from .correlation import load_correlation

    return np.concatenate([load_correlation(p).profiles for p in paths])


def cmd_loss(args):
    from .color import luma
    from .io import load_events, load_flow, load_image, load_points

    which = args.which
    if which == "adv":
        from .luminance import adversarial_loss

        loss = adversarial_loss(_read_scores(args.scores_t), _read_scores(args.scores_t2))
    elif which == "consis":
        from .events import accumulate_intensity
        from .luminance import consistency_loss, valid_mask

        img = load_image(args.image)
        I = luma(img) if img.channels == 3 else img.data
        ev = load_events(args.events, width=img.width, height=img.height)
        E = accumulate_intensity(ev, args.threshold).data
        U = load_flow(args.flow)
        V = valid_mask(U, ev)
        if args.mask:
            V = V & (load_image(args.mask).data > 0.5)
        loss = consistency_loss(I, E, U, V)
    elif which == "pse":
        from .structure import pseudo_label_loss

        loss = pseudo_label_loss(*(load_image(p).data for p in
                                   (args.pred_t, args.pse_t, args.pred_t2, args.pse_t2)))
    elif which == "pho":
        from .photometric import occlusion_mask, photometric_loss

        a, b = load_image(args.image_t), load_image(args.image_t2)
        U = load_flow(args.flow)
        mask = U.mask
        if args.flow_bwd:
            mask = mask & occlusion_mask(U, load_flow(args.flow_bwd))
        kw = {}
        if args.points_t:
            kw = dict(pts_t=load_points(args.points_t).points,
                      pc_t2=load_points(args.cloud_t2).points,
                      flow3d=load_points(args.scene_flow).points)
        loss = photometric_loss(a.data, b.data, U, mask_2d=mask, **kw)
    elif which == "kl":
        from .correlation import kl_alignment_loss

        cv_l = _profiles(args.lidar)
        cv_r = _profiles(args.rgb)
        ev = args.event
        if len(ev) % 2:
            raise HVMFlowError("--event needs x/y profile pairs, one pair per slice")
        cv_e = np.stack([_profiles(ev[i:i + 2]) for i in range(0, len(ev), 2)])
        loss = kl_alignment_loss(cv_l, cv_r, cv_e)
    else:  # argparse restricts choices
        raise HVMFlowError(f"unknown loss {which}")
    if not np.isfinite(loss.value):
        raise NumericalError(f"loss {which} is not finite")
    print(f"loss_{which}: {loss.value!r}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import LOSSES, run_gradcheck

    losses = args.loss or list(LOSSES)
    results, elapsed = run_gradcheck(losses, seeds=args.seeds, h=args.h, tol=args.tol)
    ok = True
    for name in losses:
        rs = [r for r in results if r.loss == name]
        passed = all(r.passed for r in rs)
        ok &= passed
        print(f"{name}: {'PASS' if passed else 'FAIL'} max_rel_error="
              f"{max(r.max_rel_error for r in rs):.3e} checked={sum(r.checked for r in rs)} "
              f"excluded={sum(r.excluded for r in rs)} seeds={len(rs)}")
    print(f"elapsed: {elapsed:.2f}s")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_metrics(args):
    from .io import load_flow, load_image
    from .metrics import metric_acc, metric_epe

    pred, gt = load_flow(args.pred), load_flow(args.gt)
    if pred.flow.shape != gt.flow.shape:
        raise HVMFlowError(f"flow sizes differ: {pred.flow.shape[:2]} vs {gt.flow.shape[:2]}")
    mask = pred.mask & gt.mask
    if args.mask:
        m = load_image(args.mask).data
        if m.shape != mask.shape:
            raise HVMFlowError("mask size differs from the flow")
        mask &= m > 0.5
    print(f"epe: {metric_epe(pred.flow, gt.flow, mask)!r}")
    print(f"acc: {metric_acc(pred.flow, gt.flow, mask, args.threshold)!r}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="hvmflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI file with [pipeline] and [scene] sections")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (scene keys as scene.KEY)")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="write a synthetic scene directory")
    g.add_argument("outdir")
    with_config(g)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run the full pipeline and print the report")
    r.add_argument("--input", help="scene directory (default: generate from the config)")
    r.add_argument("--out", help="directory for report files, flow and figures")
    r.add_argument("--no-figures", action="store_true")
    with_config(r)
    r.set_defaults(func=cmd_run)

    lo = sub.add_parser("loss", help="evaluate one loss on files")
    lo.add_argument("which", choices=["adv", "consis", "pse", "pho", "kl"])
    lo.add_argument("--scores-t")
    lo.add_argument("--scores-t2")
    lo.add_argument("--image")
    lo.add_argument("--events")
    lo.add_argument("--threshold", type=float, default=1.0 / 32.0)
    lo.add_argument("--flow")
    lo.add_argument("--flow-bwd")
    lo.add_argument("--mask")
    lo.add_argument("--pred-t")
    lo.add_argument("--pse-t")
    lo.add_argument("--pred-t2")
    lo.add_argument("--pse-t2")
    lo.add_argument("--image-t")
    lo.add_argument("--image-t2")
    lo.add_argument("--points-t")
    lo.add_argument("--cloud-t2")
    lo.add_argument("--scene-flow")
    lo.add_argument("--lidar", nargs=2, metavar=("X", "Y"))
    lo.add_argument("--rgb", nargs=2, metavar=("X", "Y"))
    lo.add_argument("--event", nargs="+", metavar="PROFILE")
    lo.set_defaults(func=cmd_loss)

    gc = sub.add_parser("gradcheck", help="finite-difference audit of all loss gradients")
    gc.add_argument("--loss", action="append", choices=["consis", "adv", "pse", "kl", "pho"])
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("metrics", help="EPE and ACC between two flow files")
    m.add_argument("--pred", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--mask")
    m.add_argument("--threshold", type=float, default=1.0)
    m.set_defaults(func=cmd_metrics)
    return p


_REQUIRED = {
    "adv": ("scores_t", "scores_t2"),
    "consis": ("image", "events", "flow"),
    "pse": ("pred_t", "pse_t", "pred_t2", "pse_t2"),
    "pho": ("image_t", "image_t2", "flow"),
    "kl": ("lidar", "rgb", "event"),
}


def _is_numeric(exc):
    while isinstance(exc, StageError):
        exc = exc.cause
    return isinstance(exc, (NumericalError, FloatingPointError))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    if args.command == "loss":
        missing = [k for k in _REQUIRED[args.which] if getattr(args, k) is None]
        if args.which == "pho" and args.points_t and not (args.cloud_t2 and args.scene_flow):
            missing += ["cloud_t2", "scene_flow"]
        if missing:
            print(f"error: loss {args.which} needs " +
                  ", ".join("--" + k.replace("_", "-") for k in missing), file=sys.stderr)
            return EXIT_INPUT
    try:
        return args.func(args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if _is_numeric(exc) else EXIT_INPUT
    except (HVMFlowError, ValueError, OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
