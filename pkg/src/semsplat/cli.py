"""Command-line surface: render, fit, gradcheck, unproject, metrics, lift.

Exit codes: 0 success, 1 validation/check failure (with diagnostics on
stderr), 2 usage errors (argparse).  Output is deterministic for fixed
inputs and --seed, independent of --threads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import _kernels, io, metrics, synthetic
from .attention import cross_attn_reuse
from .camera import unproject as camera_unproject
from .core import ActivationConfig, ClassPalette, GaussianCloud
from .gradients import (
    FitView,
    cosine_schedule,
    finite_diff_check,
    optimize_cloud,
)
from .losses import LossConfig
from .rasterizer import RenderSettings, render, render_labels


def _set_threads(threads: Optional[str]) -> None:
    if threads is None or not _kernels.NUMBA_ENABLED:
        return
    import numba

    available = numba.config.NUMBA_NUM_THREADS
    n = available if threads == "max" else max(1, min(int(threads), available))
    numba.set_num_threads(n)


def _apply_render_flags(settings: RenderSettings, args) -> RenderSettings:
    from dataclasses import replace

    if getattr(args, "tile_size", None) is not None:
        settings = replace(settings, tile_size=args.tile_size)
    if getattr(args, "feature_dim", None) is not None:
        settings = replace(settings, feature_dim=args.feature_dim)
    return settings


def _load_scene(args) -> io.SceneConfig:
    if args.config is None:
        raise SystemExit("a --config file is required for this command")
    return io.load_scene_config(args.config)


def _resolve(base: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


def cmd_render(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.config is not None:
        cfg = _load_scene(args)
        if cfg.splat is None:
            print("config has no 'splat' entry to render", file=sys.stderr)
            return 1
        cloud, classifier = io.read_splat(_resolve(Path(args.config).parent, cfg.splat),
                                          cfg.activation)
        cameras = [entry.camera for entry in cfg.cameras]
        settings = cfg.render
    else:
        cloud, camera = synthetic.single_splat_scene()
        cameras = [camera]
        settings = RenderSettings()
        classifier = None
    settings = _apply_render_flags(settings, args)

    digest = hashlib.sha256()
    for i, camera in enumerate(cameras):
        out = render(cloud, camera, settings)
        stem = out_dir / f"view{i:03d}"
        io.write_image(f"{stem}_color.png", out.color)
        io.write_image(f"{stem}_alpha.png", out.alpha)
        np.save(f"{stem}_depth.npy", out.depth)
        np.save(f"{stem}_normal.npy", out.normal)
        if out.feature.shape[2] > 0:
            np.save(f"{stem}_feature.npy", out.feature)
        if classifier is not None:
            labels, _ = render_labels(cloud, camera, settings, *classifier)
            io.write_label_map(f"{stem}_labels.png", labels, ClassPalette.default())
        digest.update(out.color.tobytes())
        digest.update(out.depth.tobytes())
        digest.update(out.alpha.tobytes())
    print(f"rendered {len(cameras)} view(s) to {out_dir}")
    print(f"output hash: {digest.hexdigest()}")
    return 0


def cmd_fit(args) -> int:
    cfg = _load_scene(args)
    base = Path(args.config).parent
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    fit_cfg = cfg.fit
    steps = args.steps if args.steps is not None else int(fit_cfg.get("steps", 500))
    base_lr = float(fit_cfg.get("lr", 1e-2))
    warmup = int(fit_cfg.get("lr_warmup", 0))
    schedule_name = fit_cfg.get("schedule", "cosine")
    lr = cosine_schedule(base_lr, steps, warmup) if schedule_name == "cosine" else base_lr
    trainable = tuple(fit_cfg.get("trainable",
                                  ("positions", "rotations", "scales", "opacities",
                                   "sh_dc", "sh_rest", "features")))

    init_path = fit_cfg.get("init", cfg.splat)
    if init_path is None:
        print("fit requires an initial splat ('fit.init' or 'splat')", file=sys.stderr)
        return 1
    cloud, classifier = io.read_splat(_resolve(base, init_path), cfg.activation)

    views: List[FitView] = []
    for entry in cfg.cameras:
        view = FitView(camera=entry.camera)
        if entry.image is not None:
            view.image = io.read_image(_resolve(base, entry.image))
        if entry.mask is not None:
            view.mask = io.read_image(_resolve(base, entry.mask))
        if entry.features is not None:
            view.features = np.load(_resolve(base, entry.features))
        if entry.labels is not None:
            view.labels = io.read_label_map(_resolve(base, entry.labels))
        views.append(view)

    from .gradients import AdamConfig

    adam = AdamConfig(weight_decay=float(fit_cfg.get("weight_decay", 0.0)))
    lr_scale = fit_cfg.get("lr_scale")
    settings = _apply_render_flags(cfg.render, args)
    try:
        fitted, trace = optimize_cloud(
            cloud, views, cfg.loss, steps=steps, lr=lr, settings=settings,
            activation=cfg.activation, adam=adam, trainable=trainable,
            lr_scale=lr_scale, classifier=classifier,
        )
    except RuntimeError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return 1

    io.write_splat(out_dir / "fitted.ply", fitted, cfg.activation)
    io.write_loss_csv(out_dir / "loss.csv", trace)
    print(f"fit finished after {steps} steps; final loss {trace[-1]:.6g}")
    print(f"wrote {out_dir / 'fitted.ply'} and {out_dir / 'loss.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    rng_seeds = [args.seed + i for i in range(args.scenes)]
    worst = 0.0
    reports = []
    for seed in rng_seeds:
        cloud, camera = synthetic.random_scene(seed, count=args.gaussians,
                                               width=16, height=16, feature_dim=4)
        report = finite_diff_check(cloud, camera, RenderSettings(tile_size=args.tile_size or 16),
                                   eps=args.eps, tolerance=args.tolerance)
        reports.append((seed, report))
        worst = max(worst, report.max_rel_err)
        for entry in report.entries.values():
            status = "ok" if entry.passed else "FAIL"
            print(f"seed {seed} {entry.name:>8}: max rel {entry.max_rel_err:.3e} "
                  f"max abs {entry.max_abs_err:.3e} ({entry.count} entries) {status}")
    passed = all(r.passed for _, r in reports)
    if args.out:
        payload = {
            "tolerance": args.tolerance,
            "passed": passed,
            "scenes": {
                str(seed): {
                    name: {"max_rel_err": e.max_rel_err, "max_abs_err": e.max_abs_err,
                           "count": e.count, "passed": e.passed}
                    for name, e in report.entries.items()
                }
                for seed, report in reports
            },
        }
        Path(args.out).write_text(json.dumps(payload, indent=2))
    print(f"gradcheck {'passed' if passed else 'FAILED'}; worst rel err {worst:.3e}")
    return 0 if passed else 1


def cmd_unproject(args) -> int:
    cfg = _load_scene(args)
    base = Path(args.config).parent
    if not cfg.cameras:
        print("config defines no cameras", file=sys.stderr)
        return 1
    camera = cfg.cameras[args.view].camera
    depth = np.load(_resolve(base, args.depth))
    offsets = np.load(_resolve(base, args.offsets)) if args.offsets else None
    mask = None
    if args.mask:
        mask = io.read_image(_resolve(base, args.mask)) >= 0.5
    try:
        points, _ = camera_unproject(camera, depth, offsets, mask,
                                     half_pixel=not args.no_half_pixel,
                                     eq1_literal=args.eq1_literal)
    except ValueError as exc:
        print(f"unproject failed: {exc}", file=sys.stderr)
        return 1
    n = points.shape[0]
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    cloud = GaussianCloud(
        positions=points, rotations=quats,
        scales=np.full((n, 3), 0.01), opacities=np.full(n, 0.5),
        sh_coeffs=np.zeros((n, 16, 3)), features=np.zeros((n, 0)),
    )
    io.write_splat(args.out, cloud, cfg.activation)
    print(f"unprojected {n} points to {args.out}")
    return 0


def cmd_metrics(args) -> int:
    report = {}
    if args.pred and args.gt:
        pred = io.read_image(args.pred)
        gt = io.read_image(args.gt)
        report["psnr"] = metrics.psnr(pred, gt)
        report["ssim"] = metrics.ssim(pred, gt)
    if args.pred_labels and args.gt_labels:
        pred_l = io.read_label_map(args.pred_labels)
        gt_l = io.read_label_map(args.gt_labels)
        miou, macc = metrics.seg_scores(pred_l, gt_l)
        report["miou"] = miou
        report["macc"] = macc
    if not report:
        print("nothing to score: pass --pred/--gt and/or --pred-labels/--gt-labels",
              file=sys.stderr)
        return 1
    for key, value in report.items():
        print(f"{key},{value:.6f}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return 0


def cmd_lift(args) -> int:
    cache = io.load_attention_cache(args.cache)
    features = np.load(args.features)
    try:
        lifted = cross_attn_reuse(cache, features, block=args.block)
    except ValueError as exc:
        print(f"lift failed: {exc}", file=sys.stderr)
        return 1
    np.save(args.out, lifted)
    print(f"lifted features {features.shape} -> {lifted.shape} at {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semsplat",
                                     description="Semantic Gaussian splatting engine")
    parser.add_argument("--threads", default=None,
                        help="worker count for the compositing kernels (or 'max')")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a splat scene (builtin single-splat demo without --config)")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile-size", type=int, default=None, dest="tile_size")
    p.add_argument("--feature-dim", type=int, default=None, dest="feature_dim")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", help="optimize a splat against configured targets")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile-size", type=int, default=None, dest="tile_size")
    p.add_argument("--feature-dim", type=int, default=None, dest="feature_dim")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--gaussians", type=int, default=8)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--tile-size", type=int, default=None, dest="tile_size")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("unproject", help="lift a depth map (+offsets) to splat positions")
    p.add_argument("--config", required=True)
    p.add_argument("--depth", required=True, help="depth map .npy")
    p.add_argument("--offsets", default=None, help="offset map .npy")
    p.add_argument("--mask", default=None, help="foreground mask image")
    p.add_argument("--view", type=int, default=0, help="camera index in the config")
    p.add_argument("--out", required=True)
    p.add_argument("--no-half-pixel", action="store_true", dest="no_half_pixel")
    p.add_argument("--eq1-literal", action="store_true", dest="eq1_literal")
    p.set_defaults(func=cmd_unproject)

    p = sub.add_parser("metrics", help="PSNR/SSIM and mIoU/mAcc reports")
    p.add_argument("--pred", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--pred-labels", default=None, dest="pred_labels")
    p.add_argument("--gt-labels", default=None, dest="gt_labels")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("lift", help="apply cached attention weights to an external feature map")
    p.add_argument("--cache", required=True, help="attention cache .npz")
    p.add_argument("--features", required=True, help="token-aligned features .npy")
    p.add_argument("--block", default="last", choices=("last", "mean"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lift)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    try:
        return args.func(args)
    except (io.ConfigError, io.SplatFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
