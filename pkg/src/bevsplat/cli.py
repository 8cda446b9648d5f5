"""``bevsplat`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .tensor_io import ConfigError, RunConfig, TensorFormatError, load_config, read_tensor, write_tensor

log = logging.getLogger("bevsplat")


def _dump(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _np_dtype(cfg: RunConfig):
    return np.float32 if cfg.dtype == "f32" else np.float64


def _scene_spec(args, cfg: RunConfig):
    from .harness.scene import SceneSpec

    return SceneSpec(
        depth_noise_sigma=args.noise,
        feature_mode=args.feature_mode,
        depth_target=args.depth_target,
        channels=args.channels,
        seed=cfg.seed if args.seed is None else args.seed,
    )


def _add_scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--noise", type=float, default=0.0, help="depth noise sigma in metres")
    p.add_argument("--feature-mode", choices=["onehot_class", "random"], default="onehot_class")
    p.add_argument("--depth-target", choices=["extent", "surface"], default="extent")
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--seed", type=int, default=None)


# ---------------------------------------------------------------------------


def cmd_gen_scene(args, cfg: RunConfig) -> int:
    from .harness.scene import gen_scene, save_scene

    scene = gen_scene(_scene_spec(args, cfg), cfg)
    save_scene(scene, args.out)
    _dump({"out": str(args.out), "cameras": len(scene.cameras), "gt_cells": int(scene.gt_mask.sum())})
    return 0


def cmd_lift(args, cfg: RunConfig) -> int:
    from .harness.pipeline import lift_scene
    from .harness.scene import load_scene
    from .uncertainty import filter_opacity

    scene = load_scene(args.scene)
    gs = filter_opacity(lift_scene(cfg, scene), cfg.opacity_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dt = _np_dtype(cfg)
    write_tensor(gs.mu3d.astype(np.float64), out / "mu3d.bevt")
    write_tensor(gs.cov3d.astype(np.float64), out / "cov3d.bevt")
    write_tensor(gs.opacity.astype(dt), out / "opacity.bevt")
    write_tensor(gs.features.astype(dt), out / "features.bevt")
    write_tensor(gs.camera_index.astype(np.float64), out / "camera_index.bevt")
    summary = {"n_gaussians": len(gs), "retained_fraction": gs.retained_fraction}
    (out / "gaussians.json").write_text(json.dumps(summary, indent=2))
    _dump(dict(summary, out=str(out)))
    return 0


def _read_gaussians(d: Path):
    from .uncertainty import PixelGaussianSet

    mu = read_tensor(d / "mu3d.bevt").reshape(-1, 3)
    n = mu.shape[0]
    cam = d / "camera_index.bevt"
    feats = read_tensor(d / "features.bevt")
    return PixelGaussianSet(
        mu3d=mu,
        cov3d=read_tensor(d / "cov3d.bevt").reshape(n, 3, 3),
        opacity=read_tensor(d / "opacity.bevt").reshape(n),
        features=feats.reshape(n, -1),
        camera_index=read_tensor(cam).astype(np.int64).reshape(n) if cam.exists() else np.zeros(n, np.int64),
        pixel=np.zeros((n, 2), dtype=np.int64),
    )


def cmd_render(args, cfg: RunConfig) -> int:
    from .harness.images import emit_image
    from .harness.pipeline import render_gaussians

    gs = _read_gaussians(Path(args.gaussians))
    fused, maps = render_gaussians(cfg, gs, n_threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(fused.values, out / "fused.bevt")
    write_tensor(fused.weight, out / "fused_weight.bevt")
    emit_image(fused, out / "fused_weight.pgm")
    for c in range(fused.channels):
        emit_image(fused, out / f"fused_c{c}.pgm", channel=c)
    for m in maps:
        r = m.meta["resolution"]
        write_tensor(m.values, out / f"scale_{r}.bevt")
        emit_image(m, out / f"scale_{r}_weight.pgm")
    _dump({"out": str(out), "scales": list(cfg.scales), "channels": fused.channels})
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .harness.evaluate import banded_iou, best_threshold
    from .harness.images import emit_image
    from .harness.pipeline import DEFAULT_BANDS, EvalReport
    from .rasterizer import BevGrid

    pred = read_tensor(args.pred)
    gt = read_tensor(args.gt).astype(bool)
    if pred.ndim == 3:
        ch = args.channel if args.channel is not None else (1 if pred.shape[0] > 1 else 0)
        resp = pred[ch].astype(np.float64)
    elif pred.ndim == 2:
        resp = pred.astype(np.float64)
    else:
        raise ValueError(f"prediction must be a 2D mask or (C, R, W) map, got {pred.shape}")
    if resp.shape != gt.shape:
        raise ValueError(f"prediction {resp.shape} and ground truth {gt.shape} differ")
    if args.threshold is None:
        thr, _ = best_threshold(resp, gt)
    else:
        thr = args.threshold
    mask = resp > thr
    grid = BevGrid(cfg.bev.x_min, cfg.bev.x_max, cfg.bev.y_min, cfg.bev.y_max, *gt.shape)
    bands = sorted({args.min_distance, *DEFAULT_BANDS})
    band = banded_iou(mask, gt, grid, bands)
    iou = dict(band)[args.min_distance]
    report = EvalReport(iou=iou, distance_band_iou=band, retained_fraction=float("nan"), threshold=float(thr))
    if args.overlay:
        emit_image(mask, args.overlay, "ppm_overlay", gt=gt)
    d = report.to_dict()
    d["retained_fraction"] = None
    d["min_distance"] = args.min_distance
    _dump(d)
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    from .gradients import grad_check, random_check_case

    seed = cfg.seed if args.seed is None else args.seed
    ok = True
    results = []
    for i in range(args.cases):
        cams, st, d = random_check_case(seed + i)
        st.n_threads = args.threads
        rep = grad_check(cams, st, d, args.dtype)
        ok &= rep.passed
        results.append(dict(rep.to_dict(), seed=seed + i))
    _dump(results if len(results) > 1 else results[0])
    return 0 if ok else 1


def cmd_bench(args, cfg: RunConfig) -> int:
    from .harness.bench import bench_pipeline, bench_render, bench_scaling
    from .harness.scene import SceneSpec, gen_scene

    res = max(cfg.scales)
    out = {
        "render": bench_render(
            args.n, res, args.channels, args.k, args.reps, args.oracle_reps, cfg.seed, args.threads
        ),
        "scaling": bench_scaling(
            [max(1, args.n // 2), args.n, 2 * args.n], res, args.channels, args.k, args.reps, cfg.seed, args.threads
        ),
    }
    scene = gen_scene(SceneSpec(seed=cfg.seed), cfg)
    out["pipeline_ms"] = bench_pipeline(cfg, scene, args.reps, args.threads)
    _dump(out)
    return 0


def cmd_sweep_k(args, cfg: RunConfig) -> int:
    from .harness.pipeline import run_pipeline
    from .harness.scene import gen_scene, load_scene

    ks = [float(x) for x in args.ks.split(",") if x.strip()]
    if not ks or any(k <= 0 for k in ks):
        raise ValueError("--ks needs a comma-separated list of positive values")
    scene = load_scene(args.scene) if args.scene else gen_scene(_scene_spec(args, cfg), cfg)
    pairs = []
    for k in ks:
        _, rep = run_pipeline(cfg.with_updates(k=k), scene, n_threads=args.threads)
        pairs.append([k, rep.iou])
    _dump(pairs)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bevsplat", description="Depth-uncertainty Gaussian splatting onto BEV grids.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name: str, fn, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: BEVSPLAT_THREADS or all)")
        p.set_defaults(func=fn)
        return p

    p = add("gen-scene", cmd_gen_scene, "write a synthetic multi-camera scene")
    p.add_argument("--out", type=Path, required=True)
    _add_scene_flags(p)

    p = add("lift", cmd_lift, "lift a scene to 3D Gaussians")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("render", cmd_render, "splat Gaussians onto every BEV scale and fuse")
    p.add_argument("--gaussians", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("eval", cmd_eval, "IoU of a predicted map or mask against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--min-distance", type=float, default=0.0)
    p.add_argument("--channel", type=int, default=None, help="class channel of a (C, R, W) prediction")
    p.add_argument("--threshold", type=float, default=None, help="fixed threshold (default: IoU-maximising)")
    p.add_argument("--overlay", type=Path, default=None, help="write a PPM overlay here")

    p = add("grad-check", cmd_grad_check, "finite-difference check of the full chain")
    p.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cases", type=int, default=1)

    p = add("bench", cmd_bench, "timing table (JSON)")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--k", type=float, default=3.0)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--oracle-reps", type=int, default=1)

    p = add("sweep-k", cmd_sweep_k, "IoU as a function of k")
    p.add_argument("--ks", default="0.25,0.5,0.75,1.0,1.25,2.0,3.0,4.0")
    p.add_argument("--scene", type=Path, default=None, help="scene directory (default: generate one)")
    _add_scene_flags(p)
    p.set_defaults(noise=2.0)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        os.environ["BEVSPLAT_THREADS"] = str(args.threads)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, TensorFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
