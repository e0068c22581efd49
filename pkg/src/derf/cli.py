"""Command-line entry points: ``gen``, ``train``, ``render``, ``eval``, ``bench``, ``viz-cells``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import evaluate, flop_report, thread_info, time_render
from .checkpoint import CheckpointError, load_checkpoint
from .data import DatasetError, generate_dataset, load_dataset, save_png
from .geometry import camera_ray_arrays, stratified_samples_batch
from .render import composite_batch, painter_render_image, pixel_jitter, render_image
from .scene import SCENES, SceneDescription
from .train import TrainConfig, train_run
from .voronoi import hard_assign

log = logging.getLogger("derf")


def _scene(spec: str) -> SceneDescription:
    if spec in SCENES:
        return SCENES[spec]()
    return SceneDescription.load(spec)


def cmd_gen(args) -> int:
    ds = generate_dataset(_scene(args.scene), args.views, args.res, np.random.default_rng(args.seed), args.out)
    print(f"wrote {len(ds.frames)} views to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = TrainConfig(batch_rays=args.batch, n_samples=args.samples, iters_pretrain=args.iters_pre,
                      iters_main=args.iters_main, lr=args.lr, lr_sites=args.lr_sites, beta_final=args.beta_final,
                      seed=args.seed, n_heads=args.heads, depth=args.depth, width=args.width, sites=args.sites,
                      log_every=args.log_every, checkpoint_every=args.checkpoint_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.__dict__, indent=2, sort_keys=True))
    train_run(cfg, ds, out_dir=out)
    print(f"wrote {out / 'checkpoint.derf'}")
    return 0


def _model_and_camera(args):
    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    if not 0 <= args.frame < len(ds.frames):
        raise ValueError(f"frame {args.frame} out of range (dataset has {len(ds.frames)})")
    samples = args.samples or state.config.n_samples
    return state.model, ds, ds.camera(args.frame), samples


def _render(m, cam, samples, path, seed, background):
    if path == "painter":
        return painter_render_image(m, cam, samples, seed=seed, background=background)
    return render_image(m, cam, samples, seed=seed, mode="hard", background=background)


def cmd_render(args) -> int:
    m, ds, cam, samples = _model_and_camera(args)
    img = _render(m, cam, samples, args.path, args.seed, ds.background)
    save_png(args.out, np.clip(img, 0.0, 1.0))
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    samples = args.samples or state.config.n_samples
    idx = ds.test_indices
    reports = evaluate(state.model, ds, samples, seed=args.seed, indices=idx, path=args.path)
    rows = [{"frame": i, "psnr": r.psnr, "ssim": r.ssim} for i, r in zip(idx, reports)]
    summary = {"frames": rows, "mean_psnr": float(np.mean([r.psnr for r in reports])),
               "mean_ssim": float(np.mean([r.ssim for r in reports])), "samples": samples, "path": args.path}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "quality_report.json").write_text(json.dumps(summary, indent=2))
    with open(out / "quality_report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["frame", "psnr", "ssim"])
        w.writeheader()
        w.writerows(rows)
    print(f"mean PSNR {summary['mean_psnr']:.3f} dB, SSIM {summary['mean_ssim']:.4f}")
    return 0


def cmd_bench(args) -> int:
    m, ds, cam, samples = _model_and_camera(args)
    rep = flop_report(m.descriptor, m.n_heads, cam.width * cam.height, samples)
    timings = {}
    for path in ("monolithic", "painter"):
        t = time_render(m, cam, samples, path=path, repeats=args.repeats, warmup=1, seed=args.seed,
                        threads=args.threads)
        timings[path] = {"median_s": t.median, "times_s": t.times}
        if t.stats:
            timings[path]["cells"] = t.stats["cells"]
    report = {
        "flops": rep.to_dict(),
        "timings": timings,
        "machine": {**thread_info(), "pinned_threads": args.threads},
        "n_heads": m.n_heads,
        "descriptor": m.descriptor.to_dict(),
        "resolution": [cam.width, cam.height],
        "caveats": ["single network level; no coarse/fine duplication in FLOP counts",
                    "MLP FLOPs assume hard routing: one head per sample"],
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench_report.json").write_text(json.dumps(report, indent=2))
    print(f"{rep.total_flops / 1e9:.3f} GFLOP/frame; painter {timings['painter']['median_s']:.3f} s, "
          f"monolithic {timings['monolithic']['median_s']:.3f} s")
    return 0


def cell_palette(n: int) -> np.ndarray:
    """Distinct, deterministic colors for ``n`` cells (golden-ratio hue walk)."""
    import colorsys
    return np.array([colorsys.hsv_to_rgb((k * 0.618033988749895) % 1.0, 0.65, 0.95) for k in range(n)])


def first_hit_cells(m, camera, n_samples: int, seed: int = 0) -> np.ndarray:
    """Per-pixel index of the cell where transmittance first drops below 0.5, or -1."""
    origins, dirs = camera_ray_arrays(camera)
    r = len(origins)
    t, delta = stratified_samples_batch(np.full(r, camera.near), np.full(r, camera.far), n_samples,
                                        jitter=pixel_jitter(seed, r, n_samples))
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    out = m.sample(pts.reshape(-1, 3), np.broadcast_to(dirs[:, None], pts.shape).reshape(-1, 3), mode="hard")
    sigma = out.sigma.reshape(r, n_samples).astype(np.float64)
    _, _, _, trans = composite_batch(sigma, np.zeros((r, n_samples, 3)), delta)
    after = trans * np.exp(-sigma * delta)
    hit = after < 0.5
    first = np.argmax(hit, axis=1)
    x_norm = m.normalization.scale * pts[np.arange(r), first] + m.normalization.offset
    cells = hard_assign(x_norm, m.decomposition)
    cells[~hit.any(axis=1)] = -1
    return cells.reshape(camera.height, camera.width)


def cmd_viz_cells(args) -> int:
    m, ds, cam, samples = _model_and_camera(args)
    cells = first_hit_cells(m, cam, samples, args.seed)
    pal = cell_palette(m.n_heads)
    img = np.where(cells[..., None] >= 0, pal[np.maximum(cells, 0)], np.asarray(ds.background))
    save_png(args.out, img)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="derf", description="Decomposed radiance fields on Voronoi cells.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a synthetic scene into a dataset")
    g.add_argument("--scene", default="three_blob", help=f"one of {sorted(SCENES)} or a scene.json path")
    g.add_argument("--views", type=int, default=24)
    g.add_argument("--res", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="two-phase training; writes checkpoint.derf and metrics.csv")
    t.add_argument("dataset")
    t.add_argument("--heads", type=int, default=1)
    t.add_argument("--width", type=int, default=32)
    t.add_argument("--depth", type=int, default=4)
    t.add_argument("--samples", type=int, default=64)
    t.add_argument("--batch", type=int, default=256)
    t.add_argument("--iters-pre", type=int, default=300)
    t.add_argument("--iters-main", type=int, default=1500)
    t.add_argument("--beta-final", type=float, default=1e10)
    t.add_argument("--sites", choices=("random", "grid"), default="random")
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--lr-sites", type=float, default=5e-3)
    t.add_argument("--log-every", type=int, default=50)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    def camera_args(sp):
        sp.add_argument("checkpoint")
        sp.add_argument("--dataset", required=True, help="dataset whose frame supplies the camera")
        sp.add_argument("--frame", type=int, default=0)
        sp.add_argument("--samples", type=int, default=0, help="samples per ray (0: training value)")
        sp.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("render", help="render one frame to PNG")
    camera_args(r)
    r.add_argument("--path", choices=("monolithic", "painter"), default="painter")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM on held-out frames")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--samples", type=int, default=0)
    e.add_argument("--path", choices=("monolithic", "painter"), default="monolithic")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="FLOP report and render timings")
    camera_args(b)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--threads", type=int, default=None, help="cap BLAS threads while timing")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("viz-cells", help="color pixels by first-hit Voronoi cell")
    camera_args(v)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz_cells)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, DatasetError, CheckpointError, FileNotFoundError, RuntimeError) as e:
        print(f"derf {args.command}: error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())
