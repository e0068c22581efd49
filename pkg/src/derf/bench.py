"""FLOP accounting, render timing, and image-quality metrics."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .field import ArchitectureDescriptor

# per ray, per ordered site pair: two dot products (3 MACs each), a divide, two compares
CLIP_FLOPS_PER_PAIR = 16
# per sample: exp, multiply-add for transmittance and 3 channels of accumulation
COMPOSITE_FLOPS_PER_SAMPLE = 12


def stage_macs(desc: ArchitectureDescriptor) -> dict[str, int]:
    """Multiply-accumulates per sample for each network stage of one head."""
    w = desc.width
    return {
        # first trunk layer plus the skip columns: the only terms touching the position encoding
        "trunk_input": 2 * desc.pos_dim * w,
        "trunk_hidden": (desc.depth - 1) * w * w,
        "density": w,
        "feature": w * w,
        "direction": (w + desc.dir_dim) * (w // 2),
        "color": (w // 2) * 3,
    }


def activation_flops(desc: ArchitectureDescriptor) -> int:
    w = desc.width
    return desc.depth * w + w // 2 + 1 + 3


@dataclass
class FlopReport:
    stage_macs: dict
    per_sample_macs: int
    samples: int
    stage_flops: dict
    mlp_flops: int
    bookkeeping_flops: int
    total_flops: int
    activation_flops: int
    compositing_flops: int
    per_head_samples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def flop_report(desc: ArchitectureDescriptor, n_heads: int, n_rays: int, n_samples: int,
                per_head_samples=None) -> FlopReport:
    """Closed-form frame cost. Hard routing charges one head per sample, so
    the MLP part is independent of ``n_heads``; only the ray/cell clipping
    (``bookkeeping``) grows with it. FLOPs are 2x MACs."""
    macs = stage_macs(desc)
    samples = n_rays * n_samples
    stage_flops = {k: 2 * v * samples for k, v in macs.items()}
    bookkeeping = n_rays * n_heads * (n_heads - 1) * CLIP_FLOPS_PER_PAIR if n_heads > 1 else 0
    stage_flops["segment_bookkeeping"] = bookkeeping
    mlp = sum(v for k, v in stage_flops.items() if k != "segment_bookkeeping")
    return FlopReport(
        stage_macs=macs,
        per_sample_macs=sum(macs.values()),
        samples=samples,
        stage_flops=stage_flops,
        mlp_flops=mlp,
        bookkeeping_flops=bookkeeping,
        total_flops=sum(stage_flops.values()),
        activation_flops=activation_flops(desc) * samples,
        compositing_flops=COMPOSITE_FLOPS_PER_SAMPLE * samples,
        per_head_samples=list(per_head_samples) if per_head_samples is not None else [],
    )


def thread_info() -> dict:
    info = {"cpu_count": os.cpu_count(), "python": platform.python_version(), "numpy": np.__version__,
            "machine": platform.machine()}
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        info[var] = os.environ.get(var)
    try:
        from threadpoolctl import threadpool_info
        info["blas_threads"] = [p.get("num_threads") for p in threadpool_info()]
    except ImportError:
        info["blas_threads"] = None
    return info


@dataclass
class TimingResult:
    median: float
    times: list
    path: str
    stats: dict = field(default_factory=dict)


def time_render(m, camera, n_samples: int, path: str = "monolithic", repeats: int = 3,
                warmup: int = 1, seed: int = 0, threads: int | None = None) -> TimingResult:
    """Median wall time of ``repeats`` renders after ``warmup`` discarded ones.

    ``threads`` caps BLAS threads for the measurement (needs threadpoolctl).
    """
    from .render import painter_render_image, render_image

    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if threads is not None:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads):
            res = time_render(m, camera, n_samples, path, repeats, warmup, seed)
        res.stats["threads"] = threads
        return res
    stats = {}

    def run():
        nonlocal stats
        if path == "painter":
            _, stats = painter_render_image(m, camera, n_samples, seed=seed, return_stats=True)
        elif path == "monolithic":
            render_image(m, camera, n_samples, seed=seed, mode="hard")
        else:
            raise ValueError(f"unknown render path {path!r}")

    for _ in range(warmup):
        run()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return TimingResult(statistics.median(times), times, path, stats)


def _check_pair(img, ref):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {ref.shape}")
    return img, ref


def psnr(img, ref) -> float:
    """Peak signal-to-noise ratio for unit dynamic range; ``inf`` for identical images."""
    img, ref = _check_pair(img, ref)
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(img, ref, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean Gaussian-windowed SSIM over valid windows of the channel-mean images."""
    img, ref = _check_pair(img, ref)
    if img.ndim == 3:
        img, ref = img.mean(axis=-1), ref.mean(axis=-1)
    if min(img.shape) < win_size:
        raise ValueError(f"image {img.shape} smaller than the {win_size}x{win_size} SSIM window")
    win = _gaussian_window(win_size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2

    def filt(a):
        return convolve2d(a, win, mode="valid")

    mu_x, mu_y = filt(img), filt(ref)
    var_x = filt(img * img) - mu_x ** 2
    var_y = filt(ref * ref) - mu_y ** 2
    cov = filt(img * ref) - mu_x * mu_y
    s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(s.mean())


@dataclass
class QualityReport:
    psnr: float
    ssim: float


def quality(img, ref) -> QualityReport:
    """PSNR and SSIM; SSIM is NaN when the image is smaller than its window."""
    img, ref = _check_pair(img, ref)
    s = ssim(img, ref) if min(img.shape[:2]) >= 11 else float("nan")
    return QualityReport(psnr(img, ref), s)


def evaluate(m, dataset, n_samples: int, seed: int = 0, indices=None, path: str = "monolithic") -> list:
    """Quality of ``m`` on held-out frames (every 8th by default)."""
    from .render import painter_render_image, render_image

    reports = []
    for i in (dataset.test_indices if indices is None else indices):
        cam = dataset.camera(i)
        if path == "painter":
            img = painter_render_image(m, cam, n_samples, seed=seed, background=dataset.background)
        else:
            img = render_image(m, cam, n_samples, seed=seed, mode="hard", background=dataset.background)
        reports.append(quality(np.clip(img, 0.0, 1.0), dataset.images[i]))
    return reports
