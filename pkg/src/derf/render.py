"""Volume-rendering quadrature, monolithic and cell-by-cell (Painter's) image
rendering, the closed-form oracle for constant-density scenes, and per-head
ray contributions.

Any object with ``sample(x_world, dirs, mode=..., source=...)`` returning a
:class:`~derf.field.RadianceSample` can be rendered; :class:`DerfModel` and
:class:`~derf.scene.SceneField` both qualify.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import DerfModel, encode_inputs, head_forward
from .geometry import Camera, Ray, camera_ray_arrays, stratified_samples, stratified_samples_batch
from .voronoi import cell_intervals, hard_assign, painter_order, soft_weights

EVAL_CHUNK = 1 << 16


@dataclass
class QuadratureTrace:
    t: np.ndarray | None
    delta: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    color: np.ndarray
    opacity: float


def composite_batch(sigma, color, delta):
    """Front-to-back quadrature for ``R`` rays of ``S`` samples.

    Returns ``(weights, C, A, T)``: per-sample ``T_i * alpha_i`` ``(R, S)``,
    premultiplied color ``(R, 3)``, opacity ``(R,)`` and the exclusive
    transmittance ``(R, S)``.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    tau = sigma * delta
    alpha = -np.expm1(-tau)
    # exclusive cumulative optical depth: T_i = exp(-sum_{j<i} tau_j) = prod_{j<i}(1 - alpha_j)
    cum = np.cumsum(tau, axis=-1)
    trans = np.exp(-(cum - tau))
    weights = trans * alpha
    c = np.einsum("rs,rsk->rk", weights, np.asarray(color, dtype=np.float64))
    opacity = -np.expm1(-cum[..., -1]) if tau.shape[-1] else np.zeros(tau.shape[:-1])
    return weights, c, opacity, trans


def quadrature_compose(sigmas, colors, deltas, t=None) -> QuadratureTrace:
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if not (len(sigmas) == len(deltas) == len(colors)):
        raise ValueError("sigmas, colors and deltas must have equal lengths")
    if np.any(sigmas < 0):
        raise ValueError("densities must be non-negative")
    if np.any(deltas < 0):
        raise ValueError("sample widths must be non-negative")
    if len(sigmas) == 0:
        return QuadratureTrace(t, deltas, np.zeros(0), np.zeros(0), np.zeros(3), 0.0)
    weights, c, a, trans = composite_batch(sigmas[None], colors[None], deltas[None])
    alpha = -np.expm1(-sigmas * deltas)
    return QuadratureTrace(t, deltas, alpha, trans[0], c[0], float(a[0]))


def pixel_jitter(seed: int, n_pixels: int, n_samples: int, start: int = 0) -> np.ndarray:
    """Stratification offsets where pixel ``i`` draws from its own stream ``(seed, i)``."""
    return np.stack([np.random.default_rng((seed, i)).random(n_samples)
                     for i in range(start, start + n_pixels)]) if n_pixels else np.zeros((0, n_samples))


def _to_normalized(field, origins, dirs):
    tr = getattr(field, "normalization", None)
    if tr is None:
        return origins, dirs
    return tr.scale * origins + tr.offset, tr.scale * dirs


def render_rays(field, origins, dirs, t_near, t_far, n_samples: int, rng=None, jitter=None,
                mode: str = "hard", background=(0.0, 0.0, 0.0), source: str = "heads"):
    """Monolithic render of a ray batch; returns ``(rgb, C, A)``."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    r = len(origins)
    t_near = np.broadcast_to(t_near, (r,))
    t_far = np.broadcast_to(t_far, (r,))
    t, delta = stratified_samples_batch(t_near, t_far, n_samples, rng, jitter)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    d_rep = np.broadcast_to(dirs[:, None, :], pts.shape)
    out = field.sample(pts.reshape(-1, 3), d_rep.reshape(-1, 3), mode=mode, source=source)
    _, c, a, _ = composite_batch(out.sigma.reshape(r, n_samples), out.color.reshape(r, n_samples, 3), delta)
    rgb = c + (1.0 - a)[:, None] * np.asarray(background, dtype=np.float64)
    return rgb, c, a


def render_ray(field, ray: Ray, n_samples: int, rng: np.random.Generator, mode: str = "hard",
               background=(0.0, 0.0, 0.0)) -> np.ndarray:
    # same draw as stratified_samples(ray, n_samples, rng)
    rgb, _, _ = render_rays(field, ray.origin, ray.direction, ray.t_near, ray.t_far, n_samples,
                            rng=rng, mode=mode, background=background)
    return rgb[0]


def render_image(field, camera: Camera, n_samples: int, seed: int = 0, mode: str = "hard",
                 background=(0.0, 0.0, 0.0), chunk: int = 1024) -> np.ndarray:
    """Monolithic image render, float ``(H, W, 3)``; pixel ``i`` samples with stream ``(seed, i)``."""
    origins, dirs = camera_ray_arrays(camera)
    out = np.empty((len(origins), 3))
    for s in range(0, len(origins), chunk):
        e = min(s + chunk, len(origins))
        jit = pixel_jitter(seed, e - s, n_samples, start=s)
        out[s:e], _, _ = render_rays(field, origins[s:e], dirs[s:e], camera.near, camera.far, n_samples,
                                     jitter=jit, mode=mode, background=background)
    return out.reshape(camera.height, camera.width, 3)


@dataclass
class SegmentRender:
    color: np.ndarray
    opacity: float
    cell: int = 0


def render_segment(head, ray: Ray, t, delta, descriptor=None, normalization=None, cell: int = 0) -> SegmentRender:
    """Quadrature restricted to one cell's samples, starting from full transmittance."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if len(t) == 0:
        return SegmentRender(np.zeros(3), 0.0, cell)
    pts = ray.at(t)
    if normalization is not None:
        pts = normalization.scale * pts + normalization.offset
    desc = descriptor or head.descriptor
    x_enc, d_enc = encode_inputs(desc, pts, np.broadcast_to(ray.direction, pts.shape), head["color.b"].dtype)
    out, _ = head_forward(head, x_enc, d_enc)
    trace = quadrature_compose(out.sigma, out.color, delta)
    return SegmentRender(trace.color, trace.opacity, cell)


def composite_segments(segments) -> tuple[np.ndarray, float]:
    """Premultiplied front-to-back over: ``C = sum_k prod_{j<k}(1 - A_j) C_k``."""
    color = np.zeros(3)
    trans = 1.0
    for seg in segments:
        color = color + trans * np.asarray(seg.color, dtype=np.float64)
        trans *= 1.0 - seg.opacity
    return color, 1.0 - trans


def _sample_owner(t, t_in, t_out, fallback):
    inside = (t[:, :, None] >= t_in[:, None, :]) & (t[:, :, None] < t_out[:, None, :])
    owner = np.argmax(inside, axis=-1)
    missing = ~inside.any(axis=-1)
    if missing.any():
        owner[missing] = fallback(missing)
    return owner


def painter_render_image(m: DerfModel, camera: Camera, n_samples: int, seed: int = 0,
                         background=(0.0, 0.0, 0.0), order=None, return_stats: bool = False):
    """Cell-by-cell render composited back-to-front with the over operator.

    Global stratified samples (the same ones :func:`render_image` uses for a
    given ``seed``) are bucketed by the Voronoi interval containing them. Each
    cell is then rendered as a premultiplied RGBA layer using only its own
    head, and layers are laid over a background-filled buffer in
    ``painter_order`` (``order`` overrides it, e.g. for negative controls).
    """
    origins, dirs = camera_ray_arrays(camera)
    r = len(origins)
    jitter = pixel_jitter(seed, r, n_samples)
    t, delta = stratified_samples_batch(np.full(r, camera.near), np.full(r, camera.far), n_samples, jitter=jitter)
    n_orig, n_dirs = _to_normalized(m, origins, dirs)
    t_in, t_out = cell_intervals(n_orig, n_dirs, camera.near, camera.far, m.decomposition.sites)

    def fallback(mask):
        pts = n_orig[:, None, :] + t[..., None] * n_dirs[:, None, :]
        return hard_assign(pts[mask], m.decomposition)

    owner = _sample_owner(t, t_in, t_out, fallback)
    eye = m.normalization.scale * camera.position + m.normalization.offset
    if order is None:
        order = painter_order(m.decomposition, eye)
    acc = np.broadcast_to(np.asarray(background, dtype=np.float64), (r, 3)).copy()
    stats = {"cells": [], "order": [int(n) for n in order]}
    for n in order:
        sel = owner == n
        rows = np.flatnonzero(sel.any(axis=1))
        stats["cells"].append({"cell": int(n), "rays": int(len(rows)), "samples": int(sel.sum())})
        if len(rows) == 0:
            continue
        sub = sel[rows]
        pts = n_orig[rows, None, :] + t[rows, :, None] * n_dirs[rows, None, :]
        pts = pts[sub]
        d = np.broadcast_to(dirs[rows, None, :], (len(rows), n_samples, 3))[sub]
        sigma = np.zeros((len(rows), n_samples))
        color = np.zeros((len(rows), n_samples, 3))
        sig_flat, col_flat = _eval_head(m, m.heads[n], pts, d)
        sigma[sub] = sig_flat
        color[sub] = col_flat
        _, layer_c, layer_a, _ = composite_batch(sigma, color, delta[rows])
        acc[rows] = layer_c + (1.0 - layer_a)[:, None] * acc[rows]
    img = acc.reshape(camera.height, camera.width, 3)
    return (img, stats) if return_stats else img


def _eval_head(m, head, pts_norm, dirs):
    sig = np.empty(len(pts_norm))
    col = np.empty((len(pts_norm), 3))
    for s in range(0, len(pts_norm), EVAL_CHUNK):
        e = s + EVAL_CHUNK
        x_enc, d_enc = encode_inputs(m.descriptor, pts_norm[s:e], dirs[s:e], head["color.b"].dtype)
        out, _ = head_forward(head, x_enc, d_enc)
        sig[s:e], col[s:e] = out.sigma, out.color
    return sig, col


def analytic_render_rays(scene, origins, dirs, t_near, t_far, background=None) -> np.ndarray:
    """Exact render of constant-density primitives.

    The ray is split at every primitive boundary into homogeneous intervals;
    an interval with total density ``s`` and length ``L`` adds
    ``c * T * (1 - exp(-s L))`` where ``c`` is the density-weighted mean
    emission of the overlapping primitives.
    """
    from .scene import primitive_hits, primitive_emission

    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    r = len(origins)
    bg = np.asarray(scene.background if background is None else background, dtype=np.float64)
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (r,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (r,))
    if not scene.primitives:
        return np.broadcast_to(bg, (r, 3)).copy()
    enters, exits, emits = [], [], []
    for prim in scene.primitives:
        t0, t1 = primitive_hits(prim, origins, dirs)
        enters.append(np.clip(t0, t_near, t_far))
        exits.append(np.clip(t1, t_near, t_far))
        emits.append(primitive_emission(prim, dirs))
    enters, exits = np.stack(enters, 1), np.stack(exits, 1)       # (R, P)
    emits = np.stack(emits, 1)                                     # (R, P, 3)
    sig = np.array([p.sigma for p in scene.primitives], dtype=np.float64)
    bounds = np.sort(np.concatenate([t_near[:, None], enters, exits, t_far[:, None]], axis=1), axis=1)
    lo, hi = bounds[:, :-1], bounds[:, 1:]
    mid = 0.5 * (lo + hi)
    inside = (mid[..., None] > enters[:, None, :]) & (mid[..., None] < exits[:, None, :])  # (R, K, P)
    dens = inside * sig
    total = dens.sum(-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        col = np.einsum("rkp,rpc->rkc", dens, emits) / total[..., None]
    col = np.nan_to_num(col)
    tau = total * (hi - lo)
    trans_in = np.exp(-(np.cumsum(tau, axis=1) - tau))
    c = np.einsum("rk,rkc->rc", trans_in * -np.expm1(-tau), col)
    return c + np.exp(-tau.sum(axis=1))[:, None] * bg


def analytic_render_ray(scene, ray: Ray, background=None) -> np.ndarray:
    return analytic_render_rays(scene, ray.origin, ray.direction, ray.t_near, ray.t_far, background)[0]


def head_contributions(m: DerfModel, origins, dirs, t, delta, source: str = "coarse"):
    """Per-ray head contributions ``W_n = sum_i T_i alpha_i w_n(x_i)``.

    Density and transmittance come from ``source`` (``coarse`` or the
    hard-routed ``heads``). Returns ``(W (R, N), weights (R, S), x_norm (R, S, 3))``;
    the last two let the trainer push gradients into the sites.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    r, s = t.shape
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    out = m.sample(pts.reshape(-1, 3), np.broadcast_to(dirs[:, None], pts.shape).reshape(-1, 3),
                   mode="hard", source=source)
    weights, _, _, _ = composite_batch(out.sigma.reshape(r, s), out.color.reshape(r, s, 3), delta)
    x_norm = m.normalization.scale * pts + m.normalization.offset
    w = soft_weights(x_norm.reshape(-1, 3), m.decomposition).reshape(r, s, -1)
    return np.einsum("rs,rsn->rn", weights, w), weights, x_norm


def head_contribution(m: DerfModel, ray: Ray, n_samples: int, rng: np.random.Generator,
                      source: str = "coarse") -> np.ndarray:
    t, delta = stratified_samples(ray, n_samples, rng)
    contrib, _, _ = head_contributions(m, ray.origin, ray.direction, t[None], delta[None], source)
    return contrib[0]
