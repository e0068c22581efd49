"""Learnable Voronoi partition of the normalized scene.

Soft weights are a softmax over negative scaled site distances; as the
temperature ``beta`` grows they converge to the indicator of the nearest
site. Everything here is vectorized over query points; single-point calls
return 1-D results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Ray

DIST_EPS = 1e-8
MIN_SITE_SEPARATION = 1e-6


@dataclass
class VoronoiDecomposition:
    sites: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        # float32 sites (trainer state) are kept as-is so checkpoints stay bit-exact
        sites = np.array(self.sites).reshape(-1, 3)
        if sites.dtype != np.float32:
            sites = sites.astype(np.float64)
        if len(sites) < 1:
            raise ValueError("a decomposition needs at least one site")
        if not np.all(np.isfinite(sites)):
            raise ValueError("Voronoi sites must be finite")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if len(sites) > 1:
            gaps = np.linalg.norm(sites[:, None, :].astype(np.float64) - sites[None, :, :], axis=-1)
            gaps[np.diag_indices(len(sites))] = np.inf
            if gaps.min() < MIN_SITE_SEPARATION:
                raise ValueError(f"Voronoi sites must be pairwise distinct (min gap {gaps.min():.3g})")
        self.sites = sites
        self.beta = float(self.beta)

    @property
    def n_heads(self) -> int:
        return len(self.sites)


def _distances(x, sites):
    x = np.asarray(x, dtype=np.float64)
    diff = x[..., None, :] - np.asarray(sites, dtype=np.float64)
    return diff, np.maximum(np.linalg.norm(diff, axis=-1), DIST_EPS)


def _softmin(dist, beta):
    # subtracting the smallest distance keeps exp() finite for huge beta
    z = -beta * (dist - dist.min(axis=-1, keepdims=True))
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_weights(x, d: VoronoiDecomposition) -> np.ndarray:
    """Soft Voronoi weights, shape ``(..., N)``; non-negative, summing to one."""
    _, dist = _distances(x, d.sites)
    return _softmin(dist, d.beta)


def soft_weights_grad(x, d: VoronoiDecomposition) -> np.ndarray:
    """Jacobian of the weights at a single point w.r.t. the sites.

    Returns ``J`` of shape ``(N, N, 3)`` with ``J[m, n] = dw_m / dphi_n``.
    Distances are clamped at ``DIST_EPS``; a site coincident with ``x``
    therefore gets a zero gradient block.
    """
    diff, dist = _distances(np.asarray(x, dtype=np.float64).reshape(3), d.sites)
    w = _softmin(dist, d.beta)
    # dw_m/d dist_n = -beta * w_m * (delta_mn - w_n);  d dist_n/d phi_n = (phi_n - x) / dist_n
    dw_ddist = -d.beta * w[:, None] * (np.eye(len(w)) - w[None, :])
    ddist_dphi = -diff / dist[:, None]
    return dw_ddist[:, :, None] * ddist_dphi[None, :, :]


def soft_weights_vjp(x, upstream, d: VoronoiDecomposition) -> np.ndarray:
    """Sum over points of ``upstream . dw/dphi``; returns an ``(N, 3)`` site gradient.

    ``x`` is ``(M, 3)`` and ``upstream`` is ``(M, N)``.
    """
    diff, dist = _distances(np.asarray(x, dtype=np.float64).reshape(-1, 3), d.sites)
    w = _softmin(dist, d.beta)
    g = np.asarray(upstream, dtype=np.float64).reshape(w.shape)
    g_dist = -d.beta * w * (g - np.sum(g * w, axis=-1, keepdims=True))
    return np.einsum("mn,mnk->nk", g_dist / dist, -diff)


def hard_assign(x, d: VoronoiDecomposition) -> np.ndarray | int:
    """Index of the nearest site; ties go to the lowest index."""
    diff = np.asarray(x, dtype=np.float64)[..., None, :] - np.asarray(d.sites, dtype=np.float64)
    idx = np.argmin(np.einsum("...k,...k->...", diff, diff), axis=-1)
    return int(idx) if np.ndim(idx) == 0 else idx


@dataclass(frozen=True)
class BetaSchedule:
    beta0: float = 1.0
    beta_final: float = 1e10
    n_pretrain: int = 1

    def __post_init__(self):
        if not (self.beta0 > 0 and self.beta_final > 0):
            raise ValueError("beta schedule endpoints must be positive")
        if self.n_pretrain < 0:
            raise ValueError("n_pretrain must be non-negative")


def beta_at(iteration: int, schedule: BetaSchedule) -> float:
    """Geometric interpolation from ``beta0`` to ``beta_final``, then constant."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if schedule.n_pretrain == 0:
        return float(schedule.beta_final)
    frac = min(iteration, schedule.n_pretrain) / schedule.n_pretrain
    if frac == 1.0:
        return float(schedule.beta_final)
    return float(schedule.beta0 * (schedule.beta_final / schedule.beta0) ** frac)


@dataclass(frozen=True)
class RaySegment:
    cell: int
    t_in: float
    t_out: float


def cell_intervals(origins, dirs, t_near, t_far, sites) -> tuple[np.ndarray, np.ndarray]:
    """Clip ``R`` rays against every Voronoi cell.

    Directions need not be unit length, which lets callers pass rays mapped
    into the normalized frame. Returns ``(t_in, t_out)``, each ``(R, N)``;
    a cell the ray misses has ``t_in >= t_out``.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dv = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(sites, dtype=np.float64).reshape(-1, 3)
    n = len(s)
    r = len(o)
    t_in = np.broadcast_to(np.asarray(t_near, dtype=np.float64).reshape(-1, 1), (r, n)).copy()
    t_out = np.broadcast_to(np.asarray(t_far, dtype=np.float64).reshape(-1, 1), (r, n)).copy()
    if n == 1:
        return t_in, t_out
    normal = s[None, :, :] - s[:, None, :]           # (n, j): phi_j - phi_n
    mid = 0.5 * (s[None, :, :] + s[:, None, :])
    # cell n keeps (o + t d - m_nj) . v_nj <= 0, i.e. a + t b <= 0
    a = np.einsum("rk,njk->rnj", o, normal) - np.einsum("njk,njk->nj", mid, normal)[None]
    b = np.einsum("rk,njk->rnj", dv, normal)
    with np.errstate(divide="ignore", invalid="ignore"):
        root = -a / b
    off_diag = ~np.eye(n, dtype=bool)[None]
    upper = np.where((b > 0) & off_diag, root, np.inf).min(axis=-1)
    lower = np.where((b < 0) & off_diag, root, -np.inf).max(axis=-1)
    blocked = ((b == 0) & (a > 0) & off_diag).any(axis=-1)
    t_in = np.maximum(t_in, lower)
    t_out = np.minimum(t_out, upper)
    t_out[blocked] = t_in[blocked]
    return t_in, t_out


def ray_cell_intervals(ray: Ray, d: VoronoiDecomposition, transform=None) -> list[RaySegment]:
    """Nonempty per-cell intervals of ``ray``, ordered by entry parameter.

    If ``transform`` is given the ray is in world units and is mapped into
    the sites' normalized frame (``t`` is preserved by an isotropic map).
    """
    o, dv = ray.origin, ray.direction
    if transform is not None:
        o = transform.scale * o + transform.offset
        dv = transform.scale * dv
    t_in, t_out = cell_intervals(o, dv, ray.t_near, ray.t_far, d.sites)
    segs = [RaySegment(n, float(a), float(b)) for n, (a, b) in enumerate(zip(t_in[0], t_out[0])) if b > a]
    return sorted(segs, key=lambda s: (s.t_in, s.cell))


def painter_order(d: VoronoiDecomposition, eye) -> np.ndarray:
    """Back-to-front cell order: decreasing site distance from ``eye``, ties by index."""
    dist = np.linalg.norm(np.asarray(d.sites, dtype=np.float64) - np.asarray(eye, dtype=np.float64), axis=-1)
    # lexsort sorts by the last key first
    return np.lexsort((np.arange(len(dist)), -dist))


def init_sites(mode: str, n, bounds, rng: np.random.Generator | None = None,
               min_separation: float = MIN_SITE_SEPARATION, max_tries: int = 1000) -> np.ndarray:
    """Initial site positions inside an axis-aligned box ``bounds = (lo, hi)``.

    ``grid`` places sites at the cell centers of a regular subdivision, with
    ``n`` either per-axis counts or a perfect cube. ``random`` draws uniformly
    and resamples the whole set while any pair is closer than ``min_separation``.
    """
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
    if np.any(hi <= lo):
        raise ValueError("site bounds must be non-degenerate")
    if mode == "grid":
        if np.ndim(n) == 0:
            side = round(int(n) ** (1 / 3))
            if side ** 3 != int(n):
                raise ValueError(f"grid mode needs a perfect cube head count, got {n}")
            counts = (side,) * 3
        else:
            counts = tuple(int(c) for c in n)
        if len(counts) != 3 or min(counts) < 1:
            raise ValueError(f"invalid grid counts {counts}")
        axes = [lo[k] + (np.arange(c) + 0.5) * (hi[k] - lo[k]) / c for k, c in enumerate(counts)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)
    if mode == "random":
        n = int(n)
        if n < 1:
            raise ValueError("need at least one site")
        if rng is None:
            raise ValueError("random site initialization needs an rng")
        for _ in range(max_tries):
            sites = lo + rng.random((n, 3)) * (hi - lo)
            if n == 1:
                return sites
            gaps = np.linalg.norm(sites[:, None] - sites[None], axis=-1)
            gaps[np.diag_indices(n)] = np.inf
            if gaps.min() >= min_separation:
                return sites
        raise RuntimeError(f"could not place {n} sites {min_separation} apart after {max_tries} tries")
    raise ValueError(f"unknown site initialization mode {mode!r}")
