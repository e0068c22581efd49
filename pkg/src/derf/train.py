"""Two-phase training.

Phase 1 fits a scene-wide coarse head with the photometric loss while the
Voronoi sites follow the uniformity loss (the two never share gradients)
and the temperature anneals to its final value. Phase 2 freezes the sites
and trains the per-cell heads through the hard-routed decomposed field.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .field import AdamState, ArchitectureDescriptor, DerfModel, adam_step, encode_inputs, head_backward, \
    head_forward, init_head
from .geometry import build_normalization, stratified_samples_batch
from .render import composite_batch
from .voronoi import BetaSchedule, VoronoiDecomposition, beta_at, hard_assign, init_sites, soft_weights, \
    soft_weights_vjp

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_rays: int = 512
    n_samples: int = 128
    iters_pretrain: int = 2000
    iters_main: int = 8000
    lr: float = 5e-4
    lr_sites: float = 5e-3
    beta0: float = 1.0
    beta_final: float = 1e10
    seed: int = 0
    n_heads: int = 1
    depth: int = 4
    width: int = 32
    sites: str = "random"
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("batch_rays", "n_samples", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iters_pretrain < 0 or self.iters_main < 0:
            raise ValueError("iteration counts must be non-negative")
        if not (self.lr > 0 and self.lr_sites > 0):
            raise ValueError("learning rates must be positive")
        if self.sites not in ("random", "grid"):
            raise ValueError(f"unknown site initialization {self.sites!r}")
        self.descriptor  # validates depth/width

    @property
    def descriptor(self) -> ArchitectureDescriptor:
        return ArchitectureDescriptor(depth=self.depth, width=self.width)

    @property
    def schedule(self) -> BetaSchedule:
        return BetaSchedule(self.beta0, self.beta_final, self.iters_pretrain)


@dataclass
class TrainState:
    model: DerfModel
    config: TrainConfig
    opt_coarse: AdamState
    opt_sites: AdamState
    opt_heads: AdamState
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)

    @property
    def phase(self) -> int:
        return 1 if self.iteration < self.config.iters_pretrain else 2


def radiance_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(pred) != len(target):
        raise ValueError(f"{len(pred)} predictions for {len(target)} targets")
    if len(pred) == 0:
        raise ValueError("radiance loss needs at least one ray")
    return float(np.mean(np.sum((pred - target) ** 2, axis=-1)))


def uniform_loss(contribs) -> float:
    """Squared norm of the batch-mean head contribution vector."""
    w = np.atleast_2d(np.asarray(contribs, dtype=np.float64))
    if w.shape[0] == 0 or w.size == 0:
        raise ValueError("uniformity loss needs at least one ray")
    mean = w.mean(axis=0)
    return float(mean @ mean)


def composite_backward(weights, trans, sigma, color, delta, background, g_rgb):
    """Gradients of ``rgb = sum_i T_i alpha_i c_i + T_end * bg`` w.r.t. densities and colors.

    ``g_rgb`` is ``dL/drgb`` per ray ``(R, 3)``. Returns ``(dsigma (R, S), dcolor (R, S, 3))``.
    """
    g = np.asarray(g_rgb, dtype=np.float64)
    q = np.einsum("rsk,rk->rs", color, g)
    wq = weights * q
    tau = sigma * delta
    t_end = np.exp(-tau.sum(axis=1))
    # suffix sums strictly after sample i, plus the transmitted background
    after = np.cumsum(wq[:, ::-1], axis=1)[:, ::-1] - wq + (t_end * (g @ np.asarray(background, dtype=np.float64)))[:, None]
    t_next = trans * np.exp(-tau)
    dsigma = delta * (t_next * q - after)
    dcolor = weights[..., None] * g[:, None, :]
    return dsigma, dcolor


def _sample_batch(state: TrainState, batch):
    origins, dirs, targets, near, far = batch
    r = len(origins)
    t, delta = stratified_samples_batch(np.full(r, near), np.full(r, far), state.config.n_samples, state.rng)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    tr = state.model.normalization
    x_norm = (tr.scale * pts + tr.offset).reshape(-1, 3)
    d_rep = np.broadcast_to(dirs[:, None, :], pts.shape).reshape(-1, 3)
    return t, delta, x_norm, d_rep


def _finite_or_raise(iteration, **losses):
    for k, v in losses.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite {k} ({v}) at iteration {iteration}")


def phase1_step(state: TrainState, batch, iteration: int, update_sites: bool = True) -> TrainState:
    """One pre-training step: coarse head on the photometric loss, sites on the uniformity loss."""
    cfg, m = state.config, state.model
    if iteration >= cfg.iters_pretrain:
        raise ValueError(f"phase 1 step requested at iteration {iteration} >= {cfg.iters_pretrain}")
    origins, dirs, targets, near, far, bg = batch
    m.decomposition.beta = beta_at(iteration, cfg.schedule)
    r, s = len(origins), cfg.n_samples
    t, delta, x_norm, d_rep = _sample_batch(state, (origins, dirs, targets, near, far))
    x_enc, d_enc = encode_inputs(m.descriptor, x_norm, d_rep, np.float32)
    out, cache = head_forward(m.coarse, x_enc, d_enc)
    sigma = out.sigma.reshape(r, s).astype(np.float64)
    color = out.color.reshape(r, s, 3).astype(np.float64)
    weights, c, a, trans = composite_batch(sigma, color, delta)
    rgb = c + (1.0 - a)[:, None] * np.asarray(bg)
    l_rad = radiance_loss(rgb, targets)
    # uniformity: density and transmittance are constants w.r.t. the sites
    w_soft = soft_weights(x_norm, m.decomposition)
    contrib = np.einsum("rs,rsn->rn", weights, w_soft.reshape(r, s, -1))
    l_uni = uniform_loss(contrib)
    _finite_or_raise(iteration, l_radiance=l_rad, l_uniform=l_uni)

    g = 2.0 * (rgb - targets) / r
    dsigma, dcolor = composite_backward(weights, trans, sigma, color, delta, bg, g)
    grads = head_backward(m.coarse, cache, dsigma.ravel(), dcolor.reshape(-1, 3))
    adam_step(m.coarse.arrays, grads, state.opt_coarse)
    m.coarse.touch()
    # grid sites are a fixed baseline; only randomly placed sites are learned
    if update_sites and m.n_heads > 1 and cfg.sites != "grid":
        upstream = weights.reshape(-1, 1) * (2.0 * contrib.mean(axis=0) / r)[None, :]
        g_sites = soft_weights_vjp(x_norm, upstream, m.decomposition)
        adam_step({"sites": m.decomposition.sites}, {"sites": g_sites}, state.opt_sites)
    state.history.append((iteration, 1, m.decomposition.beta, l_rad, l_uni))
    return state


def decomposed_loss_and_grads(m: DerfModel, x_enc, d_enc, owner, delta, targets, bg):
    """Radiance loss of the hard-routed field and its gradient for every head parameter."""
    r, s = delta.shape
    sigma = np.empty(r * s)
    color = np.empty((r * s, 3))
    routed = []
    for n in range(m.n_heads):
        sel = np.flatnonzero(owner == n)
        if len(sel) == 0:
            continue
        out, cache = head_forward(m.heads[n], x_enc[sel], d_enc[sel])
        sigma[sel], color[sel] = out.sigma, out.color
        routed.append((n, sel, cache))
    sigma = sigma.reshape(r, s)
    color = color.reshape(r, s, 3)
    weights, c, a, trans = composite_batch(sigma, color, delta)
    rgb = c + (1.0 - a)[:, None] * np.asarray(bg)
    l_rad = radiance_loss(rgb, targets)

    g = 2.0 * (rgb - targets) / r
    dsigma, dcolor = composite_backward(weights, trans, sigma, color, delta, bg, g)
    dsigma, dcolor = dsigma.ravel(), dcolor.reshape(-1, 3)
    grads = {}
    for n, sel, cache in routed:
        for k, v in head_backward(m.heads[n], cache, dsigma[sel], dcolor[sel]).items():
            grads[f"heads.{n}.{k}"] = v
    for k, p in m.head_params().items():
        grads.setdefault(k, np.zeros_like(p))
    return l_rad, grads


def phase2_step(state: TrainState, batch) -> TrainState:
    """One main step: frozen sites, hard-routed heads, shared Adam state."""
    cfg, m = state.config, state.model
    origins, dirs, targets, near, far, bg = batch
    m.decomposition.beta = cfg.beta_final
    t, delta, x_norm, d_rep = _sample_batch(state, (origins, dirs, targets, near, far))
    x_enc, d_enc = encode_inputs(m.descriptor, x_norm, d_rep, np.float32)
    owner = hard_assign(x_norm, m.decomposition) if m.n_heads > 1 else np.zeros(len(x_norm), dtype=int)
    l_rad, grads = decomposed_loss_and_grads(m, x_enc, d_enc, owner, delta, targets, bg)
    _finite_or_raise(state.iteration, l_radiance=l_rad)
    params = m.head_params()
    adam_step(params, {k: grads[k] for k in params}, state.opt_heads)
    for h in m.heads:
        h.touch()
    state.history.append((state.iteration, 2, m.decomposition.beta, l_rad, float("nan")))
    return state


def fit_normalization(dataset):
    pts = [f.transform_matrix[:3, 3] for f in dataset.frames]
    if dataset.bounds is not None:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in dataset.bounds)
        pts += [lo, hi]
    return build_normalization(np.asarray(pts))


def init_state(config: TrainConfig, dataset) -> TrainState:
    """Normalization fit, site placement and independent head initialization."""
    if dataset.images is None or len(dataset.images) == 0:
        raise ValueError("dataset has no images")
    if dataset.images.shape[1:3] != (dataset.height, dataset.width):
        raise ValueError("dataset images do not match declared dimensions")
    ss = np.random.SeedSequence(config.seed)
    init_rng, site_rng, batch_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    tr = fit_normalization(dataset)
    if dataset.bounds is not None:
        lo, hi = (tr.scale * np.asarray(b, dtype=np.float64) + tr.offset for b in dataset.bounds)
    else:
        lo, hi = -np.ones(3), np.ones(3)
    sites = init_sites(config.sites, config.n_heads, (lo, hi), site_rng, min_separation=1e-3)
    beta0 = config.beta0 if config.iters_pretrain > 0 else config.beta_final
    decomposition = VoronoiDecomposition(sites.astype(np.float32), beta0)
    desc = config.descriptor
    coarse = init_head(desc, init_rng)
    heads = [init_head(desc, init_rng) for _ in range(config.n_heads)]
    model = DerfModel(decomposition, heads, coarse, desc, tr)
    return TrainState(model, config, AdamState(config.lr), AdamState(config.lr_sites), AdamState(config.lr),
                      batch_rng)


class RayPool:
    """All training pixels as rays; batches are drawn with the trainer's rng."""

    def __init__(self, dataset, indices=None):
        idx = dataset.train_indices if indices is None else indices
        self.origins, self.dirs, self.rgb = dataset.rays(idx)
        self.near, self.far = dataset.near, dataset.far
        self.background = np.asarray(dataset.background, dtype=np.float64)

    def draw(self, rng: np.random.Generator, n: int):
        i = rng.integers(0, len(self.origins), n)
        return self.origins[i], self.dirs[i], self.rgb[i], self.near, self.far, self.background


def train_steps(state: TrainState, pool: RayPool, n_steps: int | None = None, out_dir=None) -> TrainState:
    """Advance training by ``n_steps`` iterations (default: to completion)."""
    cfg = state.config
    total = cfg.iters_pretrain + cfg.iters_main
    stop = total if n_steps is None else min(total, state.iteration + n_steps)
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = out_dir / "metrics.csv"
        fresh = not metrics.exists() or state.iteration == 0
        fh = open(metrics, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["iter", "phase", "beta", "l_radiance", "l_uniform"])
    try:
        while state.iteration < stop:
            batch = pool.draw(state.rng, cfg.batch_rays)
            if state.iteration < cfg.iters_pretrain:
                phase1_step(state, batch, state.iteration)
                if state.iteration + 1 == cfg.iters_pretrain:
                    state.model.decomposition.beta = cfg.beta_final
            else:
                state.model.decomposition.beta = cfg.beta_final
                phase2_step(state, batch)
            it, phase, beta, l_rad, l_uni = state.history[-1]
            if writer is not None and (it % cfg.log_every == 0 or it + 1 == total):
                writer.writerow([it, phase, repr(beta), repr(l_rad), "" if np.isnan(l_uni) else repr(l_uni)])
            if it % cfg.log_every == 0:
                log.info("iter %d phase %d beta %.3g l_radiance %.5f", it, phase, beta, l_rad)
            state.iteration += 1
            if out_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                from .checkpoint import save_checkpoint
                save_checkpoint(state, out_dir / f"ckpt_{state.iteration:07d}.derf")
    finally:
        if writer is not None:
            fh.close()
    if state.iteration >= cfg.iters_pretrain:
        state.model.decomposition.beta = cfg.beta_final
    return state


def train_run(config: TrainConfig, dataset, out_dir=None, return_state: bool = False):
    """Full pipeline: normalization, site init, phase 1, phase 2. Returns the trained model."""
    state = init_state(config, dataset)
    pool = RayPool(dataset)
    train_steps(state, pool, out_dir=out_dir)
    if out_dir is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(state, Path(out_dir) / "checkpoint.derf")
    return state if return_state else state.model


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
