"""Radiance heads: encoding, a small NeRF-shaped MLP with hand-written
backward pass, Adam, and the decomposed (Voronoi-weighted) field."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import count

import numpy as np
from scipy.special import expit

from .geometry import NormalizationTransform
from .voronoi import VoronoiDecomposition, hard_assign, soft_weights


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Head shape. ``skip_layer`` is 1-based: trunk layer ``skip_layer`` also
    receives the encoded position concatenated to its input."""

    depth: int = 4
    width: int = 32
    skip_layer: int | None = None
    pos_bands: int = 10
    dir_bands: int = 4

    def __post_init__(self):
        if self.skip_layer is None:
            object.__setattr__(self, "skip_layer", math.ceil(self.depth / 2) + 1)
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.width < 4 or self.width % 2:
            raise ValueError("width must be an even number >= 4")
        if not 1 < self.skip_layer <= self.depth:
            raise ValueError(f"skip_layer must lie in (1, depth], got {self.skip_layer}")
        if self.pos_bands < 0 or self.dir_bands < 0:
            raise ValueError("band counts must be non-negative")

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.pos_bands

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.dir_bands

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """Weight shapes ``(fan_in, fan_out)`` in canonical parameter order."""
        w = self.width
        shapes = {}
        for k in range(1, self.depth + 1):
            fan_in = self.pos_dim if k == 1 else w + (self.pos_dim if k == self.skip_layer else 0)
            shapes[f"trunk{k}"] = (fan_in, w)
        shapes["density"] = (w, 1)
        shapes["feature"] = (w, w)
        shapes["direction"] = (w + self.dir_dim, w // 2)
        shapes["color"] = (w // 2, 3)
        return shapes

    def to_dict(self) -> dict:
        return {"depth": self.depth, "width": self.width, "skip_layer": self.skip_layer,
                "pos_bands": self.pos_bands, "dir_bands": self.dir_bands}


_versions = count(1)


class HeadParams:
    """Weights ``<layer>.w`` (fan_in x fan_out) and biases ``<layer>.b`` of one head.

    ``version`` changes on every in-place update so that activation caches
    from an older forward pass can be rejected.
    """

    def __init__(self, descriptor: ArchitectureDescriptor, arrays: dict[str, np.ndarray]):
        self.descriptor = descriptor
        expected = {}
        for name, (fi, fo) in descriptor.layer_shapes().items():
            expected[f"{name}.w"] = (fi, fo)
            expected[f"{name}.b"] = (fo,)
        if list(arrays) != list(expected):
            raise ValueError(f"parameter names {list(arrays)} do not match descriptor")
        for k, shape in expected.items():
            if arrays[k].shape != shape:
                raise ValueError(f"{k}: shape {arrays[k].shape}, expected {shape}")
            if not np.all(np.isfinite(arrays[k])):
                raise ValueError(f"{k}: non-finite entries")
        self.arrays = arrays
        self.version = next(_versions)

    def __getitem__(self, key):
        return self.arrays[key]

    def touch(self):
        self.version = next(_versions)

    def astype(self, dtype) -> "HeadParams":
        return HeadParams(self.descriptor, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "HeadParams":
        return HeadParams(self.descriptor, {k: v.copy() for k, v in self.arrays.items()})


def init_head(descriptor: ArchitectureDescriptor, rng: np.random.Generator, dtype=np.float32) -> HeadParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    arrays = {}
    for name, (fi, fo) in descriptor.layer_shapes().items():
        bound = math.sqrt(6.0 / fi)
        arrays[f"{name}.w"] = rng.uniform(-bound, bound, size=(fi, fo)).astype(dtype)
        arrays[f"{name}.b"] = np.zeros(fo, dtype=dtype)
    return HeadParams(descriptor, arrays)


def zero_head(descriptor: ArchitectureDescriptor, dtype=np.float32) -> HeadParams:
    return HeadParams(descriptor, {
        k: np.zeros(s, dtype=dtype)
        for name, (fi, fo) in descriptor.layer_shapes().items()
        for k, s in ((f"{name}.w", (fi, fo)), (f"{name}.b", (fo,)))
    })


def positional_encode(v, bands: int) -> np.ndarray:
    """``[v, sin(2^k pi v), cos(2^k pi v) for k < bands]``, shape ``(..., 3 + 6 * bands)``."""
    if bands < 0:
        raise ValueError("bands must be non-negative")
    v = np.asarray(v)
    if bands == 0:
        return v.copy()
    freqs = (2.0 ** np.arange(bands)) * np.pi
    arg = v[..., None, :] * freqs[:, None].astype(v.dtype)
    parts = np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)  # (..., bands, 6)
    return np.concatenate([v, parts.reshape(*v.shape[:-1], 6 * bands)], axis=-1)


def _flush(a):
    """Zero values below sqrt(tiny) so downstream products cannot go subnormal.

    Subnormal operands make float32 matmuls many times slower. Gradients this
    small are far below Adam's eps and never affect an update.
    """
    a[np.abs(a) < np.sqrt(np.finfo(a.dtype).tiny)] = 0
    return a


def _matmul(a, w):
    # single choke point for every dense product; FLOP instrumentation patches it
    return a @ w


@dataclass
class RadianceSample:
    sigma: np.ndarray
    color: np.ndarray


@dataclass
class ForwardCache:
    params_id: int
    version: int
    x_enc: np.ndarray
    d_enc: np.ndarray
    layer_inputs: list = field(default_factory=list)
    relu_masks: list = field(default_factory=list)
    h: np.ndarray | None = None
    sigma_pre: np.ndarray | None = None
    feat: np.ndarray | None = None
    dir_hidden: np.ndarray | None = None
    dir_mask: np.ndarray | None = None
    color: np.ndarray | None = None


def head_forward(p: HeadParams, x_enc, d_enc) -> tuple[RadianceSample, ForwardCache]:
    """Evaluate one head on ``(M, pos_dim)`` / ``(M, dir_dim)`` encodings."""
    desc = p.descriptor
    x_enc = np.atleast_2d(x_enc)
    d_enc = np.atleast_2d(d_enc)
    if x_enc.shape[-1] != desc.pos_dim or d_enc.shape[-1] != desc.dir_dim:
        raise ValueError(f"encoding widths {x_enc.shape[-1]}/{d_enc.shape[-1]} do not match "
                         f"descriptor {desc.pos_dim}/{desc.dir_dim}")
    cache = ForwardCache(id(p), p.version, x_enc, d_enc)
    h = x_enc
    for k in range(1, desc.depth + 1):
        w, b = p[f"trunk{k}.w"], p[f"trunk{k}.b"]
        cache.layer_inputs.append(h)
        if k > 1 and k == desc.skip_layer:
            z = _matmul(x_enc, w[:desc.pos_dim]) + _matmul(h, w[desc.pos_dim:]) + b
        else:
            z = _matmul(h, w) + b
        mask = z > 0
        h = z * mask
        cache.relu_masks.append(mask)
    cache.h = h
    sigma_pre = (_matmul(h, p["density.w"]) + p["density.b"])[:, 0]
    feat = _matmul(h, p["feature.w"]) + p["feature.b"]
    wd = p["direction.w"]
    zd = _matmul(feat, wd[:desc.width]) + _matmul(d_enc, wd[desc.width:]) + p["direction.b"]
    dmask = zd > 0
    hd = zd * dmask
    color = expit(_matmul(hd, p["color.w"]) + p["color.b"])
    cache.sigma_pre, cache.feat, cache.dir_hidden, cache.dir_mask, cache.color = sigma_pre, feat, hd, dmask, color
    return RadianceSample(np.logaddexp(0, sigma_pre), color), cache


def head_backward(p: HeadParams, cache: ForwardCache, dsigma, dcolor,
                  input_grads: bool = False):
    """Reverse pass of :func:`head_forward`.

    Returns a gradient dict keyed like ``p.arrays``; with ``input_grads`` also
    returns ``(d x_enc, d d_enc)``.
    """
    if cache.params_id != id(p) or cache.version != p.version:
        raise ValueError("stale activation cache: parameters changed since the forward pass")
    desc = p.descriptor
    # upstream gradients behind opaque surfaces underflow when cast down
    dsigma = _flush(np.array(dsigma, dtype=cache.color.dtype).reshape(-1))
    dcolor = _flush(np.array(dcolor, dtype=cache.color.dtype).reshape(-1, 3))
    grads = {}
    # color head: sigmoid' = c (1 - c)
    dz_col = _flush(dcolor * cache.color * (1 - cache.color))
    grads["color.w"] = cache.dir_hidden.T @ dz_col
    grads["color.b"] = dz_col.sum(axis=0)
    dzd = (dz_col @ p["color.w"].T) * cache.dir_mask
    dir_in_w = p["direction.w"]
    grads["direction.w"] = np.concatenate([cache.feat.T @ dzd, cache.d_enc.T @ dzd], axis=0)
    grads["direction.b"] = dzd.sum(axis=0)
    dfeat = dzd @ dir_in_w[:desc.width].T
    grads["feature.w"] = cache.h.T @ dfeat
    grads["feature.b"] = dfeat.sum(axis=0)
    # softplus' = sigmoid
    dz_sig = _flush(dsigma * expit(cache.sigma_pre))[:, None]
    grads["density.w"] = cache.h.T @ dz_sig
    grads["density.b"] = dz_sig.sum(axis=0)
    dh = dfeat @ p["feature.w"].T + dz_sig @ p["density.w"].T
    dx_enc = np.zeros_like(cache.x_enc) if input_grads else None
    for k in range(desc.depth, 0, -1):
        dz = dh * cache.relu_masks[k - 1]
        inp = cache.layer_inputs[k - 1]
        w = p[f"trunk{k}.w"]
        grads[f"trunk{k}.b"] = dz.sum(axis=0)
        if k > 1 and k == desc.skip_layer:
            grads[f"trunk{k}.w"] = np.concatenate([cache.x_enc.T @ dz, inp.T @ dz], axis=0)
            if input_grads:
                dx_enc += dz @ w[:desc.pos_dim].T
            dh = dz @ w[desc.pos_dim:].T
        else:
            grads[f"trunk{k}.w"] = inp.T @ dz
            if k == 1:
                if input_grads:
                    dx_enc += dz @ w.T
            else:
                dh = dz @ w.T
    grads = {k: grads[k] for k in p.arrays}
    if input_grads:
        dd_enc = dzd @ dir_in_w[desc.width:].T
        return grads, (dx_enc, dd_enc)
    return grads


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict:
    """Bias-corrected Adam update applied to ``params`` in place.

    Moment buffers are created lazily, one per parameter path, with the
    parameter's dtype.
    """
    for path, g in grads.items():
        if path not in params:
            raise KeyError(f"gradient for unknown parameter {path!r}")
        if g.shape != params[path].shape:
            raise ValueError(f"{path}: gradient shape {g.shape} != parameter shape {params[path].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {path!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for path, g in grads.items():
        p = params[path]
        if path not in state.m:
            state.m[path] = np.zeros_like(p)
            state.v[path] = np.zeros_like(p)
        m, v = state.m[path], state.v[path]
        g = g.astype(p.dtype, copy=False)
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


def encode_inputs(desc: ArchitectureDescriptor, x_norm, dirs, dtype=np.float32):
    return (positional_encode(np.asarray(x_norm, dtype=dtype), desc.pos_bands),
            positional_encode(np.asarray(dirs, dtype=dtype), desc.dir_bands))


@dataclass
class DerfModel:
    decomposition: VoronoiDecomposition
    heads: list[HeadParams]
    coarse: HeadParams
    descriptor: ArchitectureDescriptor
    normalization: NormalizationTransform = field(default_factory=NormalizationTransform.identity)

    def __post_init__(self):
        if len(self.heads) != self.decomposition.n_heads:
            raise ValueError(f"{len(self.heads)} heads for {self.decomposition.n_heads} Voronoi sites")

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    def head_params(self) -> dict[str, np.ndarray]:
        """Flat view of every head's arrays, keyed ``heads.<n>.<layer>.<w|b>``."""
        return {f"heads.{n}.{k}": a for n, h in enumerate(self.heads) for k, a in h.arrays.items()}

    def sample(self, x_world, dirs, mode: str = "hard", source: str = "heads") -> RadianceSample:
        """Field query at world-space points (density per world unit)."""
        x = self.normalization.scale * np.asarray(x_world, dtype=np.float64) + self.normalization.offset
        if source == "coarse":
            x_enc, d_enc = encode_inputs(self.descriptor, x, dirs, self.coarse["color.b"].dtype)
            return head_forward(self.coarse, x_enc, d_enc)[0]
        return derf_eval(self, x, dirs, mode)


def derf_eval(m: DerfModel, x, d, mode: str = "soft", weights=None) -> RadianceSample:
    """Decomposed field at normalized points ``x`` with view directions ``d``.

    ``soft`` mixes every head with the soft Voronoi weights (or with explicit
    ``weights`` of shape ``(M, N)``); ``hard`` evaluates only the nearest-site
    head for each point.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    dtype = m.heads[0]["color.b"].dtype
    x_enc, d_enc = encode_inputs(m.descriptor, x, d, dtype)
    if mode == "hard":
        owner = hard_assign(x, m.decomposition)
        sigma = np.zeros(len(x), dtype=dtype)
        color = np.zeros((len(x), 3), dtype=dtype)
        for n in np.unique(owner):
            sel = owner == n
            out, _ = head_forward(m.heads[n], x_enc[sel], d_enc[sel])
            sigma[sel], color[sel] = out.sigma, out.color
        return RadianceSample(sigma, color)
    if mode != "soft":
        raise ValueError(f"unknown evaluation mode {mode!r}")
    w = soft_weights(x, m.decomposition) if weights is None else np.atleast_2d(weights)
    sigma = np.zeros(len(x))
    color = np.zeros((len(x), 3))
    for n, head in enumerate(m.heads):
        out, _ = head_forward(head, x_enc, d_enc)
        sigma += w[:, n] * out.sigma
        color += w[:, n, None] * out.color
    return RadianceSample(sigma, color)
