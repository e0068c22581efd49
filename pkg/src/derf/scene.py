"""Synthetic scenes made of constant-density spheres and boxes.

These stand in for captured data: the analytic renderer in
:mod:`derf.render` integrates them exactly, so training targets carry no
quadrature error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Tint:
    axis: tuple
    strength: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("tint strength must lie in [0, 1]")
        object.__setattr__(self, "axis", tuple(axis.tolist()))


@dataclass(frozen=True)
class Primitive:
    """``shape`` is ``"sphere"`` (``center``, ``radius``) or ``"box"`` (``lo``, ``hi``)."""

    shape: str
    sigma: float
    color: tuple
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    lo: tuple = (0.0, 0.0, 0.0)
    hi: tuple = (0.0, 0.0, 0.0)
    tint: Tint | None = None

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if self.sigma < 0:
            raise ValueError("primitive density must be non-negative")
        if any(not 0.0 <= c <= 1.0 for c in self.color) or len(self.color) != 3:
            raise ValueError("primitive color must be RGB in [0, 1]")
        if self.shape == "sphere" and not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        if self.shape == "box" and any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("box must have hi > lo on every axis")

    def to_dict(self) -> dict:
        d = {"sigma": self.sigma, "color": list(self.color)}
        if self.shape == "sphere":
            d["shape"] = {"sphere": {"center": list(self.center), "radius": self.radius}}
        else:
            d["shape"] = {"box": {"min": list(self.lo), "max": list(self.hi)}}
        if self.tint is not None:
            d["tint"] = {"axis": list(self.tint.axis), "strength": self.tint.strength}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        tint = Tint(tuple(d["tint"]["axis"]), d["tint"]["strength"]) if d.get("tint") else None
        shape = d["shape"]
        if "sphere" in shape:
            s = shape["sphere"]
            return cls("sphere", d["sigma"], tuple(d["color"]), center=tuple(s["center"]),
                       radius=s["radius"], tint=tint)
        b = shape["box"]
        return cls("box", d["sigma"], tuple(d["color"]), lo=tuple(b["min"]), hi=tuple(b["max"]), tint=tint)


def sphere(center, radius, sigma, color, tint=None) -> Primitive:
    return Primitive("sphere", float(sigma), tuple(map(float, color)), center=tuple(map(float, center)),
                     radius=float(radius), tint=tint)


def box(lo, hi, sigma, color, tint=None) -> Primitive:
    return Primitive("box", float(sigma), tuple(map(float, color)), lo=tuple(map(float, lo)),
                     hi=tuple(map(float, hi)), tint=tint)


@dataclass
class SceneDescription:
    primitives: list[Primitive] = field(default_factory=list)
    background: tuple = (0.0, 0.0, 0.0)
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    near: float = 2.0
    far: float = 6.0

    def __post_init__(self):
        if not self.far > self.near:
            raise ValueError("scene far must exceed near")
        if any(not 0.0 <= c <= 1.0 for c in self.background):
            raise ValueError("background must be RGB in [0, 1]")

    def to_dict(self) -> dict:
        return {"primitives": [p.to_dict() for p in self.primitives],
                "background": list(self.background),
                "bounds": {"min": list(self.bounds[0]), "max": list(self.bounds[1])},
                "near": self.near, "far": self.far}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDescription":
        b = d.get("bounds", {"min": [-1, -1, -1], "max": [1, 1, 1]})
        return cls([Primitive.from_dict(p) for p in d.get("primitives", [])],
                   tuple(d.get("background", (0, 0, 0))),
                   (tuple(b["min"]), tuple(b["max"])), d.get("near", 2.0), d.get("far", 6.0))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "SceneDescription":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def primitive_hits(prim: Primitive, origins, dirs) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit parameters of each ray; misses give ``(inf, inf)``."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    if prim.shape == "sphere":
        oc = o - np.asarray(prim.center)
        a = np.einsum("rk,rk->r", d, d)
        b = np.einsum("rk,rk->r", d, oc)
        c = np.einsum("rk,rk->r", oc, oc) - prim.radius ** 2
        disc = b * b - a * c
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t0 = np.where(hit, (-b - root) / a, np.inf)
        t1 = np.where(hit, (-b + root) / a, np.inf)
        return t0, t1
    lo, hi = np.asarray(prim.lo), np.asarray(prim.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    parallel = d == 0
    inside = (o > lo) & (o < hi)
    ta = np.where(parallel, np.where(inside, -np.inf, np.inf), ta)
    tb = np.where(parallel, np.inf, tb)
    t0 = np.minimum(ta, tb).max(axis=1)
    t1 = np.maximum(ta, tb).min(axis=1)
    miss = t1 <= t0
    return np.where(miss, np.inf, t0), np.where(miss, np.inf, t1)


def primitive_emission(prim: Primitive, dirs) -> np.ndarray:
    """Per-ray emitted color; a tint scales it by a factor in [0.5, 1] that
    depends only on the ray direction, so it is constant along the ray."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    color = np.broadcast_to(np.asarray(prim.color, dtype=np.float64), d.shape)
    if prim.tint is None:
        return color.copy()
    s = prim.tint.strength
    facing = np.clip(d @ np.asarray(prim.tint.axis), 0.0, 1.0)
    return color * (0.5 + 0.5 * facing * s + 0.5 * (1.0 - s))[:, None]


def primitive_contains(prim: Primitive, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if prim.shape == "sphere":
        return np.sum((x - np.asarray(prim.center)) ** 2, axis=-1) < prim.radius ** 2
    return np.all((x > np.asarray(prim.lo)) & (x < np.asarray(prim.hi)), axis=-1)


class SceneField:
    """Point-sampled view of a scene, renderable with :func:`derf.render.render_rays`."""

    normalization = None

    def __init__(self, scene: SceneDescription):
        self.scene = scene

    def sample(self, x_world, dirs, mode: str = "hard", source: str = "heads"):
        from .field import RadianceSample

        x = np.asarray(x_world, dtype=np.float64).reshape(-1, 3)
        sigma = np.zeros(len(x))
        weighted = np.zeros((len(x), 3))
        for prim in self.scene.primitives:
            s = prim.sigma * primitive_contains(prim, x)
            sigma += s
            weighted += s[:, None] * primitive_emission(prim, dirs)
        with np.errstate(invalid="ignore", divide="ignore"):
            color = np.where(sigma[:, None] > 0, weighted / sigma[:, None], 0.0)
        return RadianceSample(sigma, color)


def three_blob_scene() -> SceneDescription:
    """Asymmetric scene: three differently sized, colored and tinted blobs."""
    return SceneDescription(
        primitives=[
            sphere((-0.45, -0.25, -0.05), 0.42, 9.0, (0.92, 0.30, 0.18), Tint((0.0, 0.0, 1.0), 0.6)),
            sphere((0.48, 0.22, 0.12), 0.30, 14.0, (0.20, 0.75, 0.35)),
            sphere((0.05, 0.45, -0.30), 0.22, 20.0, (0.25, 0.35, 0.95), Tint((1.0, 0.0, 0.0), 0.8)),
        ],
        background=(1.0, 1.0, 1.0),
        bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
        near=2.0,
        far=6.0,
    )


def symmetric_two_blob_scene() -> SceneDescription:
    """Two identical blobs mirrored through the origin along x."""
    return SceneDescription(
        primitives=[
            sphere((-0.5, 0.0, 0.0), 0.35, 12.0, (0.85, 0.55, 0.2)),
            sphere((0.5, 0.0, 0.0), 0.35, 12.0, (0.85, 0.55, 0.2)),
        ],
        background=(1.0, 1.0, 1.0),
        bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
        near=2.0,
        far=6.0,
    )


SCENES = {"three_blob": three_blob_scene, "two_blob": symmetric_two_blob_scene}
