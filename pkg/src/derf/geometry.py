"""Cameras, rays, stratified sampling and scene normalization.

Rays are kept in world units. Networks and Voronoi sites live in the
normalized frame produced by :class:`NormalizationTransform`; because the
transform is an isotropic scale plus offset, a world ray maps to a
normalized ray with the *same* parameter ``t`` (its direction is scaled by
``scale``), which lets the renderer share sample positions between frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got |d|={np.linalg.norm(d)}")
        if not self.t_far > self.t_near or self.t_near < 0:
            raise ValueError(f"need 0 <= t_near < t_far, got [{self.t_near}, {self.t_far}]")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class Camera:
    """Pinhole camera looking down its local -z axis (OpenGL/Blender convention)."""

    pose: np.ndarray
    focal: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape == (3, 4):
            pose = np.vstack([pose, [0.0, 0.0, 0.0, 1.0]])
        if pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {pose.shape}")
        rot = pose[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation block is not orthonormal")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("camera width and height must be >= 1")
        if not self.far > self.near:
            raise ValueError("camera far must exceed near")
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3].copy()


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose at ``eye`` whose -z axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    return pose


def camera_ray_arrays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Row-major per-pixel ray origins and unit directions, each ``(H*W, 3)``."""
    j, i = np.meshgrid(np.arange(camera.height, dtype=np.float64),
                       np.arange(camera.width, dtype=np.float64), indexing="ij")
    dirs = np.stack([(i + 0.5 - camera.width / 2) / camera.focal,
                     -(j + 0.5 - camera.height / 2) / camera.focal,
                     -np.ones_like(i)], axis=-1).reshape(-1, 3)
    dirs = dirs @ camera.pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:3, 3], dirs.shape).copy()
    return origins, dirs


def generate_rays(camera: Camera) -> list[Ray]:
    origins, dirs = camera_ray_arrays(camera)
    return [Ray(o, d, camera.near, camera.far) for o, d in zip(origins, dirs)]


@dataclass(frozen=True)
class NormalizationTransform:
    """World -> normalized map ``x' = scale * x + offset``."""

    scale: float
    offset: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("normalization scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64).reshape(3))

    def inverse(self) -> "NormalizationTransform":
        return NormalizationTransform(1.0 / self.scale, -self.offset / self.scale)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "offset": self.offset.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationTransform":
        return cls(d["scale"], d["offset"])

    @classmethod
    def identity(cls) -> "NormalizationTransform":
        return cls(1.0, np.zeros(3))


def build_normalization(points) -> NormalizationTransform:
    """Isotropic fit of the points' bounding box into a centered box in [-1, 1]^3.

    A single point (or a box of zero extent) is treated as the unit box
    ``[p - 1, p + 1]`` around it.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot fit a normalization to zero points")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = 0.5 * float(np.max(hi - lo))
    center = 0.5 * (lo + hi)
    if half <= 0.0:
        half = 1.0
    scale = 1.0 / half
    return NormalizationTransform(scale, -scale * center)


def apply_normalization(t: NormalizationTransform, x) -> np.ndarray:
    return t.scale * np.asarray(x, dtype=np.float64) + t.offset


def stratified_samples(ray: Ray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One uniform draw per bin of the n-partition of ``[t_near, t_far]``.

    Returns ``(t, delta)`` where ``delta[i] = t[i+1] - t[i]`` and the last
    width runs to ``t_far``.
    """
    t, delta = stratified_samples_batch(np.array([ray.t_near]), np.array([ray.t_far]), n, rng)
    return t[0], delta[0]


def stratified_samples_batch(t_near, t_far, n: int, rng=None, jitter=None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`stratified_samples` for ``R`` rays.

    ``jitter`` (shape ``(R, n)``, values in [0, 1)) overrides ``rng``; a
    jitter of 0.5 everywhere gives deterministic bin midpoints.
    """
    if n < 1:
        raise ValueError("need at least one sample per ray")
    t_near = np.asarray(t_near, dtype=np.float64).reshape(-1, 1)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1, 1)
    if jitter is None:
        jitter = rng.random((t_near.shape[0], n))
    width = (t_far - t_near) / n
    t = t_near + (np.arange(n) + jitter) * width
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = t_far[:, 0] - t[:, -1]
    return t, delta
