"""Posed-image datasets: generation from analytic scenes, PNG/JSON IO."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, camera_ray_arrays, look_at
from .render import analytic_render_rays
from .scene import SceneDescription

HOLDOUT_EVERY = 8


class DatasetError(Exception):
    pass


class DatasetParseError(DatasetError, ValueError):
    pass


class MissingImageError(DatasetError, FileNotFoundError):
    pass


class ImageDimensionError(DatasetError, ValueError):
    pass


@dataclass
class Frame:
    file_path: str
    transform_matrix: np.ndarray


@dataclass
class Dataset:
    width: int
    height: int
    focal: float
    near: float
    far: float
    background: tuple
    frames: list[Frame]
    bounds: tuple | None = None
    images: np.ndarray | None = None
    root: Path | None = field(default=None, repr=False)

    def camera(self, i: int) -> Camera:
        return Camera(self.frames[i].transform_matrix, self.focal, self.width, self.height, self.near, self.far)

    @property
    def test_indices(self) -> list[int]:
        return [i for i in range(len(self.frames)) if i % HOLDOUT_EVERY == 0]

    @property
    def train_indices(self) -> list[int]:
        held = set(self.test_indices)
        return [i for i in range(len(self.frames)) if i not in held] or list(range(len(self.frames)))

    def rays(self, indices):
        """Stacked ``(origins, dirs, rgb)`` for every pixel of the given frames."""
        origins, dirs, rgb = [], [], []
        for i in indices:
            o, d = camera_ray_arrays(self.camera(i))
            origins.append(o)
            dirs.append(d)
            rgb.append(self.images[i].reshape(-1, 3))
        return np.concatenate(origins), np.concatenate(dirs), np.concatenate(rgb)

    def to_dict(self) -> dict:
        d = {"width": self.width, "height": self.height, "focal": self.focal, "near": self.near,
             "far": self.far, "background": list(self.background),
             "frames": [{"file_path": f.file_path, "transform_matrix": np.asarray(f.transform_matrix).tolist()}
                        for f in self.frames]}
        if self.bounds is not None:
            d["bounds"] = {"min": list(self.bounds[0]), "max": list(self.bounds[1])}
        return d


def orbit_poses(n_views: int, radius: float, rng: np.random.Generator, center=(0.0, 0.0, 0.0)) -> list[np.ndarray]:
    """Cameras spread in azimuth around ``center`` with jittered elevations in [-20, 50] degrees."""
    center = np.asarray(center, dtype=np.float64)
    offset = rng.random()
    poses = []
    for k in range(n_views):
        az = 2 * math.pi * (k + offset) / n_views
        el = math.radians(-20 + 70 * rng.random())
        eye = center + radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        poses.append(look_at(eye, center))
    return poses


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img):
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def generate_dataset(scene: SceneDescription, n_views: int, resolution, rng: np.random.Generator, out_dir,
                     fov_deg: float = 40.0) -> Dataset:
    """Render ``n_views`` exact images of ``scene`` and write PNGs plus ``dataset.json``."""
    if n_views < 1:
        raise ValueError("need at least one view")
    width, height = (resolution, resolution) if np.ndim(resolution) == 0 else resolution
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {out}: {e}") from e
    lo, hi = (np.asarray(b, dtype=np.float64) for b in scene.bounds)
    radius = 0.5 * (scene.near + scene.far)
    focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    frames, images = [], []
    for k, pose in enumerate(orbit_poses(n_views, radius, rng, 0.5 * (lo + hi))):
        cam = Camera(pose, focal, width, height, scene.near, scene.far)
        o, d = camera_ray_arrays(cam)
        img = analytic_render_rays(scene, o, d, cam.near, cam.far).reshape(height, width, 3)
        name = f"r_{k:03d}.png"
        save_png(out / name, img)
        frames.append(Frame(name, pose))
        images.append(to_uint8(img).astype(np.float64) / 255.0)
    ds = Dataset(width, height, focal, scene.near, scene.far, tuple(scene.background), frames,
                 bounds=(tuple(lo.tolist()), tuple(hi.tolist())), images=np.stack(images), root=out)
    with open(out / "dataset.json", "w") as f:
        json.dump(ds.to_dict(), f, indent=2)
    return ds


def load_dataset(path) -> Dataset:
    """Read ``dataset.json`` (or a directory holding it) and decode its PNGs to floats in [0, 1]."""
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    try:
        text = path.read_text()
    except FileNotFoundError as e:
        raise MissingImageError(f"dataset file {path} does not exist") from e
    try:
        meta = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetParseError(f"{path}: {e.msg} at line {e.lineno} column {e.colno} (char {e.pos})") from e
    try:
        width, height = int(meta["width"]), int(meta["height"])
        frames = [Frame(fr["file_path"], np.asarray(fr["transform_matrix"], dtype=np.float64))
                  for fr in meta["frames"]]
        b = meta.get("bounds")
        ds = Dataset(width, height, float(meta["focal"]), float(meta["near"]), float(meta["far"]),
                     tuple(meta.get("background", (0.0, 0.0, 0.0))), frames,
                     bounds=(tuple(b["min"]), tuple(b["max"])) if b else None, root=path.parent)
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetParseError(f"{path}: malformed dataset description ({e!r})") from e
    images = []
    for i, fr in enumerate(frames):
        img_path = path.parent / fr.file_path
        if not os.path.exists(img_path):
            raise MissingImageError(f"frame {i}: image {fr.file_path!r} not found under {path.parent}")
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        if arr.shape != (height, width, 3):
            raise ImageDimensionError(f"frame {i}: image {fr.file_path!r} is {arr.shape[1]}x{arr.shape[0]}, "
                                      f"expected {width}x{height}")
        images.append(arr)
    ds.images = np.stack(images) if images else np.zeros((0, height, width, 3))
    return ds
