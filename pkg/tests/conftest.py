import numpy as np
import pytest

from derf.field import ArchitectureDescriptor, DerfModel, init_head
from derf.geometry import Camera, look_at
from derf.voronoi import VoronoiDecomposition


def make_model(n_heads, seed=0, width=16, depth=3, density_bias=1.0, pos_bands=4, dir_bands=2,
               dtype=np.float64, beta=1e10):
    """Random model with visible density, sites in the unit cube."""
    rng = np.random.default_rng(seed)
    desc = ArchitectureDescriptor(depth=depth, width=width, pos_bands=pos_bands, dir_bands=dir_bands)
    heads = []
    for _ in range(n_heads):
        h = init_head(desc, rng, dtype=dtype)
        h["density.b"][:] = density_bias
        h["color.b"][:] = rng.normal(size=3)
        h.touch()
        heads.append(h)
    coarse = init_head(desc, rng, dtype=dtype)
    coarse["density.b"][:] = density_bias
    sites = rng.uniform(-0.8, 0.8, (n_heads, 3))
    return DerfModel(VoronoiDecomposition(sites, beta), heads, coarse, desc)


def orbit_camera(res=16, azimuth=0.4, elevation=0.3, radius=4.0, focal=None):
    eye = radius * np.array([np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth),
                             np.sin(elevation)])
    return Camera(look_at(eye, (0.0, 0.0, 0.0)), focal or 1.4 * res, res, res, 2.0, 6.0)


@pytest.fixture
def camera():
    return orbit_camera()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from derf.data import generate_dataset
    from derf.scene import three_blob_scene
    return generate_dataset(three_blob_scene(), 9, 8, np.random.default_rng(0), tmp_path_factory.mktemp("tiny"))


def tiny_config(**kw):
    from derf.train import TrainConfig
    base = dict(batch_rays=16, n_samples=8, iters_pretrain=4, iters_main=4, depth=2, width=8, n_heads=3,
                seed=0, log_every=1)
    base.update(kw)
    return TrainConfig(**base)
