import json
import shutil

import numpy as np
import pytest

from derf.data import (DatasetParseError, ImageDimensionError, MissingImageError, generate_dataset, load_dataset,
                       save_png)
from derf.geometry import camera_ray_arrays
from derf.render import analytic_render_rays
from derf.scene import SceneDescription, SceneField, sphere, three_blob_scene


class TestRoundTrip:
    def test_exact_8bit(self, tiny_dataset):
        ds = load_dataset(tiny_dataset.root)
        np.testing.assert_array_equal(ds.images, tiny_dataset.images)
        for a, b in zip(ds.frames, tiny_dataset.frames):
            np.testing.assert_array_equal(a.transform_matrix, b.transform_matrix)
        assert (ds.width, ds.height, ds.focal, ds.near, ds.far) == \
               (tiny_dataset.width, tiny_dataset.height, tiny_dataset.focal, tiny_dataset.near, tiny_dataset.far)
        assert ds.bounds == tiny_dataset.bounds

    def test_holdout_split(self, tiny_dataset):
        assert tiny_dataset.test_indices == [0, 8]
        assert tiny_dataset.train_indices == list(range(1, 8))

    def test_pixel_matches_reevaluation(self, tiny_dataset):
        sc = three_blob_scene()
        for i in (0, 5):
            cam = tiny_dataset.camera(i)
            o, d = camera_ray_arrays(cam)
            j = 3 * cam.width + 6
            ref = analytic_render_rays(sc, o[j], d[j], cam.near, cam.far)[0]
            assert np.abs(tiny_dataset.images[i].reshape(-1, 3)[j] - ref).max() <= 0.5 / 255 + 1e-12

    def test_deterministic(self, tmp_path):
        a = generate_dataset(three_blob_scene(), 3, 6, np.random.default_rng(4), tmp_path / "a")
        b = generate_dataset(three_blob_scene(), 3, 6, np.random.default_rng(4), tmp_path / "b")
        np.testing.assert_array_equal(a.images, b.images)
        assert (tmp_path / "a" / "r_002.png").read_bytes() == (tmp_path / "b" / "r_002.png").read_bytes()

    def test_empty_scene_is_background(self, tmp_path):
        sc = SceneDescription([], background=(0.2, 0.4, 0.6))
        ds = generate_dataset(sc, 2, 5, np.random.default_rng(0), tmp_path)
        np.testing.assert_array_equal(ds.images, np.broadcast_to(np.round(np.array([0.2, 0.4, 0.6]) * 255) / 255,
                                                                 ds.images.shape))


class TestErrors:
    def _copy(self, ds, tmp_path):
        dst = tmp_path / "copy"
        shutil.copytree(ds.root, dst)
        return dst

    def test_missing_png(self, tiny_dataset, tmp_path):
        root = self._copy(tiny_dataset, tmp_path)
        (root / "r_004.png").unlink()
        with pytest.raises(MissingImageError, match="r_004.png"):
            load_dataset(root)

    def test_corrupt_json(self, tiny_dataset, tmp_path):
        root = self._copy(tiny_dataset, tmp_path)
        (root / "dataset.json").write_text('{"width": 8,\n "height": }')
        with pytest.raises(DatasetParseError, match="line 2"):
            load_dataset(root)

    def test_missing_key(self, tiny_dataset, tmp_path):
        root = self._copy(tiny_dataset, tmp_path)
        meta = json.loads((root / "dataset.json").read_text())
        del meta["focal"]
        (root / "dataset.json").write_text(json.dumps(meta))
        with pytest.raises(DatasetParseError):
            load_dataset(root)

    def test_wrong_dimensions(self, tiny_dataset, tmp_path):
        root = self._copy(tiny_dataset, tmp_path)
        save_png(root / "r_001.png", np.zeros((4, 8, 3)))
        with pytest.raises(ImageDimensionError, match="frame 1"):
            load_dataset(root)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope.json")


class TestScene:
    def test_scene_json_round_trip(self, tmp_path):
        sc = three_blob_scene()
        sc.save(tmp_path / "s.json")
        back = SceneDescription.load(tmp_path / "s.json")
        assert back.to_dict() == sc.to_dict()

    def test_field_density_inside(self):
        sc = SceneDescription([sphere((0, 0, 0), 0.5, 3.0, (1, 0, 0))])
        out = SceneField(sc).sample(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([[0, 0, 1.0]] * 2))
        np.testing.assert_array_equal(out.sigma, [3.0, 0.0])
