import struct

import numpy as np
import pytest
from conftest import tiny_config

from derf.checkpoint import (MAGIC, CheckpointError, CheckpointMagicError, CheckpointTruncatedError,
                             CheckpointVersionError, load_checkpoint, save_checkpoint)
from derf.render import render_image
from derf.train import RayPool, init_state, train_run, train_steps


@pytest.fixture
def trained(tiny_dataset):
    return train_run(tiny_config(), tiny_dataset, return_state=True)


class TestRoundTrip:
    def test_bytes_identical(self, trained, tmp_path):
        save_checkpoint(trained, tmp_path / "a.derf")
        save_checkpoint(load_checkpoint(tmp_path / "a.derf"), tmp_path / "b.derf")
        assert (tmp_path / "a.derf").read_bytes() == (tmp_path / "b.derf").read_bytes()

    def test_parameters_bit_exact(self, trained, tmp_path):
        save_checkpoint(trained, tmp_path / "a.derf")
        back = load_checkpoint(tmp_path / "a.derf")
        np.testing.assert_array_equal(back.model.decomposition.sites, trained.model.decomposition.sites)
        for k, v in trained.model.head_params().items():
            assert back.model.head_params()[k].tobytes() == v.tobytes()
        assert back.model.decomposition.beta == trained.model.decomposition.beta
        assert back.config == trained.config

    def test_render_identical(self, trained, tiny_dataset, tmp_path):
        save_checkpoint(trained, tmp_path / "a.derf")
        back = load_checkpoint(tmp_path / "a.derf")
        cam = tiny_dataset.camera(0)
        np.testing.assert_array_equal(render_image(back.model, cam, 8), render_image(trained.model, cam, 8))

    def test_resume_matches_continuous(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        whole = train_run(cfg, tiny_dataset, return_state=True)
        part = init_state(cfg, tiny_dataset)
        pool = RayPool(tiny_dataset)
        train_steps(part, pool, n_steps=5)
        save_checkpoint(part, tmp_path / "mid.derf")
        resumed = load_checkpoint(tmp_path / "mid.derf")
        train_steps(resumed, pool)
        for k, v in whole.model.head_params().items():
            np.testing.assert_array_equal(resumed.model.head_params()[k], v)


class TestCorruption:
    def _bytes(self, trained, tmp_path):
        save_checkpoint(trained, tmp_path / "a.derf")
        return (tmp_path / "a.derf").read_bytes()

    def test_bad_magic(self, trained, tmp_path):
        data = self._bytes(trained, tmp_path)
        (tmp_path / "x.derf").write_bytes(b"NOTDERF!" + data[8:])
        with pytest.raises(CheckpointMagicError):
            load_checkpoint(tmp_path / "x.derf")

    def test_future_version(self, trained, tmp_path):
        data = bytearray(self._bytes(trained, tmp_path))
        version = struct.unpack_from("<I", data, len(MAGIC))[0]
        struct.pack_into("<I", data, len(MAGIC), version + 1)
        (tmp_path / "x.derf").write_bytes(bytes(data))
        with pytest.raises(CheckpointVersionError, match=str(version + 1)):
            load_checkpoint(tmp_path / "x.derf")

    @pytest.mark.parametrize("cut", [4, 14, 100, -4])
    def test_truncated(self, trained, tmp_path, cut):
        data = self._bytes(trained, tmp_path)
        (tmp_path / "x.derf").write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.derf")

    def test_truncated_blob_type(self, trained, tmp_path):
        data = self._bytes(trained, tmp_path)
        (tmp_path / "x.derf").write_bytes(data[:-4])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(tmp_path / "x.derf")

    def test_trailing_bytes(self, trained, tmp_path):
        data = self._bytes(trained, tmp_path)
        (tmp_path / "x.derf").write_bytes(data + b"\0")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.derf")
