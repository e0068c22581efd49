import math

import numpy as np
import pytest

from derf import field as field_mod
from derf.field import (AdamState, ArchitectureDescriptor, DerfModel, adam_step, derf_eval, encode_inputs,
                        head_backward, head_forward, init_head, positional_encode, zero_head)
from derf.voronoi import VoronoiDecomposition, hard_assign


def _random_head(desc, rng, dtype=np.float64, bias_scale=0.3):
    head = init_head(desc, rng, dtype=dtype)
    for k, v in head.arrays.items():
        if k.endswith(".b"):
            v[:] = rng.normal(scale=bias_scale, size=v.shape)
    head.touch()
    return head


def _inputs(desc, rng, m=5, dtype=np.float64):
    x = rng.uniform(-1, 1, (m, 3))
    d = rng.normal(size=(m, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return encode_inputs(desc, x, d, dtype)


class TestPositionalEncode:
    def test_zero_input(self):
        out = positional_encode(np.zeros(3), 4)
        assert out.shape == (27,)
        np.testing.assert_array_equal(out[:3], 0.0)
        bands = out[3:].reshape(4, 6)
        np.testing.assert_array_equal(bands[:, :3], 0.0)
        np.testing.assert_array_equal(bands[:, 3:], 1.0)

    def test_length(self):
        assert positional_encode(np.ones(3), 10).shape == (63,)
        assert positional_encode(np.ones((7, 3)), 0).shape == (7, 3)

    def test_first_band_half(self):
        out = positional_encode(np.array([0.5, 0.0, 0.0]), 1)
        assert math.isclose(out[3], 1.0)
        assert abs(out[6]) < 1e-15

    def test_band_formula(self):
        v = np.array([0.3, -0.7, 0.11])
        out = positional_encode(v, 3).reshape(-1)
        for k in range(3):
            np.testing.assert_allclose(out[3 + 6 * k:6 + 6 * k], np.sin(2 ** k * np.pi * v))
            np.testing.assert_allclose(out[6 + 6 * k:9 + 6 * k], np.cos(2 ** k * np.pi * v))

    def test_negative_bands(self):
        with pytest.raises(ValueError):
            positional_encode(np.zeros(3), -1)


class TestDescriptor:
    def test_default_skip(self):
        assert ArchitectureDescriptor(depth=8, width=256).skip_layer == 5
        assert ArchitectureDescriptor(depth=4).skip_layer == 3
        assert ArchitectureDescriptor(depth=2).skip_layer == 2

    @pytest.mark.parametrize("kw", [{"depth": 1}, {"width": 3}, {"skip_layer": 1}, {"depth": 4, "skip_layer": 5}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ArchitectureDescriptor(**kw)


class TestHeadForward:
    def test_zero_parameters(self):
        desc = ArchitectureDescriptor()
        x_enc, d_enc = _inputs(desc, np.random.default_rng(0), dtype=np.float32)
        out, _ = head_forward(zero_head(desc), x_enc, d_enc)
        np.testing.assert_allclose(out.sigma, math.log(2.0), rtol=1e-6)
        np.testing.assert_allclose(out.color, 0.5)

    def test_pure(self):
        desc = ArchitectureDescriptor(width=16)
        rng = np.random.default_rng(1)
        head = _random_head(desc, rng)
        x_enc, d_enc = _inputs(desc, rng)
        a, _ = head_forward(head, x_enc, d_enc)
        b, _ = head_forward(head, x_enc, d_enc)
        np.testing.assert_array_equal(a.sigma, b.sigma)
        np.testing.assert_array_equal(a.color, b.color)

    def test_ranges(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            desc = ArchitectureDescriptor(depth=int(rng.integers(2, 6)), width=int(rng.choice([4, 8, 16])))
            head = _random_head(desc, rng, bias_scale=3.0)
            x_enc, d_enc = _inputs(desc, rng, m=64)
            out, _ = head_forward(head, x_enc * 5, d_enc)
            assert np.all(out.sigma >= 0)
            assert np.all((out.color >= 0) & (out.color <= 1))

    def test_shape_mismatch(self):
        desc = ArchitectureDescriptor(width=8)
        head = init_head(desc, np.random.default_rng(0))
        with pytest.raises(ValueError):
            head_forward(head, np.zeros((2, 10)), np.zeros((2, desc.dir_dim)))


def _fd_check(desc, rng, m=4, h=1e-5):
    head = _random_head(desc, rng)
    x_enc, d_enc = _inputs(desc, rng, m)
    up_s = rng.normal(size=m)
    up_c = rng.normal(size=(m, 3))

    def loss():
        out, _ = head_forward(head, x_enc, d_enc)
        return float(up_s @ out.sigma + np.sum(up_c * out.color))

    _, cache = head_forward(head, x_enc, d_enc)
    grads = head_backward(head, cache, up_s, up_c)
    ok = total = 0
    for k, arr in head.arrays.items():
        flat = arr.reshape(-1)
        g = grads[k].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            total += 1
            # absolute floor covers coordinates whose true gradient is ~0
            ok += abs(fd - g[i]) <= 1e-3 * max(abs(fd), abs(g[i])) or abs(fd - g[i]) < 1e-8
    return ok / total


class TestHeadBackward:
    def test_zero_upstream(self):
        desc = ArchitectureDescriptor(width=8)
        rng = np.random.default_rng(3)
        head = _random_head(desc, rng)
        x_enc, d_enc = _inputs(desc, rng)
        _, cache = head_forward(head, x_enc, d_enc)
        grads = head_backward(head, cache, np.zeros(5), np.zeros((5, 3)))
        for g in grads.values():
            np.testing.assert_array_equal(g, 0.0)

    def test_color_bias_hand_derivation(self):
        desc = ArchitectureDescriptor(width=8)
        rng = np.random.default_rng(4)
        head = _random_head(desc, rng)
        x_enc, d_enc = _inputs(desc, rng, m=1)
        out, cache = head_forward(head, x_enc, d_enc)
        up = np.array([[0.3, -1.2, 2.0]])
        grads = head_backward(head, cache, np.zeros(1), up)
        np.testing.assert_allclose(grads["color.b"], (up * out.color * (1 - out.color))[0], rtol=1e-12)

    @pytest.mark.parametrize("cfg", range(20))
    def test_finite_differences(self, cfg):
        rng = np.random.default_rng(100 + cfg)
        desc = ArchitectureDescriptor(depth=int(rng.integers(2, 5)), width=int(rng.choice([4, 6, 8])),
                                      pos_bands=int(rng.integers(0, 3)), dir_bands=int(rng.integers(0, 2)))
        assert _fd_check(desc, rng) >= 0.99

    def test_input_gradients(self):
        desc = ArchitectureDescriptor(width=8, pos_bands=2, dir_bands=1)
        rng = np.random.default_rng(5)
        head = _random_head(desc, rng)
        x_enc, d_enc = _inputs(desc, rng, m=3)
        up_s, up_c = rng.normal(size=3), rng.normal(size=(3, 3))
        _, cache = head_forward(head, x_enc, d_enc)
        _, (dx, dd) = head_backward(head, cache, up_s, up_c, input_grads=True)

        def loss(xe, de):
            out, _ = head_forward(head, xe, de)
            return float(up_s @ out.sigma + np.sum(up_c * out.color))

        h = 1e-6
        for arr, g in ((x_enc, dx), (d_enc, dd)):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                lp = loss(x_enc, d_enc)
                arr[idx] = old - h
                lm = loss(x_enc, d_enc)
                arr[idx] = old
                assert abs((lp - lm) / (2 * h) - g[idx]) <= 1e-5 + 1e-4 * abs(g[idx])

    def test_stale_cache(self):
        desc = ArchitectureDescriptor(width=8)
        rng = np.random.default_rng(6)
        head = _random_head(desc, rng)
        x_enc, d_enc = _inputs(desc, rng)
        _, cache = head_forward(head, x_enc, d_enc)
        grads = head_backward(head, cache, np.ones(5), np.ones((5, 3)))
        adam_step(head.arrays, grads, AdamState())
        head.touch()
        with pytest.raises(ValueError, match="stale"):
            head_backward(head, cache, np.ones(5), np.ones((5, 3)))
        other = _random_head(desc, rng)
        _, cache2 = head_forward(other, x_enc, d_enc)
        with pytest.raises(ValueError):
            head_backward(head, cache2, np.ones(5), np.ones((5, 3)))


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = {"a": np.array([1.0, -2.0])}
        adam_step(p, {"a": np.zeros(2)}, AdamState(lr=0.1))
        np.testing.assert_array_equal(p["a"], [1.0, -2.0])

    def test_first_step(self):
        g = np.array([0.5, -3.0, 1e-4])
        p = {"a": np.zeros(3)}
        adam_step(p, {"a": g}, AdamState(lr=0.01))
        np.testing.assert_allclose(p["a"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-9)

    def test_two_constant_steps(self):
        g = np.array([2.0, -0.7])
        p = {"a": np.zeros(2)}
        s = AdamState(lr=1e-3)
        adam_step(p, {"a": g}, s)
        adam_step(p, {"a": g}, s)
        np.testing.assert_allclose(p["a"], -2e-3 * np.sign(g), rtol=1e-6)

    def test_nonfinite_names_parameter(self):
        p = {"heads.2.trunk1.w": np.zeros(2)}
        with pytest.raises(FloatingPointError, match="heads.2.trunk1.w"):
            adam_step(p, {"heads.2.trunk1.w": np.array([1.0, np.nan])}, AdamState())


class TestInitHead:
    def test_deterministic_and_shapes(self):
        desc = ArchitectureDescriptor(depth=5, width=12)
        a = init_head(desc, np.random.default_rng(9))
        b = init_head(desc, np.random.default_rng(9))
        for k in a.arrays:
            np.testing.assert_array_equal(a[k], b[k])
        for name, (fi, fo) in desc.layer_shapes().items():
            assert a[f"{name}.w"].shape == (fi, fo)
            np.testing.assert_array_equal(a[f"{name}.b"], 0.0)
        assert desc.skip_layer == 4
        assert a["trunk4.w"].shape == (12 + desc.pos_dim, 12)

    def test_seeds_differ(self):
        desc = ArchitectureDescriptor()
        a = init_head(desc, np.random.default_rng(1))
        b = init_head(desc, np.random.default_rng(2))
        assert not np.array_equal(a["trunk1.w"], b["trunk1.w"])


def _model(n, beta, rng, width=8, dtype=np.float64):
    desc = ArchitectureDescriptor(width=width, pos_bands=3, dir_bands=1)
    heads = [_random_head(desc, rng, dtype) for _ in range(n)]
    return DerfModel(VoronoiDecomposition(rng.uniform(-1, 1, (n, 3)), beta), heads, heads[0], desc)


class TestDerfEval:
    def test_single_head_equals_head(self):
        rng = np.random.default_rng(10)
        m = _model(1, 3.0, rng)
        x = rng.uniform(-1, 1, (20, 3))
        d = np.tile([0.0, 0.0, 1.0], (20, 1))
        ref, _ = head_forward(m.heads[0], *encode_inputs(m.descriptor, x, d, np.float64))
        for mode in ("soft", "hard"):
            out = derf_eval(m, x, d, mode)
            np.testing.assert_array_equal(out.sigma, ref.sigma)
            np.testing.assert_array_equal(out.color, ref.color)

    def test_equal_weights_mean(self):
        rng = np.random.default_rng(11)
        desc = ArchitectureDescriptor(width=8, pos_bands=2, dir_bands=1)
        heads = [_random_head(desc, rng) for _ in range(2)]
        m = DerfModel(VoronoiDecomposition([[0.0, 0, 0], [2.0, 0, 0]], 1.0), heads, heads[0], desc)
        x, d = np.array([[1.0, 0.3, -0.2]]), np.array([[0.0, 1.0, 0.0]])
        enc = encode_inputs(desc, x, d, np.float64)
        a, _ = head_forward(heads[0], *enc)
        b, _ = head_forward(heads[1], *enc)
        out = derf_eval(m, x, d, "soft")
        np.testing.assert_allclose(out.sigma, 0.5 * (a.sigma + b.sigma), rtol=1e-12)
        np.testing.assert_allclose(out.color, 0.5 * (a.color + b.color), rtol=1e-12)

    def test_soft_matches_hard_at_high_beta(self):
        rng = np.random.default_rng(12)
        m = _model(6, 1e10, rng)
        x = rng.uniform(-1.2, 1.2, (10000, 3))
        dist = np.sort(np.linalg.norm(x[:, None] - m.decomposition.sites[None], axis=-1), axis=1)
        # keep points at least 1e-3 from every bisector of their nearest site
        x = x[dist[:, 1] - dist[:, 0] >= 2e-3]
        d = rng.normal(size=x.shape)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        soft = derf_eval(m, x, d, "soft")
        hard = derf_eval(m, x, d, "hard")
        assert np.abs(soft.sigma - hard.sigma).max() <= 1e-6
        assert np.abs(soft.color - hard.color).max() <= 1e-6

    def test_linearity_in_weights(self):
        rng = np.random.default_rng(13)
        m = _model(4, 1.0, rng)
        x = rng.uniform(-1, 1, (30, 3))
        d = np.tile([1.0, 0, 0], (30, 1))
        w1 = rng.dirichlet(np.ones(4), 30)
        w2 = rng.dirichlet(np.ones(4), 30)
        lam = 0.3
        mix = derf_eval(m, x, d, "soft", weights=lam * w1 + (1 - lam) * w2)
        a = derf_eval(m, x, d, "soft", weights=w1)
        b = derf_eval(m, x, d, "soft", weights=w2)
        np.testing.assert_allclose(mix.sigma, lam * a.sigma + (1 - lam) * b.sigma, rtol=1e-12)
        np.testing.assert_allclose(mix.color, lam * a.color + (1 - lam) * b.color, rtol=1e-12)

    def test_hard_routes_to_nearest(self):
        rng = np.random.default_rng(14)
        m = _model(3, 5.0, rng)
        x = rng.uniform(-1, 1, (25, 3))
        d = np.tile([0.0, 0, 1.0], (25, 1))
        out = derf_eval(m, x, d, "hard")
        owner = hard_assign(x, m.decomposition)
        enc = encode_inputs(m.descriptor, x, d, np.float64)
        for i in range(25):
            ref, _ = head_forward(m.heads[owner[i]], enc[0][i:i + 1], enc[1][i:i + 1])
            np.testing.assert_allclose(out.sigma[i], ref.sigma[0], rtol=1e-12)

    def test_heads_count_checked(self):
        rng = np.random.default_rng(15)
        desc = ArchitectureDescriptor(width=8)
        with pytest.raises(ValueError):
            DerfModel(VoronoiDecomposition(rng.uniform(size=(2, 3))), [init_head(desc, rng)], init_head(desc, rng), desc)


def test_matmul_is_the_only_dense_product():
    """FLOP instrumentation relies on every layer going through ``_matmul``."""
    assert callable(field_mod._matmul)
