"""Network forward/backward: hand values, finite differences, persistence."""

import io

import numpy as np
import pytest

from edgemac.convnet import (
    MAXPOOL,
    RELU,
    ConvLayer,
    NetworkConfig,
    backward,
    collapse_rgb_filters,
    default_config,
    forward,
    init_weights,
    load_weights,
    save_weights,
)
from edgemac.edgemap import EdgeMap
from edgemac.errors import (
    ConfigError,
    FormatError,
    ShapeError,
    SizeError,
    StateError,
    ZeroDescriptorError,
)
from edgemac.filterlayer import FilterParams, filter_backward, filter_forward


def tiny_config():
    return NetworkConfig(
        layers=(ConvLayer(1, 2), RELU, MAXPOOL, ConvLayer(2, 3)),
        descriptor_dim=3,
    )


def identity_1x1(out_values):
    """Single 1x1 conv whose channels scale the input by the given factors."""
    config = NetworkConfig(layers=(ConvLayer(1, len(out_values), kernel=1),),
                           descriptor_dim=len(out_values))
    w = init_weights(config, seed=0, dtype=np.float64)
    w.kernels[0] = np.array(out_values, dtype=np.float64).reshape(1, 1, 1, -1)
    return w


class TestConfig:
    def test_channel_chain_validated(self):
        with pytest.raises(ConfigError):
            NetworkConfig(layers=(ConvLayer(1, 4), ConvLayer(8, 4)), descriptor_dim=4)

    def test_descriptor_dim_must_match_last_conv(self):
        with pytest.raises(ConfigError):
            NetworkConfig(layers=(ConvLayer(1, 4),), descriptor_dim=8)

    def test_pool_cannot_be_last(self):
        with pytest.raises(ConfigError):
            NetworkConfig(layers=(ConvLayer(1, 4), MAXPOOL), descriptor_dim=4)

    def test_default_config_is_valid(self):
        cfg = default_config()
        assert cfg.descriptor_dim == 64
        assert cfg.cumulative_stride == 8


class TestInitWeights:
    def test_same_seed_bit_identical(self):
        a = init_weights(tiny_config(), seed=11)
        b = init_weights(tiny_config(), seed=11)
        for ka, kb in zip(a.kernels, b.kernels):
            np.testing.assert_array_equal(ka, kb)

    def test_different_seeds_differ(self):
        a = init_weights(tiny_config(), seed=11)
        b = init_weights(tiny_config(), seed=12)
        assert any(not np.array_equal(ka, kb) for ka, kb in zip(a.kernels, b.kernels))

    def test_biases_exactly_zero(self):
        w = init_weights(tiny_config(), seed=5)
        for b in w.biases:
            assert np.all(b == 0.0)

    def test_filter_params_initialized(self):
        w = init_weights(tiny_config(), seed=5)
        assert w.filter_params == FilterParams(p=0.5, tau=0.1, beta=500.0, out_scale=10.0)


class TestCollapseRgbFilters:
    def test_all_ones_sums_to_three(self):
        out = collapse_rgb_filters(np.ones((3, 3, 3, 1)))
        np.testing.assert_array_equal(out, np.full((3, 3, 1, 1), 3.0))

    def test_zero_kernel_stays_zero(self):
        out = collapse_rgb_filters(np.zeros((5, 5, 3, 4)))
        assert out.shape == (5, 5, 1, 4)
        assert np.all(out == 0.0)

    def test_identical_channels_triple(self, rng):
        k = rng.standard_normal((3, 3, 1, 2))
        stacked = np.concatenate([k, k, k], axis=2)
        np.testing.assert_allclose(collapse_rgb_filters(stacked), 3.0 * k, rtol=1e-12)

    def test_wrong_channel_count_rejected(self):
        with pytest.raises(ShapeError):
            collapse_rgb_filters(np.ones((3, 3, 4, 1)))


class TestForward:
    def test_mac_takes_global_max(self):
        w = identity_1x1([1.0])
        x = np.array([[1.0, 3.0], [2.0, 0.0]])
        desc, cache = forward(w, x)
        assert cache.prenorm[0] == 3.0
        assert desc[0] == 1.0

    def test_two_channel_normalization(self):
        # channel maxima 3 and 4 normalize to the 3-4-5 triangle
        w = identity_1x1([1.0, 4.0 / 3.0])
        x = np.array([[1.0, 3.0], [2.0, 0.0]])
        desc, _ = forward(w, x)
        np.testing.assert_allclose(desc, [0.6, 0.8], rtol=1e-12)

    def test_zero_input_zero_bias_raises(self):
        w = init_weights(tiny_config(), seed=1)
        with pytest.raises(ZeroDescriptorError):
            forward(w, np.zeros((8, 8)))

    def test_descriptor_always_unit_norm(self, rng):
        w = init_weights(tiny_config(), seed=2)
        for _ in range(5):
            x = rng.random((rng.integers(8, 30), rng.integers(8, 30))).astype(np.float32)
            desc, _ = forward(w, x)
            assert abs(np.linalg.norm(desc.astype(np.float64)) - 1.0) < 1e-6

    def test_too_small_input_is_size_error(self):
        w = init_weights(default_config(), seed=0)
        with pytest.raises(SizeError):
            forward(w, np.ones((3, 3)))

    def test_channel_mismatch_is_shape_error(self):
        w = init_weights(tiny_config(), seed=0)
        with pytest.raises(ShapeError):
            forward(w, np.ones((8, 8, 2)))

    def test_deterministic_across_runs(self, rng):
        w = init_weights(tiny_config(), seed=3)
        x = rng.random((16, 12)).astype(np.float32)
        a, _ = forward(w, x)
        b, _ = forward(w, x)
        np.testing.assert_array_equal(a, b)


class TestBackward:
    def test_radial_gradient_annihilated(self, rng):
        # pushing along the descriptor itself changes nothing after
        # normalization, so every parameter gradient must vanish
        w = init_weights(tiny_config(), seed=4, dtype=np.float64)
        x = rng.random((10, 10))
        desc, cache = forward(w, x)
        grads = backward(w, cache, desc)
        for g in grads.kernels:
            np.testing.assert_allclose(g, 0.0, atol=1e-12)
        np.testing.assert_allclose(grads.grad_input, 0.0, atol=1e-12)

    def test_mac_routes_to_argmax_pixel(self):
        w = identity_1x1([1.0])
        x = np.array([[1.0, 3.0], [2.0, 0.0]])
        desc, cache = forward(w, x)
        # orthogonalize manually: feed a gradient not parallel to desc is
        # impossible in 1-D, so check the route through prenorm instead
        grads = backward(w, cache, np.array([0.0]))
        assert grads.grad_input.shape == (2, 2, 1)
        np.testing.assert_array_equal(grads.grad_input, 0.0)

    def test_mac_gradient_lands_on_first_max_in_row_major_order(self):
        w = identity_1x1([1.0, 1.0])
        # two equal maxima: row-major first one wins
        x = np.array([[0.0, 2.0], [2.0, 0.0]])
        desc, cache = forward(w, x)
        assert cache.mac_arg[0] == 1  # flat index of (0, 1)

    def test_stale_cache_rejected(self, rng):
        w = init_weights(tiny_config(), seed=6)
        x = rng.random((8, 8)).astype(np.float32)
        _, cache = forward(w, x)
        w.revision += 1
        with pytest.raises(StateError):
            backward(w, cache, np.zeros(3, dtype=np.float32))

    def test_full_network_finite_differences(self, rng):
        # three-layer config in double precision; every kernel entry, bias,
        # filter parameter, and a sample of input pixels vs central
        # differences at step 1e-5, relative error < 1e-4
        config = tiny_config()
        w = init_weights(config, seed=7, dtype=np.float64)
        for b in w.biases:
            b += rng.standard_normal(b.shape) * 0.05
        em = EdgeMap(rng.uniform(0.02, 1.0, size=(9, 11)))
        u = rng.standard_normal(config.descriptor_dim)
        u /= np.linalg.norm(u)

        def loss(weights):
            filtered = filter_forward(em, weights.filter_params)
            d, _ = forward(weights, filtered)
            return float(d @ u)

        filtered = filter_forward(em, w.filter_params)
        desc, cache = forward(w, filtered)
        net = backward(w, cache, u)
        grad_p, grad_tau, grad_map = filter_backward(
            em, w.filter_params, net.grad_input[:, :, 0]
        )

        h = 1e-5
        checked = 0

        def relcheck(got, want):
            nonlocal checked
            assert abs(got - want) / max(abs(want), 1e-7) < 1e-4
            checked += 1

        for li, kernel in enumerate(w.kernels):
            flat = kernel.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = loss(w)
                flat[j] = orig - h
                down = loss(w)
                flat[j] = orig
                relcheck(net.kernels[li].reshape(-1)[j], (up - down) / (2 * h))
        for li, bias in enumerate(w.biases):
            for j in range(bias.size):
                orig = bias[j]
                bias[j] = orig + h
                up = loss(w)
                bias[j] = orig - h
                down = loss(w)
                bias[j] = orig
                relcheck(net.biases[li].reshape(-1)[j], (up - down) / (2 * h))
        fp = w.filter_params
        for name, got in (("p", grad_p), ("tau", grad_tau)):
            w.filter_params = FilterParams(**{**fp.__dict__, name: getattr(fp, name) + h})
            up = loss(w)
            w.filter_params = FilterParams(**{**fp.__dict__, name: getattr(fp, name) - h})
            down = loss(w)
            w.filter_params = fp
            relcheck(got, (up - down) / (2 * h))
        # input gradient at a sample of pixels (through the filter layer)
        strengths = em.strengths
        pixels = [(int(i), int(j)) for i, j in zip(
            rng.integers(0, 9, size=22), rng.integers(0, 11, size=22))]
        for (i, j) in dict.fromkeys([(0, 0), (8, 10)] + pixels):
            orig = strengths[i, j]
            strengths[i, j] = orig + h
            up = loss(w)
            strengths[i, j] = orig - h
            down = loss(w)
            strengths[i, j] = orig
            relcheck(grad_map[i, j], (up - down) / (2 * h))
        assert checked > 100


class TestTranslationInvariance:
    def test_shift_by_cumulative_stride_is_bit_identical(self):
        # content away from the borders of a 70x70 zero canvas, shifted by
        # the cumulative stride (8), must give the very same descriptor
        config = default_config()
        w = init_weights(config, seed=9)
        rng = np.random.default_rng(5)
        shape = rng.random((12, 12))
        base = np.zeros((70, 70))
        base[29:41, 29:41] = shape
        shifted = np.zeros((70, 70))
        shifted[37:49, 37:49] = shape
        fp = w.filter_params
        da, _ = forward(w, filter_forward(base, fp))
        db, _ = forward(w, filter_forward(shifted, fp))
        np.testing.assert_array_equal(da, db)


class TestWeightFile:
    def test_round_trip_bit_exact(self):
        w = init_weights(tiny_config(), seed=13)
        buf = io.BytesIO()
        save_weights(w, buf)
        again = load_weights(io.BytesIO(buf.getvalue()))
        buf2 = io.BytesIO()
        save_weights(again, buf2)
        assert buf.getvalue() == buf2.getvalue()
        for ka, kb in zip(w.kernels, again.kernels):
            np.testing.assert_array_equal(ka, kb)
        assert again.filter_params == w.filter_params
        assert again.seed == w.seed

    def test_truncated_file_is_format_error(self):
        w = init_weights(tiny_config(), seed=13)
        buf = io.BytesIO()
        save_weights(w, buf)
        data = buf.getvalue()
        with pytest.raises(FormatError):
            load_weights(io.BytesIO(data[: len(data) // 2]))

    def test_bad_magic_is_format_error(self):
        with pytest.raises(FormatError):
            load_weights(io.BytesIO(b"NOPE" + b"\x00" * 64))

    def test_inconsistent_descriptor_dim_is_format_error(self):
        w = init_weights(tiny_config(), seed=13)
        buf = io.BytesIO()
        save_weights(w, buf)
        data = bytearray(buf.getvalue())
        # the descriptor_dim u32 sits right after the layer records
        # (header 20 bytes, conv records 18 bytes, relu/pool 1 byte each)
        offset = 4 + 4 + 8 + 4 + 18 + 1 + 1 + 18
        assert int.from_bytes(data[offset : offset + 4], "little") == 3
        data[offset : offset + 4] = (99).to_bytes(4, "little")
        with pytest.raises(FormatError):
            load_weights(io.BytesIO(bytes(data)))

    def test_path_round_trip(self, tmp_path):
        w = init_weights(tiny_config(), seed=21)
        path = tmp_path / "w.emwt"
        save_weights(w, path)
        again = load_weights(path)
        for ka, kb in zip(w.kernels, again.kernels):
            np.testing.assert_array_equal(ka, kb)
