"""Layer forward/backward semantics, emulation, counting, and checkpoints."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from lon.image import BoundaryMode, DimensionError, Image, identity_kernel
from lon.layers import (
    Activation,
    CnnLayer,
    DenseHead,
    ForwardTape,
    LonLayer,
    OneByOneHead,
    activation_grad_logsigma,
    activation_grad_v,
    activation_value,
    bin_spacing,
    cnn_backward,
    cnn_forward,
    count_params,
    emulate_cnn_from_lon,
    forward_batch,
    init_layer,
    load_checkpoint,
    lon_backward,
    lon_forward,
    save_checkpoint,
)


def make_lon(kernels, biases, sigmas, head, **kw):
    return LonLayer(kernels, biases, np.log(sigmas), head, Activation.GAUSS_BELL, **kw)


def one_by_one(c, rng=None, bias=0.0, pooling="none"):
    w = np.ones(c) if rng is None else rng.normal(size=c)
    return OneByOneHead(w, bias, pooling)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestActivationValues:
    def test_bell_peak_and_symmetry(self):
        v = np.linspace(-4, 4, 33)
        f = activation_value(Activation.GAUSS_BELL, v, 1.3)
        assert f[16] == 1.0
        np.testing.assert_allclose(f, f[::-1], atol=0)
        # brute-force pointwise
        expected = np.exp(-(v**2) / (2 * 1.3**2))
        np.testing.assert_allclose(f, expected, rtol=1e-15)

    def test_sigmoid_midpoint_and_range(self):
        v = np.linspace(-50, 50, 101)
        s = activation_value(Activation.LOGISTIC_SIGMOID, v, 2.0)
        assert s[50] == 0.5
        assert np.all((s > 0) & (s < 1))
        assert np.all(np.diff(s) >= 0)

    def test_integrated_bell_matches_quadrature(self):
        # adaptive quadrature of the bell itself is the oracle
        sigma = 0.8
        for v in [-2.0, -0.3, 0.0, 0.7, 2.5]:
            oracle, err = quad(lambda w: math.exp(-(w**2) / (2 * sigma**2)), -np.inf, v)
            assert err < 1e-7
            got = float(activation_value(Activation.INTEGRATED_BELL, np.array(v), sigma))
            assert abs(got - oracle) < 1e-8

    def test_relu(self):
        v = np.array([-2.0, 0.0, 3.5])
        np.testing.assert_array_equal(activation_value(Activation.RELU, v, 1.0), [0, 0, 3.5])


class TestActivationGrads:
    # central finite differences on scalar probes are the oracle
    @pytest.mark.parametrize("kind", list(Activation))
    def test_grad_v_matches_finite_difference(self, kind):
        sigma, h = 0.9, 1e-6
        for v in [-1.7, -0.2, 0.4, 2.1]:
            up = activation_value(kind, np.array(v + h), sigma)
            dn = activation_value(kind, np.array(v - h), sigma)
            numeric = float(up - dn) / (2 * h)
            value = activation_value(kind, np.array(v), sigma)
            analytic = float(activation_grad_v(kind, np.array(v), sigma, value))
            assert abs(numeric - analytic) < 1e-6

    @pytest.mark.parametrize(
        "kind",
        [Activation.GAUSS_BELL, Activation.LOGISTIC_SIGMOID, Activation.INTEGRATED_BELL],
    )
    def test_grad_logsigma_matches_finite_difference(self, kind):
        v, h = np.array(1.3), 1e-6
        for logsig in [-0.5, 0.0, 0.8]:
            up = activation_value(kind, v, math.exp(logsig + h))
            dn = activation_value(kind, v, math.exp(logsig - h))
            numeric = float(up - dn) / (2 * h)
            sigma = math.exp(logsig)
            value = activation_value(kind, v, sigma)
            analytic = float(activation_grad_logsigma(kind, v, sigma, value))
            assert abs(numeric - analytic) < 1e-6

    def test_integrated_bell_slope_is_bell_exactly(self):
        v = np.linspace(-3, 3, 41)
        sigma = 1.1
        value = activation_value(Activation.INTEGRATED_BELL, v, sigma)
        slope = activation_grad_v(Activation.INTEGRATED_BELL, v, sigma, value)
        bell = activation_value(Activation.GAUSS_BELL, v, sigma)
        np.testing.assert_array_equal(slope, bell)

    def test_relu_subgradient_zero_at_zero(self):
        g = activation_grad_v(Activation.RELU, np.array(0.0), 1.0, np.array(0.0))
        assert float(g) == 0.0


class TestSigmaLimits:
    def test_bell_tends_to_delta(self):
        sigmas = [1.0, 0.1, 0.01]
        for v in [0.5, -1.2]:
            vals = [float(activation_value(Activation.GAUSS_BELL, np.array(v), s)) for s in sigmas]
            assert vals[0] > vals[1] > vals[2]
            assert vals[2] < 1e-6
        at_peak = [float(activation_value(Activation.GAUSS_BELL, np.array(0.0), s)) for s in sigmas]
        assert at_peak == [1.0, 1.0, 1.0]

    def test_sigmoid_tends_to_heaviside(self):
        sigmas = [1.0, 0.1, 0.01]
        up = [float(activation_value(Activation.LOGISTIC_SIGMOID, np.array(0.4), s)) for s in sigmas]
        dn = [float(activation_value(Activation.LOGISTIC_SIGMOID, np.array(-0.4), s)) for s in sigmas]
        assert up[0] < up[1] < up[2] and up[2] > 1 - 1e-12
        assert dn[0] > dn[1] > dn[2] and dn[2] < 1e-12


class TestLonForward:
    def test_constant_image_bias_at_response_gives_unit_channel(self):
        c = 1.7
        kernels = np.full((1, 3, 3), 0.2)  # sum s = 1.8
        bias = np.array([[c * 1.8]])
        lay = make_lon(kernels, bias, np.array([[0.5]]), one_by_one(1))
        out, tape = lon_forward(lay, Image(np.full((6, 6), c)))
        np.testing.assert_allclose(tape.act, 1.0, atol=1e-12)

    def test_far_bias_gives_vanishing_channel(self):
        c, sigma = 1.7, 0.3
        kernels = np.full((1, 3, 3), 0.2)
        bias = np.array([[c * 1.8 + 10 * sigma]])
        lay = make_lon(kernels, bias, np.array([[sigma]]), one_by_one(1))
        _, tape = lon_forward(lay, Image(np.full((6, 6), c)))
        assert tape.act.max() <= math.exp(-50) * (1 + 1e-12)

    def test_quasi_interpolation_constant(self, rng):
        # summing bells over a regular grid with spacing db approximates
        # (1/db) * integral of the bell; the oracle is that dense sum
        img = rng.normal(size=(8, 8))
        sigma = 0.4
        db = sigma
        n = 48
        kernels = np.full((1, 1, 1), 1.0)
        lo = img.min() - 8 * sigma
        biases = (lo + db * np.arange(n))[:, None]
        assert biases[-1, 0] > img.max() + 8 * sigma - db
        lay = make_lon(kernels, biases, np.full((n, 1), sigma), one_by_one(n))
        _, tape = lon_forward(lay, Image(img))
        per_pixel = tape.act[0, :, 0].sum(axis=0)

        dense = np.arange(lo, biases[-1, 0], db / 4096)
        oracle = np.exp(-((dense - float(img[3, 3])) ** 2) / (2 * sigma**2)).sum() * (db / 4096) / db
        np.testing.assert_allclose(per_pixel, oracle, rtol=0.02)
        # and the closed form of the same quantity
        assert abs(oracle - sigma * math.sqrt(2 * math.pi) / db) < 0.02 * oracle

    def test_wrong_type_rejected(self, rng):
        lay = CnnLayer(np.zeros((1, 1, 1)), np.zeros((1, 1)), np.zeros((1, 1)),
                       one_by_one(1), Activation.RELU)
        with pytest.raises(TypeError):
            lon_forward(lay, Image(np.zeros((4, 4))))


class TestCnnForward:
    def test_constant_image_sigmoid_half(self):
        c = -0.6
        kernels = np.full((1, 3, 3), 0.1)
        lay = CnnLayer(kernels, np.array([[c * 0.9]]), np.log([[0.7]]),
                       one_by_one(1), Activation.LOGISTIC_SIGMOID)
        _, tape = cnn_forward(lay, Image(np.full((5, 5), c)))
        np.testing.assert_allclose(tape.act, 0.5, atol=1e-12)

    def test_relu_zero_on_nonnegative_image(self, rng):
        img = rng.uniform(0.0, 2.0, size=(6, 6))
        lay = CnnLayer(identity_kernel().taps[None], np.zeros((1, 1)), np.zeros((1, 1)),
                       one_by_one(1), Activation.RELU)
        _, tape = cnn_forward(lay, Image(img))
        np.testing.assert_array_equal(tape.act, 0.0)

    def test_integrated_bell_channel_matches_quadrature(self, rng):
        img = rng.normal(size=(4, 4))
        sigma, bias = 0.9, 0.2
        lay = CnnLayer(identity_kernel().taps[None], np.array([[bias]]),
                       np.log([[sigma]]), one_by_one(1), Activation.INTEGRATED_BELL)
        _, tape = cnn_forward(lay, Image(img))
        for y in range(4):
            for x in range(4):
                v = bias - img[y, x]
                oracle, err = quad(lambda w: math.exp(-(w**2) / (2 * sigma**2)), -np.inf, v)
                assert err < 1e-7
                assert abs(tape.act[0, 0, 0, y, x] - oracle) < 1e-8

    def test_gauss_bell_rejected(self):
        with pytest.raises(ValueError):
            CnnLayer(np.zeros((1, 1, 1)), np.zeros((1, 1)), np.zeros((1, 1)),
                     one_by_one(1), Activation.GAUSS_BELL)

    def test_lon_requires_bell(self):
        with pytest.raises(ValueError):
            LonLayer(np.zeros((1, 1, 1)), np.zeros((1, 1)), np.zeros((1, 1)),
                     one_by_one(1), Activation.RELU)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self, rng):
        lay = make_lon(rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 2)),
                       np.full((2, 2), 0.8), one_by_one(4, rng))
        out, tape = lon_forward(lay, Image(rng.normal(size=(6, 6))))
        grads, gx = lon_backward(lay, tape, Image(np.zeros_like(out.data)))
        for name in ("kernels", "biases", "log_sigmas", "head_weights", "head_bias"):
            np.testing.assert_array_equal(getattr(grads, name), 0.0)
        np.testing.assert_array_equal(gx.data, 0.0)

    def test_bias_grad_zero_at_bell_peak(self):
        # v = 0 everywhere, and the bell's slope at its peak is 0; dyadic
        # image and tap values keep the pre-activation exactly zero
        c = 1.5
        kernels = np.full((1, 3, 3), 0.25)
        lay = make_lon(kernels, np.array([[c * 2.25]]), np.array([[0.5]]), one_by_one(1))
        out, tape = lon_forward(lay, Image(np.full((6, 6), c)))
        grads, _ = lon_backward(lay, tape, Image(np.ones_like(out.data)))
        np.testing.assert_array_equal(grads.biases, 0.0)

    def test_relu_dead_region_zero_kernel_grads(self, rng):
        img = rng.uniform(0.5, 2.0, size=(6, 6))
        lay = CnnLayer(identity_kernel().taps[None], np.zeros((1, 1)), np.zeros((1, 1)),
                       one_by_one(1), Activation.RELU)
        out, tape = cnn_forward(lay, Image(img))
        grads, _ = cnn_backward(lay, tape, Image(np.ones_like(out.data)))
        np.testing.assert_array_equal(grads.kernels, 0.0)
        np.testing.assert_array_equal(grads.biases, 0.0)

    def test_upstream_shape_mismatch(self, rng):
        lay = make_lon(rng.normal(size=(1, 3, 3)), rng.normal(size=(1, 1)),
                       np.full((1, 1), 0.8), one_by_one(1))
        _, tape = lon_forward(lay, Image(rng.normal(size=(6, 6))))
        with pytest.raises(DimensionError):
            lon_backward(lay, tape, np.zeros((3, 3)))


class TestTapeReplay:
    def test_forward_is_reproducible_from_tape_inputs(self, rng):
        lay = make_lon(rng.normal(size=(2, 3, 3)), rng.normal(size=(3, 2)),
                       np.full((3, 2), 0.7), one_by_one(6, rng), smoother_sigma=1.0)
        x = rng.normal(size=(2, 8, 8))
        out, tape = forward_batch(lay, x)
        out2, tape2 = forward_batch(lay, tape.x)
        np.testing.assert_array_equal(out, out2)
        np.testing.assert_array_equal(tape.conv, tape2.conv)
        np.testing.assert_array_equal(tape.act, tape2.act)
        np.testing.assert_array_equal(tape.channels, tape2.channels)


class TestEmulation:
    def grid_layer(self, n, lo, hi, sigma):
        biases = np.linspace(lo, hi, n)[:, None]
        return make_lon(identity_kernel().taps[None].copy(), biases,
                        np.full((n, 1), sigma), one_by_one(n))

    def test_single_bin_with_explicit_spacing(self, rng):
        img = Image(rng.normal(size=(5, 5)))
        lay = self.grid_layer(1, 0.3, 0.3, 0.6)
        _, tape = lon_forward(lay, img)
        em = emulate_cnn_from_lon(lay, img, spacing=0.25)
        np.testing.assert_array_equal(em, tape.act[0] * 0.25)

    def test_cumulative_channels_monotone(self, rng):
        img = Image(rng.normal(size=(6, 6)))
        em = emulate_cnn_from_lon(self.grid_layer(16, -4.0, 4.0, 0.5), img)
        assert np.all(np.diff(em, axis=0) >= 0)

    def test_n64_matches_integrated_bell_within_one_percent(self, rng):
        img = Image(rng.normal(size=(8, 8)))
        sigma = 0.5
        lo = float(img.data.min()) - 6 * sigma
        hi = float(img.data.max()) + 6 * sigma
        lay = self.grid_layer(64, lo, hi, sigma)
        em = emulate_cnn_from_lon(lay, img)[-1, 0]
        cnn = CnnLayer(identity_kernel().taps[None].copy(), np.array([[hi]]),
                       np.log([[sigma]]), one_by_one(1), Activation.INTEGRATED_BELL)
        _, tape = cnn_forward(cnn, img)
        target = tape.act[0, 0, 0]
        # the integrated bell sweeps [0, sigma*sqrt(2*pi)]; that span is the
        # channel's value scale (at the top bias the map itself is saturated)
        scale = sigma * math.sqrt(2 * math.pi)
        assert np.abs(em - target).max() < 0.01 * scale

    def test_irregular_grid_rejected(self, rng):
        biases = np.array([[0.0], [0.5], [1.7]])
        lay = make_lon(identity_kernel().taps[None].copy(), biases,
                       np.full((3, 1), 0.5), one_by_one(3))
        with pytest.raises(ValueError):
            bin_spacing(lay)


class TestCountParams:
    def test_cnn_dense_formula(self, rng):
        lay = CnnLayer(rng.normal(size=(2, 3, 3)), np.zeros((1, 2)), np.zeros((1, 2)),
                       DenseHead(rng.normal(size=(1, 2, 128, 128)), np.zeros(1)),
                       Activation.LOGISTIC_SIGMOID)
        assert count_params(lay)["formula"] == 2 * 16384 + 2 * 9  # 32786

    def test_lon_dense_formula(self, rng):
        lay = make_lon(rng.normal(size=(2, 3, 3)), np.zeros((2, 2)), np.ones((2, 2)),
                       DenseHead(rng.normal(size=(1, 4, 128, 128)), np.zeros(1)))
        assert count_params(lay)["formula"] == 2 * 2 * 16384 + 2 * 9  # 65554

    def test_one_by_one_nets_land_in_small_range(self, rng):
        cnn = CnnLayer(rng.normal(size=(2, 3, 3)), np.zeros((1, 2)), np.zeros((1, 2)),
                       one_by_one(2, rng), Activation.LOGISTIC_SIGMOID)
        lon8 = make_lon(rng.normal(size=(2, 3, 3)), np.zeros((8, 2)), np.ones((8, 2)),
                        one_by_one(16, rng))
        counts = [count_params(cnn)["formula"], count_params(lon8)["formula"]]
        assert counts == [21, 35]
        assert all(21 <= c <= 35 for c in counts)

    def test_actual_counts_every_scalar(self, rng):
        lay = make_lon(rng.normal(size=(2, 3, 3)), np.zeros((8, 2)), np.ones((8, 2)),
                       one_by_one(16, rng))
        # 18 taps + 16 biases + 16 widths + 16 head weights + 1 head bias
        assert count_params(lay)["actual"] == 18 + 16 + 16 + 16 + 1
        frozen = make_lon(rng.normal(size=(2, 3, 3)), np.zeros((8, 2)), np.ones((8, 2)),
                          one_by_one(16, rng), sigma_learnable=False)
        assert count_params(frozen)["actual"] == 18 + 16 + 16 + 1


class TestPermutationSymmetry:
    def channel_perm(self, perm, n, m):
        return np.concatenate([i * m + perm for i in range(n)])

    def test_integer_case_bit_identical(self):
        # integer-valued ReLU network: every float op is exact, so any
        # structural asymmetry across the kernel index would show up bit-for-bit
        m, n = 3, 1
        kernels = np.arange(m * 9, dtype=float).reshape(m, 3, 3) - 12.0
        biases = np.array([[40.0, -3.0, 7.0]])
        w = np.array([2.0, -5.0, 3.0])
        x = np.arange(36, dtype=float).reshape(1, 6, 6) % 7
        lay = CnnLayer(kernels, biases, np.zeros((n, m)), OneByOneHead(w, 1.0),
                       Activation.RELU, boundary=BoundaryMode.ZERO_PAD)
        out, _ = forward_batch(lay, x)
        perm = np.array([2, 0, 1])
        lay2 = CnnLayer(kernels[perm], biases[:, perm], np.zeros((n, m)),
                        OneByOneHead(w[perm].copy(), 1.0), Activation.RELU,
                        boundary=BoundaryMode.ZERO_PAD)
        out2, _ = forward_batch(lay2, x)
        np.testing.assert_array_equal(out, out2)

    def test_float_case_agrees_to_rounding(self, rng):
        m, n = 3, 2
        kernels = rng.normal(size=(m, 3, 3))
        biases = rng.normal(size=(n, m))
        sigmas = np.full((n, m), 0.8)
        w = rng.normal(size=(n * m,))
        x = rng.normal(size=(2, 6, 6))
        lay = make_lon(kernels, biases, sigmas, OneByOneHead(w.copy(), 0.3))
        out, _ = forward_batch(lay, x)
        perm = np.array([1, 2, 0])
        lay2 = make_lon(kernels[perm], biases[:, perm], sigmas[:, perm],
                        OneByOneHead(w[self.channel_perm(perm, n, m)].copy(), 0.3))
        out2, _ = forward_batch(lay2, x)
        np.testing.assert_allclose(out2, out, rtol=1e-13, atol=1e-14)


class TestInitLayer:
    def test_bias_grid_regular_and_covering(self, rng):
        batch = rng.normal(size=(4, 16, 16))
        lay = init_layer("lon", n_kernels=2, n_bins=5, kernel_side=3,
                         activation=Activation.GAUSS_BELL, head_kind="one_by_one",
                         out_dim=1, image_shape=None, init_batch=batch, rng=rng)
        assert isinstance(lay, LonLayer)
        for j in range(2):
            steps = np.diff(lay.biases[:, j])
            assert steps.min() > 0
            np.testing.assert_allclose(steps, steps[0], rtol=1e-9)
            np.testing.assert_allclose(lay.sigmas[:, j], steps[0] / 2, rtol=1e-12)
        assert np.all(np.abs(lay.kernels) <= 1.0 / 9)

    def test_single_bin_sits_at_range_midpoint(self, rng):
        batch = rng.normal(size=(2, 12, 12))
        lay = init_layer("cnn", n_kernels=1, n_bins=1, kernel_side=3,
                         activation=Activation.LOGISTIC_SIGMOID, head_kind="one_by_one",
                         out_dim=1, image_shape=None, init_batch=batch, rng=rng)
        from lon.image import conv_same
        resp = conv_same(batch, lay.kernels[0], lay.boundary)
        np.testing.assert_allclose(lay.biases[0, 0], (resp.min() + resp.max()) / 2, rtol=1e-12)

    def test_dense_head_needs_image_shape(self, rng):
        with pytest.raises(ValueError):
            init_layer("lon", n_kernels=1, n_bins=2, kernel_side=3,
                       activation=Activation.GAUSS_BELL, head_kind="dense", out_dim=1,
                       image_shape=None, init_batch=rng.normal(size=(2, 8, 8)), rng=rng)

    def test_dense_head_size_mismatch_raises(self, rng):
        batch = rng.normal(size=(2, 8, 8))
        lay = init_layer("lon", n_kernels=1, n_bins=2, kernel_side=3,
                         activation=Activation.GAUSS_BELL, head_kind="dense", out_dim=3,
                         image_shape=(8, 8), init_batch=batch, rng=rng)
        with pytest.raises(DimensionError):
            forward_batch(lay, rng.normal(size=(1, 10, 10)))

    def test_same_seed_same_layer(self):
        batch = np.random.default_rng(5).normal(size=(2, 10, 10))
        a = init_layer("lon", n_kernels=2, n_bins=4, kernel_side=3,
                       activation=Activation.GAUSS_BELL, head_kind="one_by_one", out_dim=1,
                       image_shape=None, init_batch=batch, rng=np.random.default_rng(42))
        b = init_layer("lon", n_kernels=2, n_bins=4, kernel_side=3,
                       activation=Activation.GAUSS_BELL, head_kind="one_by_one", out_dim=1,
                       image_shape=None, init_batch=batch, rng=np.random.default_rng(42))
        np.testing.assert_array_equal(a.kernels, b.kernels)
        np.testing.assert_array_equal(a.biases, b.biases)
        np.testing.assert_array_equal(a.head.weights, b.head.weights)


class TestCheckpoint:
    def round_trip(self, lay, tmp_path):
        path = tmp_path / "model.lonc"
        save_checkpoint(lay, path)
        back = load_checkpoint(path)
        assert type(back) is type(lay)
        assert back.activation is lay.activation
        assert back.boundary is lay.boundary
        assert back.sigma_learnable == lay.sigma_learnable
        np.testing.assert_array_equal(back.kernels, lay.kernels)
        np.testing.assert_array_equal(back.biases, lay.biases)
        np.testing.assert_array_equal(back.log_sigmas, lay.log_sigmas)
        return back

    def test_one_by_one_round_trip(self, rng, tmp_path):
        lay = make_lon(rng.normal(size=(2, 3, 3)), rng.normal(size=(4, 2)),
                       np.full((4, 2), 0.6), one_by_one(8, rng, bias=0.7, pooling="mean"))
        back = self.round_trip(lay, tmp_path)
        np.testing.assert_array_equal(back.head.weights, lay.head.weights)
        assert back.head.bias == lay.head.bias
        assert back.head.pooling == "mean"

    def test_dense_round_trip(self, rng, tmp_path):
        lay = CnnLayer(rng.normal(size=(1, 3, 3)), rng.normal(size=(1, 1)),
                       np.zeros((1, 1)), DenseHead(rng.normal(size=(3, 1, 5, 5)),
                       rng.normal(size=3)), Activation.RELU,
                       boundary=BoundaryMode.ZERO_PAD, smoother_sigma=1.5)
        back = self.round_trip(lay, tmp_path)
        np.testing.assert_array_equal(back.head.weights, lay.head.weights)
        np.testing.assert_array_equal(back.head.bias, lay.head.bias)
        assert back.smoother_sigma == 1.5

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.lonc"
        p.write_bytes(b"XXXX" + bytes(64))
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_truncated(self, rng, tmp_path):
        lay = make_lon(rng.normal(size=(1, 3, 3)), rng.normal(size=(2, 1)),
                       np.full((2, 1), 0.6), one_by_one(2, rng))
        p = tmp_path / "x.lonc"
        save_checkpoint(lay, p)
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(ValueError):
            load_checkpoint(p)
