import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgpnet import fft, oracle
from sgpnet import tensor as tc


@pytest.mark.parametrize("n", list(range(1, 41)) + [64, 97, 128, 210])
def test_fft_matches_direct_sum(n, rng):
    x = rng.standard_normal((3, n)) + 1j * rng.standard_normal((3, n))
    k = np.arange(n)
    dft = np.exp(-2j * np.pi * np.outer(k, k) / n)
    np.testing.assert_allclose(fft.fft(x), x @ dft.T, atol=1e-10 * n)
    np.testing.assert_allclose(fft.ifft(fft.fft(x)), x, atol=1e-12)


def test_fft_along_other_axis(rng):
    x = rng.standard_normal((6, 5, 4))
    a = fft.fft(x, axis=0)
    b = np.moveaxis(fft.fft(np.moveaxis(x, 0, -1)), -1, 0)
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_rfft2_constant_map():
    X = tc.rfft2(np.full((1, 1, 4, 4), 2.5))
    assert X.shape == (1, 1, 4, 3)
    assert X[0, 0, 0, 0] == pytest.approx(10.0)
    X[0, 0, 0, 0] = 0
    assert np.abs(X).max() < 1e-13


def test_rfft2_impulse_is_flat():
    x = np.zeros((5, 6))
    x[0, 0] = 1.0
    np.testing.assert_allclose(np.abs(tc.rfft2(x)), 1 / math.sqrt(30), atol=1e-14)


def test_rfft2_matches_direct_dft(rng):
    x = rng.standard_normal((8, 8))
    ref = oracle.naive_dft2(x)
    assert np.abs(tc.rfft2(x) - ref).max() / np.abs(ref).max() <= 1e-9


def test_roundtrip_batch(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    assert np.abs(tc.irfft2(tc.rfft2(x), 8) - x).max() <= 1e-10


def test_checkerboard_survives_roundtrip():
    i, j = np.indices((6, 6))
    board = ((i + j) % 2).astype(float) * 2 - 1
    X = tc.rfft2(board)
    assert abs(X[3, 3]) == pytest.approx(6.0)
    np.testing.assert_allclose(tc.irfft2(X, 6), board, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 2**16))
def test_parseval_and_roundtrip_any_shape(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((h, w))
    X = tc.rfft2(x)
    assert tc.spectral_energy(X, w) == pytest.approx(float(np.sum(x * x)), rel=1e-10, abs=1e-12)
    np.testing.assert_allclose(tc.irfft2(X, w), x, atol=1e-10)


def test_irfft2_rejects_wrong_width():
    with pytest.raises(tc.ShapeError):
        tc.irfft2(np.zeros((4, 3), dtype=complex), 8)


def test_half_spectrum_weights():
    np.testing.assert_array_equal(tc.half_spectrum_weights(8), [1, 2, 2, 2, 1])
    np.testing.assert_array_equal(tc.half_spectrum_weights(7), [1, 2, 2, 2])


def test_freq_grid_convention():
    g = tc.freq_grid(4, 4)
    np.testing.assert_allclose(g.nu_y, [0, 0.25, -0.5, -0.25])
    np.testing.assert_allclose(g.nu_x, [0, 0.25, 0.5])
    assert g.rho[1, 1] == pytest.approx(0.35355, abs=1e-5)
    assert g.rho[0, 0] == 0 and (g.rho >= 0).all()


@pytest.mark.parametrize("h,w", [(5, 7), (6, 9), (2, 2)])
def test_freq_grid_matches_fftfreq(h, w):
    g = tc.freq_grid(h, w)
    np.testing.assert_allclose(g.nu_y, np.fft.fftfreq(h))
    np.testing.assert_allclose(g.nu_x, np.fft.rfftfreq(w))


def test_resize_bilinear_monotone_columns():
    m = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = tc.resize_bilinear(m, (2, 4))
    assert out.shape == (2, 4)
    assert (np.diff(out, axis=1) >= 0).all()
    assert out[0, 0] == 0 and out[0, -1] == 1
    np.testing.assert_allclose(out[0], out[1])


def test_resize_identity_and_constant(rng):
    m = rng.standard_normal((3, 5, 7))
    np.testing.assert_allclose(tc.resize_bilinear(m, (5, 7)), m)
    np.testing.assert_allclose(tc.resize_bilinear(np.full((4, 4), 2.0), (9, 3)), 2.0)


def test_quantile_examples():
    assert tc.quantile([1, 2, 3, 4], 0.5) == 2.5
    assert tc.quantile([7.0], 0.3) == 7.0
    with pytest.raises(ValueError):
        tc.quantile([], 0.5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0, 1))
def test_quantile_matches_sort_oracle(xs, q):
    assert tc.quantile(xs, q) == pytest.approx(oracle.quantile_sorted(xs, q), abs=1e-9)


def test_softmax_scaled_example():
    w = tc.softmax_scaled([0.0, 1.0, 0.0], [20.0, 20.0, 20.0])
    side = math.exp(-20) / (1 + 2 * math.exp(-20))
    np.testing.assert_allclose(w, [side, 1 - 2 * side, side], rtol=1e-12)
    assert w.sum() == pytest.approx(1.0)


def test_softmax_large_scale_is_one_hot():
    w = tc.softmax_scaled([0.1, 0.3, 0.2], [1e4] * 3)
    np.testing.assert_allclose(w, [0, 1, 0], atol=1e-12)


def test_conv1x1_per_pixel(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    W = rng.standard_normal((6, 3))
    b = rng.standard_normal(6)
    out = tc.conv1x1(x, W, b)
    assert out.shape == (2, 6, 4, 5)
    np.testing.assert_allclose(out[1, :, 2, 3], W @ x[1, :, 2, 3] + b)


def test_sigmoid_softplus_stable():
    x = np.array([-800.0, -30, 0, 30, 800])
    s = tc.sigmoid(x)
    assert np.isfinite(s).all() and s[2] == 0.5 and s[0] == 0 and s[-1] == 1
    assert np.isfinite(tc.softplus(x)).all()
    for y in [1e-6, 0.25, 3.0, 40.0]:
        assert tc.softplus(tc.softplus_inv(y)) == pytest.approx(y, rel=1e-12)
