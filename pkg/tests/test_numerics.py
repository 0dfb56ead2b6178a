import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speckleholo.errors import DimensionError, ParameterError, ShapeError
from speckleholo.numerics import (ComplexGrid, RealGrid, cross_correlate, fft2, gaussian_blur,
                                  gaussian_kernel, lag_radius, radial_profile)


def rand_complex(shape, seed):
    rng = np.random.default_rng(seed)
    return ComplexGrid(rng.normal(size=shape) + 1j * rng.normal(size=shape), 1e-6)


def brute_correlation(a, b):
    """Direct O(N^2) circular correlation r(t) = sum_x conj(a(x)) b(x+t)."""
    H, W = a.shape
    out = np.zeros((H, W), dtype=complex)
    for ty in range(H):
        for tx in range(W):
            s = 0j
            for y in range(H):
                for x in range(W):
                    s += np.conj(a[y, x]) * b[(y + ty) % H, (x + tx) % W]
            out[ty, tx] = s
    return out


class TestGridTypes:
    def test_shape_properties(self):
        g = ComplexGrid(np.zeros((4, 8)), 2e-6)
        assert (g.width, g.height) == (8, 4)

    def test_rejects_bad_pitch(self):
        with pytest.raises(ParameterError):
            RealGrid(np.zeros((2, 2)), 0.0)

    def test_rejects_non_2d(self):
        with pytest.raises(DimensionError):
            ComplexGrid(np.zeros(4), 1.0)

    def test_intensity_must_be_nonnegative(self):
        with pytest.raises(ParameterError):
            RealGrid(-np.ones((2, 2)), 1.0, "intensity")


class TestFFT:
    def test_zeros(self):
        out = fft2(ComplexGrid(np.zeros((4, 4)), 1.0))
        assert np.all(out.data == 0)

    def test_delta_to_constant(self):
        d = np.zeros((2, 2))
        d[0, 0] = 1
        assert np.allclose(fft2(ComplexGrid(d, 1.0)).data, 1.0)

    def test_round_trip(self):
        g = rand_complex((8, 8), 3)
        back = fft2(fft2(g), "inverse")
        assert np.max(np.abs(back.data - g.data)) / np.max(np.abs(g.data)) < 1e-12

    def test_pow2_requirement_names_axis(self):
        with pytest.raises(DimensionError, match="width"):
            fft2(ComplexGrid(np.zeros((8, 6)), 1.0), require_pow2=True)
        with pytest.raises(DimensionError, match="height"):
            fft2(ComplexGrid(np.zeros((6, 8)), 1.0), require_pow2=True)

    def test_non_pow2_exact(self):
        g = rand_complex((6, 10), 1)
        assert np.allclose(fft2(fft2(g), "inverse").data, g.data, rtol=0, atol=1e-12)

    def test_bad_direction(self):
        with pytest.raises(ParameterError):
            fft2(rand_complex((2, 2), 0), "sideways")

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 256), st.integers(1, 256), st.integers(0, 2**32 - 1))
    def test_parseval(self, h, w, seed):
        g = rand_complex((h, w), seed)
        lhs = np.sum(np.abs(g.data) ** 2)
        rhs = np.sum(np.abs(fft2(g).data) ** 2) / (h * w)
        assert abs(lhs - rhs) / lhs < 1e-10


class TestCrossCorrelate:
    def test_delta(self):
        d = np.zeros((4, 4))
        d[0, 0] = 1
        g = ComplexGrid(d, 1.0)
        r = cross_correlate(g, g).data
        assert abs(r[0, 0] - 1) < 1e-12
        r[0, 0] = 0
        assert np.max(np.abs(r)) < 1e-12

    def test_constant(self):
        c, n = 1.5, 16
        g = ComplexGrid(np.full((4, 4), c), 1.0)
        assert np.allclose(cross_correlate(g, g).data, n * c**2, rtol=1e-12)

    def test_matches_brute_force_4x4(self):
        a, b = rand_complex((4, 4), 10), rand_complex((4, 4), 11)
        assert np.max(np.abs(cross_correlate(a, b).data - brute_correlation(a.data, b.data))) < 1e-10

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_matches_brute_force_small(self, h, w, seed):
        a, b = rand_complex((h, w), seed), rand_complex((h, w), seed + 1)
        assert np.max(np.abs(cross_correlate(a, b).data - brute_correlation(a.data, b.data))) < 1e-10

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 64), st.integers(2, 64), st.integers(0, 2**32 - 1))
    def test_autocorr_zero_lag_and_hermitian(self, h, w, seed):
        a = rand_complex((h, w), seed)
        r = cross_correlate(a, a).data
        energy = np.sum(np.abs(a.data) ** 2)
        assert abs(r[0, 0] - energy) / energy < 1e-10
        assert abs(r[0, 0].imag) < 1e-9 * energy
        # r(-t) == conj(r(t)) on the circular raster
        neg = np.roll(np.flip(r, axis=(0, 1)), 1, axis=(0, 1))
        assert np.allclose(neg, np.conj(r), atol=1e-9 * energy)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cross_correlate(rand_complex((4, 4), 0), rand_complex((4, 8), 0))

    def test_zero_pad_gives_linear_correlation(self):
        a = rand_complex((4, 4), 5)
        r = cross_correlate(a, a, zero_pad=True).data
        assert r.shape == (8, 8)
        # a one-row shift by 3 overlaps only one row in the linear case
        expect = np.sum(np.conj(a.data[0, :]) * a.data[3, :])
        assert abs(r[3, 0] - expect) < 1e-10


class TestGaussianBlur:
    def test_constant(self):
        g = RealGrid(np.full((9, 13), 7.0), 1.0)
        for ksize, sigma in ((3, 0.5), (7, 1.5), (11, 4.0)):
            assert np.allclose(gaussian_blur(g, ksize, sigma).data, 7.0, rtol=0, atol=1e-13)

    def test_delta_center_weight(self):
        d = np.zeros((7, 7))
        d[3, 3] = 1.0
        out = gaussian_blur(RealGrid(d, 1.0), 3, 1.0).data
        w1 = 1.0 / (1.0 + 2.0 * np.exp(-0.5))  # centre of normalized 1-D kernel
        assert abs(out[3, 3] - w1**2) < 1e-15
        assert abs(gaussian_kernel(3, 1.0)[1, 1] - w1**2) < 1e-15

    def test_ksize_one_identity(self):
        g = RealGrid(np.random.default_rng(0).random((5, 6)), 1.0)
        assert np.array_equal(gaussian_blur(g, 1, 2.0).data, g.data)

    def test_even_ksize_rejected(self):
        with pytest.raises(ParameterError):
            gaussian_blur(RealGrid(np.zeros((4, 4)), 1.0), 4, 1.0)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ParameterError):
            gaussian_blur(RealGrid(np.zeros((4, 4)), 1.0), 3, 0.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(4, 40), st.integers(4, 40), st.sampled_from([1, 3, 5, 7]),
           st.floats(0.3, 3.0), st.integers(0, 2**32 - 1))
    def test_mean_preserved(self, h, w, ksize, sigma, seed):
        g = RealGrid(np.random.default_rng(seed).random((h, w)) + 0.5, 1.0)
        m0, m1 = g.data.mean(), gaussian_blur(g, ksize, sigma).data.mean()
        assert abs(m1 - m0) / m0 < 1e-12


class TestRadialProfile:
    def test_monotone_for_radius_map(self):
        r = lag_radius(32, 32)
        prof = radial_profile(RealGrid(r, 1.0), 8)
        means = prof.mean[~prof.empty]
        assert np.all(np.diff(means) > 0)

    def test_constant(self):
        prof = radial_profile(RealGrid(np.full((16, 16), 3.25), 1.0), 10)
        assert np.allclose(prof.mean[~prof.empty], 3.25)

    def test_empty_bins_are_nan(self):
        prof = radial_profile(RealGrid(np.ones((4, 4)), 1.0), 40)
        assert prof.empty.any()
        assert np.all(np.isnan(prof.mean[prof.empty]))

    def test_matches_per_pixel_binning(self):
        rng = np.random.default_rng(7)
        data = rng.random((8, 8))
        n_bins = 5
        prof = radial_profile(RealGrid(data, 1.0), n_bins)
        # independent binning loop with explicit minimum-image lags
        radii = np.zeros((8, 8))
        for i in range(8):
            for j in range(8):
                dy = i if i <= 4 else i - 8
                dx = j if j <= 4 else j - 8
                radii[i, j] = np.sqrt(dy * dy + dx * dx)
        r_max = radii.max()
        sums, counts = np.zeros(n_bins), np.zeros(n_bins)
        for i in range(8):
            for j in range(8):
                b = min(int(radii[i, j] / r_max * n_bins), n_bins - 1)
                sums[b] += data[i, j]
                counts[b] += 1
        expect = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        assert np.array_equal(prof.count, counts.astype(int))
        assert np.allclose(prof.mean, expect, equal_nan=True, rtol=0, atol=1e-14)

    def test_rejects_zero_bins(self):
        with pytest.raises(ParameterError):
            radial_profile(RealGrid(np.ones((4, 4)), 1.0), 0)
