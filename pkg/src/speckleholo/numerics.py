"""Double-precision 2-D field numerics.

Grids are stored as ``(height, width)`` numpy arrays (row-major, so the flat
sample order is the usual raster order). Transforms use the convention
forward-unnormalized / inverse scaled by ``1/(width*height)``, which is the
numpy default and keeps correlation identities exact up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ParameterError, ShapeError

REAL_ROLES = ("intensity", "autocorr", "generic")


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class ComplexGrid:
    """Sampled complex field on a uniform raster.

    Attributes
    ----------
    data : ndarray of complex128, shape (height, width)
    pitch : float
        Sample spacing in meters.
    """

    data: np.ndarray
    pitch: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        _check_raster(self.data, self.pitch)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def copy(self) -> "ComplexGrid":
        return ComplexGrid(self.data.copy(), self.pitch)


@dataclass
class RealGrid:
    """Sampled real map (intensity, autocorrelation, or generic).

    Intensity grids must be non-negative everywhere.
    """

    data: np.ndarray
    pitch: float
    role: str = "generic"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        _check_raster(self.data, self.pitch)
        if self.role not in REAL_ROLES:
            raise ParameterError(f"unknown grid role {self.role!r}")
        if self.role == "intensity" and np.any(self.data < 0):
            raise ParameterError("intensity grid has negative samples")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def copy(self) -> "RealGrid":
        return RealGrid(self.data.copy(), self.pitch, self.role)


def _check_raster(data, pitch):
    if data.ndim != 2:
        raise DimensionError("ndim", data.ndim, "grids are two-dimensional")
    height, width = data.shape
    if width < 1:
        raise DimensionError("width", width, "must be at least 1")
    if height < 1:
        raise DimensionError("height", height, "must be at least 1")
    if not (np.isfinite(pitch) and pitch > 0):
        raise ParameterError(f"pitch must be positive, got {pitch!r}")


def _same_raster(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"grid shapes differ: {a.shape} vs {b.shape}")
    if not np.isclose(a.pitch, b.pitch, rtol=1e-12, atol=0.0):
        raise ShapeError(f"grid pitches differ: {a.pitch} vs {b.pitch}")


def fft2(g: ComplexGrid, direction: str = "forward", require_pow2: bool = False) -> ComplexGrid:
    """2-D discrete Fourier transform.

    ``direction="forward"`` is unnormalized; ``"inverse"`` divides by the
    sample count, so ``fft2(fft2(g), "inverse")`` reproduces ``g``.
    ``require_pow2`` rejects axes that are not powers of two.
    """
    if require_pow2:
        for axis, n in (("width", g.width), ("height", g.height)):
            if not _is_pow2(n):
                raise DimensionError(axis, n, "power of two required")
    if direction == "forward":
        out = np.fft.fft2(g.data)
    elif direction == "inverse":
        out = np.fft.ifft2(g.data)
    else:
        raise ParameterError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return ComplexGrid(out, g.pitch)


def cross_correlate(a, b, zero_pad: bool = False) -> ComplexGrid:
    """Circular cross-correlation ``r(t) = sum_x conj(a(x)) * b(x + t)``.

    Evaluated as ``ifft(conj(fft(a)) * fft(b))``. Lag zero sits at index
    ``(0, 0)``; negative lags wrap to the end of each axis. With
    ``zero_pad=True`` both inputs are padded to twice their size first, which
    yields the linear (non-wrapping) correlation on a doubled lag raster.

    Accepts ComplexGrid or RealGrid operands.
    """
    _same_raster(a, b)
    da, db = a.data, b.data
    if zero_pad:
        h, w = a.shape
        da = np.pad(da, ((0, h), (0, w)))
        db = np.pad(db, ((0, h), (0, w)))
    spec = np.conj(np.fft.fft2(da)) * np.fft.fft2(db)
    return ComplexGrid(np.fft.ifft2(spec), a.pitch)


def autocorrelate_real(x: np.ndarray) -> np.ndarray:
    """Circular autocorrelation of a real 2-D array (real-FFT route)."""
    spec = np.fft.rfft2(x)
    return np.fft.irfft2(spec.real**2 + spec.imag**2, s=x.shape)


def gaussian_kernel(ksize: int, sigma: float) -> np.ndarray:
    """Sampled, unit-sum 2-D Gaussian of odd side ``ksize``."""
    k1 = _gaussian_kernel_1d(ksize, sigma)
    return np.outer(k1, k1)


def _gaussian_kernel_1d(ksize, sigma):
    if int(ksize) != ksize or ksize < 1 or ksize % 2 == 0:
        raise ParameterError(f"ksize must be a positive odd integer, got {ksize!r}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma!r}")
    half = int(ksize) // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(t**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_blur(g: RealGrid, ksize: int, sigma: float) -> RealGrid:
    """Gaussian low-pass with half-sample reflective boundaries.

    The 2-D kernel is separable, so it is applied as two 1-D passes. With a
    symmetric unit-sum kernel and ``(d c b a | a b c d)`` reflection the
    image mean is preserved exactly.
    """
    k1 = _gaussian_kernel_1d(ksize, sigma)
    out = ndimage.correlate1d(g.data, k1, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k1, axis=1, mode="reflect")
    return RealGrid(out, g.pitch, "generic")


def lag_radius(height: int, width: int) -> np.ndarray:
    """Radius in pixels of each circular lag, zero lag at index (0, 0)."""
    dy = np.fft.fftfreq(height) * height
    dx = np.fft.fftfreq(width) * width
    return np.hypot(dy[:, None], dx[None, :])


@dataclass
class RadialProfile:
    """Per-bin radius (bin center, pixels), mean value and pixel count.

    Empty bins carry ``nan`` as their mean and a count of zero.
    """

    radius: np.ndarray
    mean: np.ndarray
    count: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return self.count == 0


def radial_profile(g: RealGrid, n_bins: int) -> RadialProfile:
    """Azimuthal average over circular lag radius.

    Bin ``i`` covers radii in ``[i*r_max/n_bins, (i+1)*r_max/n_bins)``; the
    pixel(s) at exactly ``r_max`` are folded into the last bin.
    """
    if int(n_bins) != n_bins or n_bins < 1:
        raise ParameterError(f"n_bins must be a positive integer, got {n_bins!r}")
    n_bins = int(n_bins)
    r = lag_radius(g.height, g.width)
    r_max = r.max()
    edges = np.arange(n_bins + 1) * (r_max / n_bins) if r_max > 0 else np.zeros(n_bins + 1)
    if r_max > 0:
        idx = np.floor(r / r_max * n_bins).astype(np.int64)
        idx = np.minimum(idx, n_bins - 1)
    else:
        idx = np.zeros(r.shape, dtype=np.int64)
    count = np.bincount(idx.ravel(), minlength=n_bins)
    total = np.bincount(idx.ravel(), weights=g.data.ravel(), minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return RadialProfile(centers, mean, count)
