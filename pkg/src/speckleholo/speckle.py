"""Intensity autocorrelation statistics, per-species basis kernels and
speckle feature descriptors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .forward import TransmissionField, propagate, simulate_frame
from .numerics import RealGrid, autocorrelate_real, lag_radius
from .scene import OpticalConfig, Population, Scene, Species

C_REF = 1.0  # mg/mL
DEFAULT_PROFILE_BINS = 32


@dataclass
class AutocorrMap:
    """Lag-domain map, zero lag at index (0, 0)."""

    grid: RealGrid
    n_frames_averaged: int = 1
    mean_subtracted: bool = True
    normalized: bool = False

    @property
    def data(self) -> np.ndarray:
        return self.grid.data

    @property
    def zero_lag(self) -> float:
        return float(self.grid.data[0, 0])

    def scaled(self, factor: float) -> "AutocorrMap":
        return AutocorrMap(RealGrid(self.grid.data * factor, self.grid.pitch, "autocorr"),
                           self.n_frames_averaged, self.mean_subtracted, self.normalized)


def _prepare(I, subtract_mean, normalize):
    x = np.asarray(I.data, dtype=np.float64)
    m = x.mean()
    if subtract_mean:
        x = x - m
    if normalize:
        if m <= 0:
            raise ParameterError("cannot normalize a frame with non-positive mean intensity")
        x = x / m
    return x


def intensity_autocorr(I: RealGrid, subtract_mean: bool = True,
                       normalize: bool = False) -> AutocorrMap:
    """Circular autocorrelation of one intensity frame.

    With ``subtract_mean`` the frame mean is removed first, so the zero-lag
    value is ``sum((I - mean)**2)``. ``normalize`` additionally divides the
    frame by its mean, making the map independent of exposure gain.
    """
    x = _prepare(I, subtract_mean, normalize)
    r = autocorrelate_real(x)
    return AutocorrMap(RealGrid(r, I.pitch, "autocorr"), 1, subtract_mean, normalize)


def ensemble_autocorr(frames, subtract_mean: bool = True, normalize: bool = False) -> AutocorrMap:
    """Arithmetic mean of per-frame autocorrelations.

    ``frames`` may be any iterable of RealGrid, so frames can be generated
    lazily.
    """
    total = None
    n = 0
    shape = pitch = None
    for I in frames:
        if shape is None:
            shape, pitch = I.shape, I.pitch
        elif I.shape != shape:
            raise ShapeError(f"frame {n} has shape {I.shape}, expected {shape}")
        r = autocorrelate_real(_prepare(I, subtract_mean, normalize))
        total = r if total is None else total + r
        n += 1
    if n == 0:
        raise ParameterError("ensemble_autocorr needs at least one frame")
    return AutocorrMap(RealGrid(total / n, pitch, "autocorr"), n, subtract_mean, normalize)


@dataclass
class BasisKernel:
    """Unit-abundance ensemble autocorrelation response of one species."""

    species: Species
    map: AutocorrMap
    n_mc_frames: int
    config_hash: str
    seed: int
    c_ref: float = C_REF
    mode: str = "multiplicative"
    diameter_cv: float = 0.05
    n_slices: int = 1

    @property
    def data(self) -> np.ndarray:
        return self.map.data


def species_basis(species: Species, cfg: OpticalConfig, n_mc_frames: int, seed: int,
                  c_ref: float = C_REF, mode: str = "multiplicative", diameter_cv: float = 0.05,
                  normalize: bool = True, n_slices: int = 1) -> BasisKernel:
    """Monte-Carlo basis kernel.

    Simulates ``n_mc_frames`` noise-free frames of a single-species scene at
    ``c_ref`` mg/mL, averages their mean-subtracted autocorrelations and
    stores the result per unit abundance.
    """
    if int(n_mc_frames) != n_mc_frames or n_mc_frames < 1:
        raise ParameterError("n_mc_frames must be >= 1")
    if not c_ref > 0:
        raise ParameterError("c_ref must be > 0")
    scene = Scene(cfg, (Population(species, c_ref, diameter_cv),), master_seed=seed,
                  n_frames=int(n_mc_frames))
    frames = (simulate_frame(scene, i, None, mode, n_slices) for i in range(scene.n_frames))
    m = ensemble_autocorr(frames, subtract_mean=True, normalize=normalize)
    return BasisKernel(species, m.scaled(1.0 / c_ref), int(n_mc_frames), cfg.config_hash(),
                       int(seed), c_ref, mode, diameter_cv, n_slices)


def verify_field_identity(S, k) -> float:
    """Residual of the spectral factorization of the propagated field's autocorrelation.

    Compares ``|F(propagate(S, k))|**2`` against ``|F(S)|**2 * |H|**2`` and
    returns ``max|lhs - rhs| / max|rhs|`` (0 when both vanish).
    """
    g = S.grid if isinstance(S, TransmissionField) else S
    E = propagate(g, k)
    lhs = np.abs(np.fft.fft2(E.data)) ** 2
    rhs = np.abs(np.fft.fft2(g.data)) ** 2 * np.abs(k.transfer.data) ** 2
    scale = np.max(np.abs(rhs))
    diff = np.max(np.abs(lhs - rhs))
    if scale == 0:
        return float(diff)
    return float(diff / scale)


def verify_correlation_identity(S, k) -> float:
    """Lag-domain form: ``E*E`` against ``(S*S)`` filtered by ``(h*h)``.

    Returns ``max|lhs - rhs| / |lhs(0)|``.
    """
    g = S.grid if isinstance(S, TransmissionField) else S
    E = propagate(g, k)
    lhs = np.fft.ifft2(np.abs(np.fft.fft2(E.data)) ** 2)
    ss = np.fft.ifft2(np.abs(np.fft.fft2(g.data)) ** 2)
    hh = np.fft.ifft2(np.abs(k.transfer.data) ** 2)
    rhs = np.fft.ifft2(np.fft.fft2(ss) * np.fft.fft2(hh))
    scale = abs(lhs[0, 0])
    diff = np.max(np.abs(lhs - rhs))
    return float(diff / scale) if scale > 0 else float(diff)


@dataclass
class SpeckleFeatures:
    contrast: float
    correlation_length: float | None  # meters; None when not reached
    radial_profile: np.ndarray
    mean_intensity: float
    degenerate: bool = False

    def to_vector(self, pitch: float) -> np.ndarray:
        """Fixed-length numeric vector (correlation length in pixels, 0 if absent)."""
        cl = 0.0 if self.correlation_length is None else self.correlation_length / pitch
        return np.concatenate([[self.contrast, cl], self.radial_profile])


def integer_radial_profile(data: np.ndarray, n_bins: int) -> np.ndarray:
    """Mean over lags with ``round(radius) == i`` for ``i < n_bins``."""
    r = np.rint(lag_radius(*data.shape)).astype(np.int64).ravel()
    keep = r < n_bins
    count = np.bincount(r[keep], minlength=n_bins)
    total = np.bincount(r[keep], weights=data.ravel()[keep], minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def extract_features(m: AutocorrMap, mean_intensity: float, std_intensity: float,
                     n_bins: int = DEFAULT_PROFILE_BINS) -> SpeckleFeatures:
    """Speckle descriptors of a mean-subtracted autocorrelation map.

    The correlation length is the first radius where the azimuthally averaged
    map falls below ``zero_lag / e``, linearly interpolated between integer
    radii. An all-zero (or non-positive zero-lag) map is reported as
    degenerate rather than raising.
    """
    contrast = float(std_intensity / mean_intensity) if mean_intensity > 0 else 0.0
    zero = m.zero_lag
    if not zero > 0:
        return SpeckleFeatures(contrast, None, np.zeros(n_bins), float(mean_intensity), True)
    prof = integer_radial_profile(m.data, max(n_bins, 2)) / zero
    prof = np.nan_to_num(prof, nan=0.0)
    threshold = 1.0 / math.e
    below = np.nonzero(prof < threshold)[0]
    if len(below):
        i = int(below[0])
        p0, p1 = prof[i - 1], prof[i]
        radius = (i - 1) + (p0 - threshold) / (p0 - p1)
        corr_len = radius * m.grid.pitch
    else:
        corr_len = None
    return SpeckleFeatures(contrast, corr_len, prof[:n_bins], float(mean_intensity), False)


def informative_mask(shape, r_min: float = 1.0, r_max: float = 5.0) -> np.ndarray:
    """Boolean lag mask for the annulus ``r_min <= radius <= r_max`` (pixels)."""
    r = lag_radius(*shape)
    return (r >= r_min) & (r <= r_max)
