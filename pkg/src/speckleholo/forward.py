"""Coherent forward model: particle masks, angular-spectrum propagation,
multi-slice cascade, intensity formation and the camera model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import GeometryError, ParameterError, ShapeError
from .numerics import ComplexGrid, RealGrid
from .scene import OpticalConfig, Realization, Scene, sample_realization

MODES = ("multiplicative", "additive-weak")


@dataclass
class TransmissionField:
    grid: ComplexGrid
    mode: str = "multiplicative"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class PropagationKernel:
    """Angular-spectrum transfer function on the FFT frequency raster."""

    transfer: ComplexGrid
    z: float
    medium_wavelength: float

    @property
    def shape(self):
        return self.transfer.shape


@dataclass(frozen=True)
class SensorModel:
    """Camera response: gain, Poisson shot noise, Gaussian read noise, ADC.

    ``exposure_scale`` maps unit (ballistic) intensity to mean counts.
    """

    exposure_scale: float = 1000.0
    read_noise_sigma: float = 2.0
    shot_noise: bool = True
    bit_depth: int = 12
    seed: int = 0

    def __post_init__(self):
        if not self.exposure_scale > 0:
            raise ParameterError("exposure_scale must be > 0")
        if not self.read_noise_sigma >= 0:
            raise ParameterError("read_noise_sigma must be >= 0")
        if int(self.bit_depth) != self.bit_depth or not 1 <= self.bit_depth <= 16:
            raise ParameterError("bit_depth must be an integer in [1, 16]")

    @classmethod
    def noise_free(cls, exposure_scale=1.0, bit_depth=16):
        return cls(exposure_scale=exposure_scale, read_noise_sigma=0.0, shot_noise=False,
                   bit_depth=bit_depth)


def _hit_log_factors(realization: Realization, cfg: OpticalConfig, dn_species, ni_species):
    """Pixel indices and complex log-transmission of every (particle, pixel-center) hit.

    A pixel is modulated by a particle when its center lies within the
    particle's radius; the modulation is evaluated from the spherical chord
    at that pixel center.
    """
    W, H = cfg.grid_width, cfg.grid_height
    k0 = 2.0 * math.pi / cfg.wavelength
    r_px = 0.5 * realization.diameter / cfg.pixel_pitch
    if len(r_px) and 2.0 * r_px.max() > min(W, H):
        raise GeometryError(
            f"particle diameter {realization.diameter.max():.3g} m exceeds the "
            f"{W}x{H} px field of view")
    fx = np.rint(realization.x)
    fy = np.rint(realization.y)
    # offsets from the nearest pixel center; lattice points within r lie
    # within floor(r + 1/2) pixels of it
    ex = fx - realization.x
    ey = fy - realization.y
    half = np.floor(r_px + 0.5).astype(np.int64)
    pix_out, val_out = [], []
    for h in np.unique(half):
        sel = np.nonzero(half == h)[0]
        exs, eys, r2 = ex[sel], ey[sel], r_px[sel] ** 2
        for oy in range(-h, h + 1):
            for ox in range(-h, h + 1):
                rho2 = (exs + ox) ** 2 + (eys + oy) ** 2
                inside = np.nonzero(rho2 <= r2)[0]
                if not len(inside):
                    continue
                idx = sel[inside]
                omega = 2.0 * np.sqrt(r2[inside] - rho2[inside]) * cfg.pixel_pitch
                k = realization.species_index[idx]
                log_t = k0 * omega * (1j * dn_species[k] - ni_species[k])
                px = fx[idx].astype(np.int64) + ox
                py = fy[idx].astype(np.int64) + oy
                pix_out.append((py % H) * W + (px % W))
                val_out.append(log_t)
    if not pix_out:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.complex128)
    return np.concatenate(pix_out), np.concatenate(val_out)


def synthesize_transmission(realization: Realization, cfg: OpticalConfig,
                            mode: str = "multiplicative") -> TransmissionField:
    """Complex transmission of a particle realization.

    Each particle imposes amplitude ``exp(-k0 n_i w)`` and phase
    ``k0 (n_r - n_medium) w`` where ``w`` is the chord thickness through the
    sphere. ``multiplicative`` multiplies the per-particle masks (passive,
    overlaps compound); ``additive-weak`` sums ``(mask - 1)`` onto a unit
    background, which is the single-scattering superposition.
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    H, W = cfg.shape
    out = np.ones(H * W, dtype=np.complex128)
    if len(realization):
        n_r = np.array([s.n_r for s in realization.species])
        n_i = np.array([s.n_i for s in realization.species])
        pix, log_t = _hit_log_factors(realization, cfg, n_r - cfg.medium_index, n_i)
        if len(pix):
            if mode == "multiplicative":
                acc_re = np.bincount(pix, weights=log_t.real, minlength=H * W)
                acc_im = np.bincount(pix, weights=log_t.imag, minlength=H * W)
                out = np.exp(acc_re + 1j * acc_im)
            else:
                pert = np.exp(log_t) - 1.0
                out = out + np.bincount(pix, weights=pert.real, minlength=H * W)
                out = out + 1j * np.bincount(pix, weights=pert.imag, minlength=H * W)
    return TransmissionField(ComplexGrid(out.reshape(H, W), cfg.pixel_pitch), mode)


@lru_cache(maxsize=32)
def _transfer_array(shape, pitch, z, medium_wavelength):
    H, W = shape
    fy = np.fft.fftfreq(H, d=pitch)
    fx = np.fft.fftfreq(W, d=pitch)
    arg = 1.0 / medium_wavelength**2 - fy[:, None] ** 2 - fx[None, :] ** 2
    prop = arg >= 0
    kz = np.sqrt(np.where(prop, arg, 0.0))
    transfer = np.where(prop, np.exp(2j * np.pi * z * kz), 0.0)
    transfer.setflags(write=False)
    return transfer


def make_kernel(cfg: OpticalConfig, z: float | None = None) -> PropagationKernel:
    """Angular-spectrum transfer ``exp(2 pi i z sqrt(1/lambda_m^2 - f^2))``.

    ``lambda_m`` is the wavelength in the medium. Evanescent frequencies are
    set to zero. ``z`` defaults to the configured propagation distance.
    """
    if z is None:
        z = cfg.propagation_distance
    if not z >= 0:
        raise ParameterError(f"z must be >= 0, got {z}")
    t = _transfer_array(cfg.shape, float(cfg.pixel_pitch), float(z), float(cfg.medium_wavelength))
    return PropagationKernel(ComplexGrid(t, cfg.pixel_pitch), float(z), cfg.medium_wavelength)


def _as_complex_grid(S):
    return S.grid if isinstance(S, TransmissionField) else S


def propagate(S, k: PropagationKernel) -> ComplexGrid:
    """Free-space propagation by spectral multiplication."""
    g = _as_complex_grid(S)
    if g.shape != k.shape:
        raise ShapeError(f"field {g.shape} and kernel {k.shape} differ")
    if not np.isclose(g.pitch, k.transfer.pitch, rtol=1e-12, atol=0):
        raise ShapeError(f"field pitch {g.pitch} and kernel pitch {k.transfer.pitch} differ")
    return ComplexGrid(np.fft.ifft2(np.fft.fft2(g.data) * k.transfer.data), g.pitch)


def propagate_multislice(slices, k_dz: PropagationKernel,
                         k_final: PropagationKernel | None = None) -> ComplexGrid:
    """Beam-propagation cascade through a stack of thin masks.

    The field leaving slice ``i`` is propagated by ``k_dz`` and modulated by
    slice ``i+1``; after the last slice it is propagated once more by
    ``k_final`` (``k_dz`` if omitted) to the sensor plane.
    """
    slices = list(slices)
    if not slices:
        raise ParameterError("propagate_multislice needs at least one slice")
    for s in slices:
        if isinstance(s, TransmissionField) and s.mode != "multiplicative":
            raise ParameterError("multi-slice cascade requires multiplicative slices")
    field = _as_complex_grid(slices[0])
    for s in slices[1:]:
        field = propagate(field, k_dz)
        field = ComplexGrid(field.data * _as_complex_grid(s).data, field.pitch)
    return propagate(field, k_final if k_final is not None else k_dz)


def intensity(E: ComplexGrid) -> RealGrid:
    d = E.data
    return RealGrid(d.real**2 + d.imag**2, E.pitch, "intensity")


def capture_frame(I: RealGrid, sensor: SensorModel, frame_index: int = 0) -> RealGrid:
    """Digitize an intensity map into sensor counts.

    ``counts = rint(clip(gain*I + shot + read, 0, 2**bits - 1))`` with shot
    noise Poisson about ``gain*I``. The noise stream is keyed by
    ``(sensor.seed, frame_index)``.
    """
    mean = sensor.exposure_scale * I.data
    rng = np.random.default_rng(np.random.SeedSequence([int(sensor.seed), int(frame_index)]))
    signal = rng.poisson(mean).astype(np.float64) if sensor.shot_noise else mean
    if sensor.read_noise_sigma > 0:
        signal = signal + rng.normal(0.0, sensor.read_noise_sigma, size=mean.shape)
    full_scale = float(2 ** int(sensor.bit_depth) - 1)
    counts = np.rint(np.clip(signal, 0.0, full_scale))
    return RealGrid(counts, I.pitch, "intensity")


def slice_realization(realization: Realization, cfg: OpticalConfig, n_slices: int):
    """Partition particles into ``n_slices`` equal-depth layers, entry side first."""
    if n_slices < 1:
        raise ParameterError("n_slices must be >= 1")
    layer = np.minimum((realization.depth / cfg.chamber_thickness * n_slices).astype(np.int64),
                       n_slices - 1)
    return [realization.subset(layer == i) for i in range(n_slices)]


def simulate_field(scene: Scene, frame_index: int, mode: str = "multiplicative",
                   n_slices: int = 1) -> ComplexGrid:
    """Field at the sensor plane for one frame of ``scene``."""
    cfg = scene.config
    realization = sample_realization(scene, frame_index)
    k_z = make_kernel(cfg)
    if n_slices == 1:
        return propagate(synthesize_transmission(realization, cfg, mode), k_z)
    if mode != "multiplicative":
        raise ParameterError("multi-slice simulation requires multiplicative mode")
    layers = [synthesize_transmission(r, cfg, mode) for r in slice_realization(realization, cfg, n_slices)]
    k_dz = make_kernel(cfg, cfg.chamber_thickness / n_slices)
    return propagate_multislice(layers, k_dz, k_z)


def simulate_frame(scene: Scene, frame_index: int, sensor: SensorModel | None = None,
                   mode: str = "multiplicative", n_slices: int = 1) -> RealGrid:
    """Recorded frame: intensity, optionally digitized by ``sensor``."""
    I = intensity(simulate_field(scene, frame_index, mode, n_slices))
    if sensor is None:
        return I
    return capture_frame(I, sensor, frame_index)
