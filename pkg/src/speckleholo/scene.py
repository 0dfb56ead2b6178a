"""Optical configuration, particle populations and realization sampling."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ParameterError

# 1 mg/mL is 1 kg/m^3
MG_PER_ML_TO_KG_PER_M3 = 1.0

SENSOR_WIDTH = 2464
SENSOR_HEIGHT = 2056


@dataclass(frozen=True)
class OpticalConfig:
    """Illumination, sampling and geometry of the simulated instrument.

    All lengths are in meters. ``chamber_thickness`` is the depth of the
    illuminated suspension slab.
    """

    wavelength: float = 532e-9
    pixel_pitch: float = 3.45e-6
    grid_width: int = 256
    grid_height: int = 256
    propagation_distance: float = 1e-3
    medium_index: float = 1.33
    chamber_thickness: float = 1e-3

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ParameterError(f"wavelength must be > 0, got {self.wavelength}")
        if not self.pixel_pitch > 0:
            raise ParameterError(f"pixel_pitch must be > 0, got {self.pixel_pitch}")
        if int(self.grid_width) != self.grid_width or self.grid_width < 1:
            raise ParameterError(f"grid_width must be a positive integer, got {self.grid_width}")
        if int(self.grid_height) != self.grid_height or self.grid_height < 1:
            raise ParameterError(f"grid_height must be a positive integer, got {self.grid_height}")
        if not self.propagation_distance >= 0:
            raise ParameterError(f"propagation_distance must be >= 0, got {self.propagation_distance}")
        if not self.medium_index >= 1:
            raise ParameterError(f"medium_index must be >= 1, got {self.medium_index}")
        if not self.chamber_thickness > 0:
            raise ParameterError(f"chamber_thickness must be > 0, got {self.chamber_thickness}")

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.grid_height), int(self.grid_width))

    @property
    def fov_area(self) -> float:
        return (self.grid_width * self.pixel_pitch) * (self.grid_height * self.pixel_pitch)

    @property
    def medium_wavelength(self) -> float:
        return self.wavelength / self.medium_index

    def with_grid(self, width: int, height: int) -> "OpticalConfig":
        return replace(self, grid_width=int(width), grid_height=int(height))

    def config_hash(self) -> str:
        """SHA-256 over every physics-relevant field, canonical JSON encoded."""
        payload = {k: (float(v) if isinstance(v, float) else v) for k, v in asdict(self).items()}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def sensor_config(**overrides) -> OpticalConfig:
    """Full 2464x2056 sensor raster at the default optics."""
    base = dict(grid_width=SENSOR_WIDTH, grid_height=SENSOR_HEIGHT)
    base.update(overrides)
    return OpticalConfig(**base)


def desk_config(**overrides) -> OpticalConfig:
    """Thin-cell 256x256 raster used for desk-scale studies.

    A 5 um slab keeps 500 nm polymer beads weakly scattering up to a few
    mg/mL; the default 1 mm slab puts them deep in the multiple-scattering
    regime. The 0.2 mm sensor distance keeps the basis maps of differently
    sized beads well separated at 1-5 px lags.
    """
    base = dict(chamber_thickness=5e-6, propagation_distance=2e-4)
    base.update(overrides)
    return OpticalConfig(**base)


@dataclass(frozen=True)
class Species:
    """Optical and material identity of one particle type."""

    name: str
    n_r: float
    n_i: float
    diameter: float
    mass_density: float

    def __post_init__(self):
        if not self.name:
            raise ParameterError("species name must be non-empty")
        if not self.n_r > 0:
            raise ParameterError(f"{self.name}: n_r must be > 0")
        if not self.n_i >= 0:
            raise ParameterError(f"{self.name}: n_i must be >= 0")
        if not self.diameter > 0:
            raise ParameterError(f"{self.name}: diameter must be > 0")
        if not self.mass_density > 0:
            raise ParameterError(f"{self.name}: mass_density must be > 0")

    @property
    def complex_index(self) -> complex:
        return complex(self.n_r, self.n_i)


# Approximate bulk optical constants near 532 nm and bulk densities (kg/m^3).
MATERIALS = {
    "PS": (1.598, 0.0, 1050.0),
    "PMMA": (1.494, 0.0, 1180.0),
    "PLGA": (1.470, 0.0, 1340.0),
    "TiO2": (2.550, 0.0, 3900.0),
    "Au": (0.540, 2.140, 19300.0),
    "diamond": (2.420, 0.0, 3510.0),
}


def make_species(material: str, diameter: float, name: str | None = None) -> Species:
    """Species from the built-in material table, e.g. ``make_species("PS", 500e-9)``."""
    try:
        n_r, n_i, rho = MATERIALS[material]
    except KeyError:
        raise ParameterError(f"unknown material {material!r}; known: {sorted(MATERIALS)}") from None
    if name is None:
        name = f"{material}-{round(diameter * 1e9)}nm"
    return Species(name, n_r, n_i, diameter, rho)


@dataclass(frozen=True)
class Population:
    species: Species
    abundance: float  # mg/mL
    diameter_cv: float = 0.05

    def __post_init__(self):
        if not self.abundance >= 0:
            raise ParameterError(f"{self.species.name}: abundance must be >= 0")
        if not 0 <= self.diameter_cv < 1:
            raise ParameterError(f"{self.species.name}: diameter_cv must lie in [0, 1)")


@dataclass(frozen=True)
class Scene:
    config: OpticalConfig
    populations: tuple = ()
    master_seed: int = 0
    n_frames: int = 1
    blank: bool = False

    def __post_init__(self):
        object.__setattr__(self, "populations", tuple(self.populations))
        if not self.populations and not self.blank:
            raise ParameterError("scene needs at least one population or blank=True")
        if int(self.n_frames) != self.n_frames or self.n_frames < 1:
            raise ParameterError(f"n_frames must be >= 1, got {self.n_frames}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ParameterError("master_seed must be a 64-bit unsigned integer")
        names = [p.species.name for p in self.populations]
        if len(set(names)) != len(names):
            raise ParameterError(f"species names must be unique within a scene: {names}")

    @property
    def species(self) -> list:
        return [p.species for p in self.populations]


def expected_particle_count(p: Population, cfg: OpticalConfig) -> float:
    """Mean number of particles of ``p`` inside the illuminated volume.

    Mass abundance is converted through the spherical particle volume and the
    species mass density.
    """
    d = p.species.diameter
    particle_mass = p.species.mass_density * (math.pi / 6.0) * d**3
    mass = p.abundance * MG_PER_ML_TO_KG_PER_M3 * cfg.fov_area * cfg.chamber_thickness
    return mass / particle_mass


@dataclass
class Realization:
    """One frame's particles as parallel arrays.

    ``x``/``y`` are subpixel coordinates in pixel units (pixel ``j`` has its
    center at ``j``); ``depth`` is the axial position inside the chamber.
    """

    x: np.ndarray
    y: np.ndarray
    diameter: np.ndarray
    depth: np.ndarray
    species_index: np.ndarray
    species: tuple

    def __len__(self):
        return len(self.x)

    def __iter__(self):
        for i in range(len(self)):
            yield (self.x[i], self.y[i]), self.diameter[i], self.species[self.species_index[i]]

    def subset(self, mask) -> "Realization":
        return Realization(self.x[mask], self.y[mask], self.diameter[mask], self.depth[mask],
                           self.species_index[mask], self.species)

    @classmethod
    def empty(cls, species=()):
        z = np.zeros(0)
        return cls(z, z.copy(), z.copy(), z.copy(), np.zeros(0, dtype=np.int32), tuple(species))


def stream_rng(master_seed: int, frame_index: int, population_index: int) -> np.random.Generator:
    """Independent generator keyed by (seed, frame, population).

    numpy's SeedSequence hashes the key tuple into the PCG64 state, so
    distinct keys give statistically independent streams.
    """
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(frame_index),
                                                         int(population_index)]))


def sample_lognormal_diameters(rng, mean_diameter, cv, n):
    if cv == 0:
        return np.full(n, float(mean_diameter))
    s2 = math.log1p(cv * cv)
    mu = math.log(mean_diameter) - 0.5 * s2
    return rng.lognormal(mu, math.sqrt(s2), n)


def sample_realization(scene: Scene, frame_index: int) -> Realization:
    """Draw the particles present in one frame.

    Per population: count ~ Poisson(expected count), positions uniform over
    the raster, diameters log-normal with the population's CV (mean equal to
    the nominal diameter), depth uniform across the chamber.
    """
    if not 0 <= frame_index < scene.n_frames:
        raise ParameterError(f"frame_index {frame_index} outside [0, {scene.n_frames})")
    cfg = scene.config
    xs, ys, ds, zs, ks = [], [], [], [], []
    for k, pop in enumerate(scene.populations):
        rng = stream_rng(scene.master_seed, frame_index, k)
        n = int(rng.poisson(expected_particle_count(pop, cfg)))
        xs.append(rng.uniform(-0.5, cfg.grid_width - 0.5, n))
        ys.append(rng.uniform(-0.5, cfg.grid_height - 0.5, n))
        ds.append(sample_lognormal_diameters(rng, pop.species.diameter, pop.diameter_cv, n))
        zs.append(rng.uniform(0.0, cfg.chamber_thickness, n))
        ks.append(np.full(n, k, dtype=np.int32))
    if not xs:
        return Realization.empty()
    return Realization(np.concatenate(xs), np.concatenate(ys), np.concatenate(ds),
                       np.concatenate(zs), np.concatenate(ks), tuple(scene.species))
