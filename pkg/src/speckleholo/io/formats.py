"""On-disk formats: FGRD grids, scene/optics JSON documents, basis kernels.

FGRD layout (little-endian)::

    offset  size  field
    0       4     magic b"FGRD"
    4       4     version (u32) = 1
    8       4     width (u32)
    12      4     height (u32)
    16      1     dtype (u8): 0 real float32, 1 complex interleaved float32
    17      8     pitch in meters (f64)
    25      ...   row-major payload, width*height*(4 or 8) bytes, nothing after
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, FormatError, ParameterError
from ..numerics import ComplexGrid, RealGrid
from ..scene import OpticalConfig, Population, Scene, Species
from ..speckle import AutocorrMap, BasisKernel
from .schema import validate

FGRD_MAGIC = b"FGRD"
FGRD_VERSION = 1
FGRD_HEADER = struct.Struct("<4sIIIBd")
DTYPE_REAL, DTYPE_COMPLEX = 0, 1

SCENE_FORMAT = "speckleholo-scene"
BASIS_FORMAT = "speckleholo-basis"
DOC_VERSION = 1


def atomic_write_bytes(path, data: bytes):
    """Write via a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def atomic_write_json(path, doc):
    atomic_write_bytes(path, canonical_json(doc).encode())


def read_json(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file") from None
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e.msg}", offset=e.pos) from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- FGRD -------------------------------------------------------------------

def encode_grid(g) -> bytes:
    if isinstance(g, ComplexGrid):
        dtype = DTYPE_COMPLEX
        payload = np.ascontiguousarray(g.data, dtype="<c8").tobytes()
    elif isinstance(g, RealGrid):
        dtype = DTYPE_REAL
        payload = np.ascontiguousarray(g.data, dtype="<f4").tobytes()
    else:
        raise ParameterError(f"cannot store {type(g).__name__} as FGRD")
    return FGRD_HEADER.pack(FGRD_MAGIC, FGRD_VERSION, g.width, g.height, dtype, float(g.pitch)) + payload


def save_grid(g, path):
    atomic_write_bytes(path, encode_grid(g))


def decode_grid(blob: bytes, role: str = "generic"):
    n = FGRD_HEADER.size
    if len(blob) < n:
        raise FormatError(f"truncated header: {len(blob)} of {n} bytes", offset=len(blob))
    magic, version, width, height, dtype, pitch = FGRD_HEADER.unpack_from(blob)
    if magic != FGRD_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != FGRD_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if width == 0:
        raise FormatError("width is zero", offset=8)
    if height == 0:
        raise FormatError("height is zero", offset=12)
    if dtype not in (DTYPE_REAL, DTYPE_COMPLEX):
        raise FormatError(f"unknown dtype {dtype}", offset=16)
    if not (math.isfinite(pitch) and pitch > 0):
        raise FormatError(f"invalid pitch {pitch}", offset=17)
    sample = 4 if dtype == DTYPE_REAL else 8
    expected = width * height * sample
    have = len(blob) - n
    if have < expected:
        raise FormatError(f"truncated payload: {have} of {expected} bytes", offset=len(blob))
    if have > expected:
        raise FormatError(f"{have - expected} trailing bytes after payload", offset=n + expected)
    if dtype == DTYPE_REAL:
        data = np.frombuffer(blob, dtype="<f4", count=width * height, offset=n)
        return RealGrid(data.reshape(height, width).astype(np.float64), pitch, role)
    data = np.frombuffer(blob, dtype="<c8", count=width * height, offset=n)
    return ComplexGrid(data.reshape(height, width).astype(np.complex128), pitch)


def load_grid(path, role: str = "generic"):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file") from None
    try:
        return decode_grid(blob, role)
    except FormatError as e:
        raise FormatError(f"{path}: {e.args[0]}") from None


# --- scene documents ----------------------------------------------------------

OPTICS_KEYS = {
    "wavelength_m": "wavelength",
    "pixel_pitch_m": "pixel_pitch",
    "grid_width_px": "grid_width",
    "grid_height_px": "grid_height",
    "propagation_distance_m": "propagation_distance",
    "medium_index": "medium_index",
    "chamber_thickness_m": "chamber_thickness",
}
SPECIES_KEYS = {
    "name": "name",
    "n_real": "n_r",
    "n_imag": "n_i",
    "diameter_m": "diameter",
    "mass_density_kg_per_m3": "mass_density",
}


def optics_to_doc(cfg: OpticalConfig) -> dict:
    return {k: getattr(cfg, attr) for k, attr in OPTICS_KEYS.items()}


def optics_from_doc(doc: dict) -> OpticalConfig:
    validate(doc, "optics")
    return OpticalConfig(**{attr: doc[k] for k, attr in OPTICS_KEYS.items() if k in doc})


def species_to_doc(s: Species) -> dict:
    return {k: getattr(s, attr) for k, attr in SPECIES_KEYS.items()}


def species_from_doc(doc: dict) -> Species:
    validate(doc, "species")
    return Species(**{attr: doc[k] for k, attr in SPECIES_KEYS.items()})


def scene_to_doc(scene: Scene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": DOC_VERSION,
        "optics": optics_to_doc(scene.config),
        "populations": [{"species": species_to_doc(p.species),
                         "abundance_mg_per_ml": p.abundance,
                         "diameter_cv": p.diameter_cv} for p in scene.populations],
        "master_seed": int(scene.master_seed),
        "n_frames": int(scene.n_frames),
        "blank": bool(scene.blank),
    }


def scene_from_doc(doc: dict) -> Scene:
    """Build a Scene from its JSON document; schema first, then scene invariants."""
    validate(doc, "scene")
    pops = [Population(species_from_doc(p["species"]), p["abundance_mg_per_ml"],
                       p.get("diameter_cv", 0.05)) for p in doc["populations"]]
    return Scene(optics_from_doc(doc["optics"]), tuple(pops), doc.get("master_seed", 0),
                 doc.get("n_frames", 1), doc.get("blank", False))


def save_scene(scene: Scene, path):
    atomic_write_json(path, scene_to_doc(scene))


def load_scene(path) -> Scene:
    return scene_from_doc(read_json(path))


def scene_hash(scene: Scene) -> str:
    return hashlib.sha256(json.dumps(scene_to_doc(scene), sort_keys=True,
                                     separators=(",", ":")).encode()).hexdigest()


# --- basis kernels ------------------------------------------------------------

def basis_stem(name: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
    return f"basis_{safe}"


def basis_to_doc(b: BasisKernel, grid_file: str) -> dict:
    return {
        "format": BASIS_FORMAT,
        "version": DOC_VERSION,
        "species": species_to_doc(b.species),
        "c_ref_mg_per_ml": b.c_ref,
        "n_mc_frames": b.n_mc_frames,
        "config_hash": b.config_hash,
        "seed": int(b.seed),
        "mode": b.mode,
        "diameter_cv": b.diameter_cv,
        "n_slices": b.n_slices,
        "normalized": b.map.normalized,
        "mean_subtracted": b.map.mean_subtracted,
        "grid_file": grid_file,
        "grid_sha256": None,
    }


def save_basis(b: BasisKernel, directory) -> Path:
    """Write ``basis_<name>.fgrd`` and its JSON sidecar; returns the sidecar path."""
    directory = Path(directory)
    stem = basis_stem(b.species.name)
    grid_path = directory / f"{stem}.fgrd"
    save_grid(b.map.grid, grid_path)
    doc = basis_to_doc(b, grid_path.name)
    doc["grid_sha256"] = sha256_file(grid_path)
    side = directory / f"{stem}.json"
    atomic_write_json(side, doc)
    return side


def load_basis(sidecar) -> BasisKernel:
    sidecar = Path(sidecar)
    doc = read_json(sidecar)
    validate(doc, "basis")
    grid_path = sidecar.parent / doc["grid_file"]
    if doc.get("grid_sha256") and sha256_file(grid_path) != doc["grid_sha256"]:
        raise FormatError(f"{grid_path}: content does not match the sidecar checksum")
    grid = load_grid(grid_path, role="autocorr")
    m = AutocorrMap(grid, doc["n_mc_frames"], doc["mean_subtracted"], doc["normalized"])
    return BasisKernel(species_from_doc(doc["species"]), m, doc["n_mc_frames"],
                       doc["config_hash"], doc["seed"], doc["c_ref_mg_per_ml"], doc["mode"],
                       doc["diameter_cv"], doc["n_slices"])


def list_bases(directory) -> dict:
    """Map species name to sidecar path for every basis in ``directory``."""
    out = {}
    for side in sorted(Path(directory).glob("basis_*.json")):
        doc = read_json(side)
        validate(doc, "basis")
        out[doc["species"]["name"]] = side
    return out


def load_bases(directory, names, config_hash: str | None = None) -> list:
    """Load the bases for ``names`` in order, refusing missing or stale ones."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigurationError(f"basis directory {directory} does not exist")
    available = list_bases(directory)
    out = []
    for name in names:
        if name not in available:
            raise ConfigurationError(
                f"no basis kernel for species {name!r} in {directory}; build one with "
                f"`speckleholo basis` using the scene's optics", species=name)
        b = load_basis(available[name])
        if config_hash is not None and b.config_hash != config_hash:
            raise ConfigurationError(
                f"basis for species {name!r} was built under optical config "
                f"{b.config_hash[:12]}, scene uses {config_hash[:12]}; rebuild it", species=name)
        out.append(b)
    return out
