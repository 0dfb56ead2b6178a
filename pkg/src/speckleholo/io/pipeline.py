"""Experiment orchestration: simulate, correlate, unmix, score, persist."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import ConfigurationError, ParameterError
from ..forward import MODES, SensorModel, simulate_frame
from ..inversion import TrainingSet, UnmixProblem, nnls_unmix
from ..metrics import fidelity, mae, noise_level, r2, rcv, rmse
from ..numerics import RealGrid, autocorrelate_real
from ..scene import Population, Scene
from ..speckle import AutocorrMap, BasisKernel, extract_features, informative_mask, species_basis
from .formats import (atomic_write_bytes, atomic_write_json, list_bases, load_bases, load_scene,
                      optics_from_doc, read_json, save_basis, save_grid, scene_from_doc,
                      scene_hash, scene_to_doc, sha256_file, species_from_doc)
from .schema import validate

REPORT_VERSION = 1
REPORT_COLUMNS = (
    "report_version", "experiment_id", "scene_hash", "species", "c_true_mg_per_ml",
    "c_est_mg_per_ml", "fidelity_percent", "mae", "rmse", "r2", "rcv_percent", "noise_level",
    "mean_exposure", "frames", "wall_time_s",
)
MANIFEST_FORMAT = "speckleholo-manifest"
DATASET_FORMAT = "speckleholo-dataset"
SAVE_GRIDS = ("none", "summary", "frames")


def sensor_to_doc(sensor: SensorModel | None):
    if sensor is None:
        return None
    return {"exposure_scale": sensor.exposure_scale, "read_noise_sigma": sensor.read_noise_sigma,
            "shot_noise": sensor.shot_noise, "bit_depth": sensor.bit_depth,
            "seed": int(sensor.seed)}


def sensor_from_doc(doc) -> SensorModel | None:
    return None if doc is None else SensorModel(**doc)


@dataclass(frozen=True)
class RunFlags:
    """Measurement and output options of one experiment.

    ``sensor=None`` records noise-free intensities. Frames are split into
    ``n_blocks`` consecutive blocks, each unmixed separately, to give a
    within-run repeatability (RCV) per species.
    """

    sensor: SensorModel | None = field(default_factory=SensorModel)
    mode: str = "multiplicative"
    n_slices: int = 1
    normalize: bool = True
    n_blocks: int = 4
    save_grids: str = "none"
    timing: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        if self.n_slices < 1 or self.n_blocks < 1 or self.workers < 1:
            raise ParameterError("n_slices, n_blocks and workers must be >= 1")
        if self.save_grids not in SAVE_GRIDS:
            raise ParameterError(f"save_grids must be one of {SAVE_GRIDS}")

    def to_doc(self) -> dict:
        return {"sensor": sensor_to_doc(self.sensor), "mode": self.mode,
                "n_slices": self.n_slices, "normalize": self.normalize,
                "n_blocks": self.n_blocks, "save_grids": self.save_grids,
                "timing": self.timing}

    @classmethod
    def from_doc(cls, doc, workers: int = 1) -> "RunFlags":
        d = dict(doc)
        d["sensor"] = sensor_from_doc(d.get("sensor"))
        return cls(workers=workers, **d)


# --- measurement --------------------------------------------------------------

@dataclass
class Measurement:
    autocorr: AutocorrMap
    blocks: list  # AutocorrMap per frame block
    mean_intensity: float
    std_intensity: float
    noise_level: float
    n_frames: int


def _frame_stats(args):
    scene, i, sensor, mode, n_slices, normalize, keep = args
    I = simulate_frame(scene, i, sensor, mode, n_slices)
    x = I.data
    m = float(x.mean())
    y = x - m
    if normalize:
        if m <= 0:
            raise ParameterError(f"frame {i} has non-positive mean intensity; cannot normalize")
        y = y / m
    r = autocorrelate_real(y)
    return r, float(x.sum()), float(np.sum(x * x)), noise_level(I), (I if keep else None)


def measure(scene: Scene, sensor: SensorModel | None, mode: str = "multiplicative",
            n_slices: int = 1, normalize: bool = True, n_blocks: int = 1,
            frame_sink=None, workers: int = 1) -> Measurement:
    """Ensemble statistics of all frames of ``scene``.

    Per-frame autocorrelations are summed in frame order whatever the
    worker count, so results do not depend on parallelism.
    """
    n = scene.n_frames
    n_blocks = max(1, min(int(n_blocks), n))
    keep = frame_sink is not None
    jobs = ((scene, i, sensor, mode, n_slices, normalize, keep) for i in range(n))
    if workers > 1:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_frame_stats, jobs, chunksize=max(1, n // (4 * workers)))
    else:
        pool = None
        results = map(_frame_stats, jobs)
    total = None
    block_sums = [None] * n_blocks
    block_counts = [0] * n_blocks
    s1 = s2 = noise = 0.0
    pitch = scene.config.pixel_pitch
    try:
        for i, (r, fs, fss, nl, frame) in enumerate(results):
            total = r.copy() if total is None else total + r
            b = i * n_blocks // n
            block_sums[b] = r.copy() if block_sums[b] is None else block_sums[b] + r
            block_counts[b] += 1
            s1 += fs
            s2 += fss
            noise += nl
            if keep:
                frame_sink(i, frame)
    finally:
        if pool is not None:
            pool.shutdown()
    npix = n * scene.config.grid_width * scene.config.grid_height
    mean = s1 / npix
    std = math.sqrt(max(s2 / npix - mean * mean, 0.0))
    full = AutocorrMap(RealGrid(total / n, pitch, "autocorr"), n, True, normalize)
    blocks = [AutocorrMap(RealGrid(s / c, pitch, "autocorr"), c, True, normalize)
              for s, c in zip(block_sums, block_counts)]
    return Measurement(full, blocks, mean, std, noise / n, n)


# --- experiments --------------------------------------------------------------

@dataclass
class ReportRow:
    experiment_id: str
    scene_hash: str
    species: str
    c_true: float
    c_est: float
    fidelity: float | None
    mae: float | None
    rmse: float | None
    r2: float | None
    rcv: float | None
    noise_level: float
    mean_exposure: float
    frames: int
    wall_time: float | None = None

    def cells(self) -> list:
        vals = [REPORT_VERSION, self.experiment_id, self.scene_hash, self.species, self.c_true,
                self.c_est, self.fidelity, self.mae, self.rmse, self.r2, self.rcv,
                self.noise_level, self.mean_exposure, self.frames, self.wall_time]
        return [_cell(v) for v in vals]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow(row.cells())
    return buf.getvalue().encode()


def read_report(path) -> list:
    with open(path, newline="") as fh:
        rdr = csv.reader(fh)
        header = next(rdr)
        if tuple(header) != REPORT_COLUMNS:
            raise ParameterError(f"{path}: unexpected report header")
        return [dict(zip(header, r)) for r in rdr]


@dataclass
class ExperimentResult:
    rows: list
    estimate: object  # AbundanceEstimate of the full ensemble
    measurement: Measurement
    report_path: Path
    manifest_path: Path


def _safe(fn, *args):
    try:
        return fn(*args)
    except ParameterError:
        return None


def _basis_entry(b: BasisKernel, directory: Path, side: Path) -> dict:
    doc = read_json(side)
    return {"species": b.species.name, "sidecar": side.name,
            "grid_sha256": sha256_file(directory / doc["grid_file"]),
            "config_hash": b.config_hash, "seed": int(b.seed), "n_mc_frames": b.n_mc_frames}


def _frame_sink(save_grids: str, out_dir: Path):
    if save_grids == "frames":
        return lambda i, frame: save_grid(frame, out_dir / "frames" / f"frame_{i:05d}.fgrd")
    if save_grids == "summary":
        return lambda i, frame: save_grid(frame, out_dir / "frame_00000.fgrd") if i == 0 else None
    return None


def run_scene(scene: Scene, bases_dir, out_dir, flags: RunFlags | None = None,
              experiment_id: str = "experiment", species_names=None) -> ExperimentResult:
    """Full measurement loop for one scene.

    Unmixes against the bases of ``species_names`` (default: the scene's
    species, or every basis in ``bases_dir`` for a scene without
    populations). The manifest is written before any simulation.
    """
    flags = flags or RunFlags()
    bases_dir, out_dir = Path(bases_dir), Path(out_dir)
    if species_names is None:
        species_names = [s.name for s in scene.species] or sorted(list_bases(bases_dir))
    if not species_names:
        raise ConfigurationError(f"no species to unmix and no bases in {bases_dir}")
    chash = scene.config.config_hash()
    bases = load_bases(bases_dir, species_names, chash)
    for b in bases:
        if b.map.normalized != flags.normalize:
            raise ConfigurationError(
                f"basis for {b.species.name!r} has normalized={b.map.normalized}, "
                f"run uses normalize={flags.normalize}", species=b.species.name)
    available = list_bases(bases_dir)
    shash = scene_hash(scene)
    manifest = {
        "format": MANIFEST_FORMAT, "version": 1, "package_version": __version__,
        "numpy_version": np.__version__, "report_version": REPORT_VERSION,
        "experiment_id": experiment_id, "scene": scene_to_doc(scene), "scene_hash": shash,
        "config_hash": chash, "flags": flags.to_doc(), "species": list(species_names),
        "bases_dir": str(bases_dir.resolve()),
        "bases": [_basis_entry(b, bases_dir, available[b.species.name]) for b in bases],
        "outputs": {"report": "report.csv", "autocorr": "autocorr.fgrd"
                    if flags.save_grids != "none" else None},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    atomic_write_json(manifest_path, manifest)

    sink = _frame_sink(flags.save_grids, out_dir)

    t0 = time.perf_counter()
    meas = measure(scene, flags.sensor, flags.mode, flags.n_slices, flags.normalize,
                   flags.n_blocks, sink, flags.workers)
    est = nnls_unmix(UnmixProblem(meas.autocorr, bases, config_hash=chash))
    block_est = [nnls_unmix(UnmixProblem(m, bases, config_hash=chash)).abundance
                 for m in meas.blocks] if len(meas.blocks) > 1 else []
    wall = time.perf_counter() - t0
    if flags.save_grids != "none":
        save_grid(meas.autocorr.grid, out_dir / "autocorr.fgrd")

    truth = {p.species.name: p.abundance for p in scene.populations}
    c_true = np.array([truth.get(n, 0.0) for n in species_names])
    c_est = est.abundance
    err_mae, err_rmse = mae(c_true, c_est), rmse(c_true, c_est)
    err_r2 = _safe(r2, c_true, c_est) if len(c_true) > 1 else None
    rows = []
    for k, name in enumerate(species_names):
        spread = _safe(rcv, [b[k] for b in block_est]) if block_est else None
        rows.append(ReportRow(
            experiment_id, shash, name, float(c_true[k]), float(c_est[k]),
            fidelity(float(c_est[k]), float(c_true[k])) if c_true[k] > 0 else None,
            err_mae, err_rmse, err_r2, spread, meas.noise_level, meas.mean_intensity,
            meas.n_frames, wall if flags.timing else None))
    report_path = out_dir / "report.csv"
    atomic_write_bytes(report_path, report_csv(rows))
    return ExperimentResult(rows, est, meas, report_path, manifest_path)


def run_experiment(scene_path, bases_dir, out_dir, flags: RunFlags | None = None,
                   experiment_id: str | None = None, species_names=None) -> ExperimentResult:
    scene = load_scene(scene_path)
    return run_scene(scene, bases_dir, out_dir, flags, experiment_id or Path(scene_path).stem,
                     species_names)


def replay(manifest_path, out_dir, workers: int = 1) -> ExperimentResult:
    """Re-run an experiment from its manifest, checking the bases are unchanged."""
    doc = read_json(manifest_path)
    validate(doc, "manifest")
    bases_dir = Path(doc["bases_dir"])
    for entry in doc["bases"]:
        side = bases_dir / entry["sidecar"]
        grid_file = read_json(side)["grid_file"]
        if sha256_file(bases_dir / grid_file) != entry["grid_sha256"]:
            raise ConfigurationError(f"basis for {entry['species']!r} changed since the manifest "
                                     f"was written", species=entry["species"])
    flags = RunFlags.from_doc(doc["flags"], workers=workers)
    return run_scene(scene_from_doc(doc["scene"]), bases_dir, out_dir, flags,
                     doc["experiment_id"], doc["species"])


# --- bases --------------------------------------------------------------------

def build_bases(species, cfg, out_dir, n_mc_frames: int, seed: int, normalize: bool = True,
                mode: str = "multiplicative", diameter_cv: float = 0.05) -> list:
    """Build and save one basis per species; species ``k`` uses seed ``seed + k``."""
    out = []
    for k, sp in enumerate(species):
        b = species_basis(sp, cfg, n_mc_frames, seed + k, mode=mode, diameter_cv=diameter_cv,
                          normalize=normalize)
        save_basis(b, out_dir)
        out.append(b)
    return out


# --- datasets -----------------------------------------------------------------

def derived_seed(master_seed: int, experiment_id: str) -> int:
    h = hashlib.sha256(f"{int(master_seed)}:{experiment_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def _fmt_c(c: float) -> str:
    return f"{c:g}"


def expand_experiments(doc) -> list:
    """Explicit experiments, then ladder and mixture expansions, as (id, {name: c})."""
    names = [s["name"] for s in doc["species"]]
    out = []
    for e in doc.get("experiments", []):
        unknown = set(e["abundances_mg_per_ml"]) - set(names)
        if unknown:
            raise ParameterError(f"experiment {e['id']!r} names unknown species {sorted(unknown)}")
        out.append((e["id"], {n: float(e["abundances_mg_per_ml"].get(n, 0.0)) for n in names}))
    for c in doc.get("ladder", []):
        for n in names:
            out.append((f"ladder-{n}-{_fmt_c(c)}", {m: (float(c) if m == n else 0.0) for m in names}))
    mix = doc.get("mixtures")
    if mix:
        if len(names) != 2:
            raise ParameterError("mixtures require exactly two species")
        for total in mix["totals_mg_per_ml"]:
            for a, b in mix["ratios"]:
                ca = total * a / (a + b)
                out.append((f"mix-{_fmt_c(total)}-{_fmt_c(a)}to{_fmt_c(b)}",
                            {names[0]: ca, names[1]: total - ca}))
    ids = [i for i, _ in out]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ParameterError(f"duplicate experiment ids: {dupes}")
    return out


def target_distribution(c: np.ndarray, kind: str) -> np.ndarray:
    """Descriptor target ``t_n``: one-hot on the dominant species, or mass fractions.

    A scene without particles gets the uniform distribution.
    """
    total = float(np.sum(c))
    if total <= 0:
        return np.full(len(c), 1.0 / len(c))
    if kind == "one-hot":
        t = np.zeros(len(c))
        t[int(np.argmax(c))] = 1.0
        return t
    if kind == "mass-fraction":
        return c / total
    raise ParameterError(f"unknown target kind {kind!r}")


def physics_prior(m: AutocorrMap, bases) -> np.ndarray:
    """``I_n``: NNLS abundances followed by per-basis projection coefficients."""
    est = nnls_unmix(UnmixProblem(m, bases))
    mask = informative_mask(m.grid.shape)
    y = m.data[mask]
    proj = [float(b.data[mask] @ y / (b.data[mask] @ b.data[mask])) for b in bases]
    return np.concatenate([est.abundance, proj])


def dataset_row(doc, bases, exp_id: str, abundances: dict):
    """Features, prior, target and truth for one experiment of a dataset spec."""
    cfg = optics_from_doc(doc["optics"])
    species = [species_from_doc(s) for s in doc["species"]]
    cv = doc.get("diameter_cv", 0.05)
    pops = tuple(Population(s, abundances[s.name], cv) for s in species)
    seed = derived_seed(doc["master_seed"], exp_id)
    scene = Scene(cfg, pops, seed, doc["frames"])
    sensor = sensor_from_doc(doc.get("sensor"))
    meas = measure(scene, sensor, doc.get("mode", "multiplicative"), 1, doc.get("normalize", True))
    x = extract_features(meas.autocorr, meas.mean_intensity, meas.std_intensity).to_vector(
        cfg.pixel_pitch)
    c = np.array([abundances[s.name] for s in species])
    return seed, x, physics_prior(meas.autocorr, bases), target_distribution(c, doc["target"]), c


def _dataset_bases(doc, spec_dir: Path, out_dir: Path):
    cfg = optics_from_doc(doc["optics"])
    species = [species_from_doc(s) for s in doc["species"]]
    names = [s.name for s in species]
    if doc.get("bases_dir"):
        bdir = (spec_dir / doc["bases_dir"]).resolve()
        return load_bases(bdir, names, cfg.config_hash()), bdir
    bdir = out_dir / "bases"
    build_bases(species, cfg, bdir, doc["basis_frames"], doc["basis_seed"],
                doc.get("normalize", True), doc.get("mode", "multiplicative"),
                doc.get("diameter_cv", 0.05))
    return load_bases(bdir, names, cfg.config_hash()), bdir.resolve()


def generate_dataset(spec_path, out_dir) -> Path:
    """Simulate every experiment of a dataset spec and write features/targets CSVs.

    Returns the dataset manifest path.
    """
    spec_path, out_dir = Path(spec_path), Path(out_dir)
    doc = read_json(spec_path)
    validate(doc, "dataset-spec")
    experiments = expand_experiments(doc)
    names = [s["name"] for s in doc["species"]]
    out_dir.mkdir(parents=True, exist_ok=True)
    bases, bdir = _dataset_bases(doc, spec_path.parent, out_dir)
    k = len(names)
    n_x = 2 + 32
    x_cols = ["contrast", "corr_length_px"] + [f"profile_{i:02d}" for i in range(32)]
    i_cols = [f"nnls_{n}" for n in names] + [f"proj_{n}" for n in names]
    manifest = {
        "format": DATASET_FORMAT, "version": 1, "package_version": __version__,
        "spec": doc, "bases_dir": str(bdir),
        "bases": [{"species": b.species.name, "config_hash": b.config_hash, "seed": int(b.seed),
                   "n_mc_frames": b.n_mc_frames} for b in bases],
        "experiments": [{"id": i, "seed": derived_seed(doc["master_seed"], i),
                         "abundances_mg_per_ml": a} for i, a in experiments],
        "columns": {"X": x_cols, "I": i_cols, "t": [f"t_{n}" for n in names],
                    "c": [f"c_{n}" for n in names]},
        "files": {"features": "features.csv", "targets": "targets.csv"},
    }
    atomic_write_json(out_dir / "manifest.json", manifest)
    feat, targ = io.StringIO(), io.StringIO()
    fw, tw = csv.writer(feat, lineterminator="\n"), csv.writer(targ, lineterminator="\n")
    fw.writerow(["id"] + x_cols + i_cols)
    tw.writerow(["id"] + manifest["columns"]["t"] + manifest["columns"]["c"])
    for exp_id, ab in experiments:
        _, x, prior, t, c = dataset_row(doc, bases, exp_id, ab)
        assert len(x) == n_x and len(prior) == 2 * k
        fw.writerow([exp_id] + [repr(float(v)) for v in np.concatenate([x, prior])])
        tw.writerow([exp_id] + [repr(float(v)) for v in np.concatenate([t, c])])
    atomic_write_bytes(out_dir / "features.csv", feat.getvalue().encode())
    atomic_write_bytes(out_dir / "targets.csv", targ.getvalue().encode())
    return out_dir / "manifest.json"


def _dataset_manifest(directory: Path) -> dict:
    man = read_json(directory / "manifest.json")
    if not isinstance(man, dict) or man.get("format") != DATASET_FORMAT:
        raise ParameterError(f"{directory} does not hold a speckleholo dataset")
    return man


def read_features(directory):
    """``(ids, X, I, species)`` from a dataset's feature file."""
    directory = Path(directory)
    man = _dataset_manifest(directory)
    cols = man["columns"]
    with open(directory / man["files"]["features"], newline="") as fh:
        feats = list(csv.reader(fh))[1:]
    ids = [r[0] for r in feats]
    nx, ni = len(cols["X"]), len(cols["I"])
    F = np.array([[float(v) for v in r[1:]] for r in feats]).reshape(len(ids), nx + ni)
    species = [c[2:] for c in cols["t"]]
    return ids, F[:, :nx], F[:, nx:], species


def load_dataset(directory):
    """Read a generated dataset back as ``(ids, TrainingSet)``; the set is None when empty."""
    directory = Path(directory)
    man = _dataset_manifest(directory)
    ids, X, I, species = read_features(directory)
    cols = man["columns"]
    with open(directory / man["files"]["targets"], newline="") as fh:
        targs = {r[0]: r[1:] for r in list(csv.reader(fh))[1:]}
    nt = len(cols["t"])
    T = np.array([[float(v) for v in targs[i]] for i in ids]).reshape(len(ids), nt + len(cols["c"]))
    if not ids:
        return ids, None
    return ids, TrainingSet(X, I, T[:, :nt], T[:, nt:], species)
