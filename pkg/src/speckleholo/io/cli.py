"""Command-line interface.

Data goes to stdout only under ``--json``; everything else (progress,
human-readable summaries, errors) goes to stderr. Exit codes: 0 success,
2 validation error, 3 numeric failure, 4 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import ConvergenceError, FormatError, ParameterError, SpeckleError
from ..forward import MODES, SensorModel, make_kernel, synthesize_transmission
from ..inversion import (EstimatorParams, TrainConfig, UnmixProblem, estimate, nnls_unmix,
                         train_stage1, train_stage2)
from ..metrics import (NOISE_KSIZE, NOISE_SIGMA, evaluate, noise_level, uvvis_baseline,
                       white_noise_sigma)
from ..scene import sample_realization
from ..speckle import (AutocorrMap, ensemble_autocorr, verify_correlation_identity,
                       verify_field_identity)
from .formats import (atomic_write_bytes, atomic_write_json, list_bases, load_bases, load_grid,
                      load_scene, optics_from_doc, read_json, save_grid, scene_hash)
from .pipeline import (RunFlags, build_bases, generate_dataset, load_dataset, measure,
                       read_features, replay, run_scene)
from .schema import validate

IDENTITY_TOL = 1e-10


class Usage(ParameterError):
    """Bad command-line usage."""


# --- helpers ------------------------------------------------------------------

def _parse_grid(text: str):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None


def _vector(text: str) -> np.ndarray:
    """Comma list of numbers, or a file holding numbers (one header line allowed)."""
    p = Path(text)
    if p.is_file():
        vals = []
        with open(p, newline="") as fh:
            for row in csv.reader(fh):
                for cell in row:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        continue
        return np.array(vals)
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise Usage(f"not a number list or readable file: {text!r}") from None


def _need_out(args) -> Path:
    if args.out is None:
        raise Usage(f"`{args.command}` needs --out DIR")
    return Path(args.out)


def _scene(args):
    """Load the scene argument and apply --grid/--seed/--frames overrides."""
    scene = load_scene(args.scene)
    cfg = scene.config
    if args.grid is not None:
        cfg = cfg.with_grid(*args.grid)
    changes = {"config": cfg}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.frames is not None:
        changes["n_frames"] = args.frames
    return dataclasses.replace(scene, **changes)


def _sensor(args):
    if args.noise_free:
        return None
    return SensorModel(exposure_scale=args.exposure, read_noise_sigma=args.read_noise,
                       seed=args.sensor_seed)


def _optics_hash(path):
    doc = read_json(path)
    return optics_from_doc(doc.get("optics", doc) if isinstance(doc, dict) else doc).config_hash()


# --- commands -----------------------------------------------------------------

def cmd_simulate(args, log):
    scene = _scene(args)
    out = _need_out(args)
    sensor = _sensor(args)
    files = []

    def sink(i, frame):
        path = out / f"frame_{i:05d}.fgrd"
        save_grid(frame, path)
        files.append(path.name)

    meas = measure(scene, sensor, args.mode, args.slices, True, 1, sink, args.workers)
    log(f"wrote {len(files)} frames to {out}")
    return {"command": "simulate", "scene_hash": scene_hash(scene),
            "config_hash": scene.config.config_hash(), "n_frames": meas.n_frames,
            "out": str(out), "files": files, "mean_intensity": meas.mean_intensity,
            "noise_level": meas.noise_level}


def cmd_basis(args, log):
    scene = _scene(args)
    out = _need_out(args)
    species = scene.species
    if args.species:
        by_name = {s.name: s for s in species}
        missing = [n for n in args.species if n not in by_name]
        if missing:
            raise Usage(f"species {missing} not in the scene")
        species = [by_name[n] for n in args.species]
    seed = args.seed if args.seed is not None else 0
    n_mc = args.frames if args.frames is not None else 256
    built = build_bases(species, scene.config, out, n_mc, seed, not args.raw, args.mode)
    for b in built:
        log(f"basis {b.species.name}: {n_mc} frames, seed {b.seed}")
    return {"command": "basis", "config_hash": scene.config.config_hash(), "out": str(out),
            "bases": [{"species": b.species.name, "seed": int(b.seed), "n_mc_frames": n_mc}
                      for b in built]}


def _estimate_doc(source, est, report=None, manifest=None):
    if not est.converged:
        raise ConvergenceError(f"NNLS did not certify its solution (KKT violation "
                               f"{est.kkt_violation:.3g}); bases may be collinear")
    return {"command": "unmix", "source": source, "species": list(est.names),
            "estimates_mg_per_ml": est.as_dict(), "converged": bool(est.converged),
            "residual_norm": est.residual_norm, "kkt_violation": est.kkt_violation,
            "report": report, "manifest": manifest}


def cmd_unmix(args, log):
    if args.manifest:
        out = _need_out(args)
        res = replay(args.manifest, out, args.workers)
        return _estimate_doc("manifest", res.estimate, str(res.report_path), str(res.manifest_path))
    if args.bases is None:
        raise Usage("`unmix` needs --bases DIR (or --manifest)")
    if args.scene:
        out = _need_out(args)
        flags = RunFlags(sensor=_sensor(args), mode=args.mode, n_slices=args.slices,
                         normalize=not args.raw, n_blocks=args.blocks, save_grids=args.save_grids,
                         timing=args.timing, workers=args.workers)
        scene = _scene(args)
        res = run_scene(scene, args.bases, out, flags, Path(args.scene).stem, args.species)
        for row in res.rows:
            log(f"{row.species}: c_est={row.c_est:.6g} mg/mL (true {row.c_true:.6g})")
        return _estimate_doc("scene", res.estimate, str(res.report_path), str(res.manifest_path))
    if not args.inputs:
        raise Usage("`unmix` needs --scene, --manifest, or FGRD inputs")
    chash = _optics_hash(args.optics) if args.optics else None
    if args.autocorr:
        if len(args.inputs) != 1:
            raise Usage("--autocorr takes exactly one map")
        m = AutocorrMap(load_grid(args.inputs[0], "autocorr"), 1, True, not args.raw)
        source = "autocorr"
    else:
        m = ensemble_autocorr((load_grid(p, "intensity") for p in args.inputs),
                              normalize=not args.raw)
        source = "frames"
    names = args.species or None
    if names is None:
        names = sorted(list_bases(args.bases))
    bases = load_bases(args.bases, names, chash)
    est = nnls_unmix(UnmixProblem(m, bases, config_hash=chash))
    for n, c in est.as_dict().items():
        log(f"{n}: c_est={c:.6g} mg/mL")
    doc = _estimate_doc(source, est)
    if args.out:
        atomic_write_json(Path(args.out) / "estimates.json", doc)
    return doc


def _train_config(args, stage):
    base = read_json(args.config) if args.config else {}
    if not isinstance(base, dict):
        raise Usage("training config must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(base) - allowed
    if unknown:
        raise Usage(f"unknown training config keys {sorted(unknown)}")
    base["stage"] = stage
    for key, val in (("learning_rate", args.lr), ("epochs", args.epochs), ("hidden", args.hidden),
                     ("optimizer", args.optimizer), ("batch_size", args.batch_size),
                     ("seed", args.seed)):
        if val is not None:
            base[key] = val
    if args.squared:
        base["squared"] = True
    return TrainConfig(**base)


def cmd_train(args, log):
    out = _need_out(args)
    _, ts = load_dataset(args.dataset)
    if ts is None:
        raise Usage(f"dataset {args.dataset} has no rows")
    cfg = _train_config(args, args.stage)
    prior = EstimatorParams.from_json(Path(args.params).read_text()) if args.params else None
    if args.stage == "I":
        res = train_stage1(ts, cfg, prior)
    else:
        if prior is None:
            raise Usage("stage II needs --params from a stage-I run")
        res = train_stage2(ts, prior, cfg)
    out.mkdir(parents=True, exist_ok=True)
    params_path, trace_path = out / f"params_stage{args.stage}.json", out / f"trace_stage{args.stage}.csv"
    atomic_write_bytes(params_path, res.params.to_json().encode())
    res.write_trace(trace_path)
    losses = [float(l) for _, l in res.trace]
    log(f"stage {args.stage}: loss {losses[0]:.6g} -> best {losses[res.best_epoch]:.6g} "
        f"at epoch {res.best_epoch}")
    return {"command": "train", "stage": args.stage, "epochs": cfg.epochs,
            "best_epoch": int(res.best_epoch), "initial_loss": losses[0],
            "final_loss": losses[-1], "best_loss": losses[res.best_epoch],
            "theta_digest": res.params.theta_digest(), "params": str(params_path),
            "trace": str(trace_path)}


def cmd_estimate(args, log):
    ids, X, I, species = read_features(args.dataset)
    params = EstimatorParams.from_json(Path(args.params).read_text())
    c_hat = estimate(X, I, params) if ids else np.zeros((0, params.dims["outputs"]))
    rows = [{"id": i, "c_hat_mg_per_ml": [float(v) for v in c]} for i, c in zip(ids, c_hat)]
    doc = {"command": "estimate", "species": species, "rows": rows, "predictions": None}
    if args.out:
        path = Path(args.out) / "predictions.csv"
        lines = [",".join(["id"] + [f"c_hat_{s}" for s in species])]
        lines += [",".join([r["id"]] + [repr(v) for v in r["c_hat_mg_per_ml"]]) for r in rows]
        atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
        doc["predictions"] = str(path)
    log(f"estimated {len(rows)} rows")
    return doc


def cmd_evaluate(args, log):
    rep = evaluate(_vector(args.y), _vector(args.yhat))
    log(f"mae={rep.mae:.6g} rmse={rep.rmse:.6g} r2={rep.r2}")
    return {"command": "evaluate", **rep.to_dict()}


def cmd_noise(args, log):
    img = load_grid(args.image, "intensity")
    nl = noise_level(img, args.ksize, args.sigma)
    try:
        white = white_noise_sigma(img, args.ksize, args.sigma)
    except ParameterError:
        white = None
    log(f"noise level {nl:.6g}")
    return {"command": "noise", "image": str(args.image), "ksize": args.ksize,
            "sigma": args.sigma, "noise_level": nl, "white_noise_sigma": white}


def cmd_uvvis(args, log):
    ladder = _vector(args.ladder)
    pts = uvvis_baseline(ladder, args.epsilon, args.path_length, args.saturation,
                         args.relative_noise, args.seed if args.seed is not None else 0)
    ok = [p for p in pts if not p.saturated]
    metrics = None
    if ok:
        rep = evaluate([p.c_true for p in ok], [p.c_est for p in ok])
        metrics = {"mae": rep.mae, "rmse": rep.rmse, "r2": rep.r2}
    log(f"{len(pts) - len(ok)} of {len(pts)} ladder points saturated")
    return {"command": "uvvis", "points": [dataclasses.asdict(p) for p in pts],
            "n_saturated": len(pts) - len(ok), "metrics": metrics}


def cmd_dataset(args, log):
    out = _need_out(args)
    spec = args.spec
    overrides = {k: v for k, v in (("master_seed", args.seed), ("frames", args.frames)) if v is not None}
    if overrides or args.grid is not None:
        doc = read_json(spec)
        doc.update(overrides)
        if args.grid is not None and isinstance(doc.get("optics"), dict):
            doc["optics"]["grid_width_px"], doc["optics"]["grid_height_px"] = args.grid
        out.mkdir(parents=True, exist_ok=True)
        spec = out / "spec.json"
        if doc.get("bases_dir"):
            doc["bases_dir"] = str((Path(args.spec).parent / doc["bases_dir"]).resolve())
        atomic_write_json(spec, doc)
    manifest = generate_dataset(spec, out)
    ids = [e["id"] for e in read_json(manifest)["experiments"]]
    log(f"dataset of {len(ids)} rows in {out}")
    return {"command": "dataset", "manifest": str(manifest), "rows": len(ids), "ids": ids}


def cmd_identity_check(args, log):
    scene = _scene(args)
    cfg = scene.config
    k = make_kernel(cfg)
    n = args.frames if args.frames is not None else 1
    field_res = corr_res = 0.0
    for i in range(n):
        S = synthesize_transmission(sample_realization(scene, i), cfg, args.mode)
        field_res = max(field_res, verify_field_identity(S, k))
        corr_res = max(corr_res, verify_correlation_identity(S, k))
    worst = max(field_res, corr_res)
    passed = worst <= IDENTITY_TOL
    log(f"identity residual {worst:.3e} over {n} frame(s): {'ok' if passed else 'FAILED'}")
    doc = {"command": "identity-check", "frames": n, "field_residual": field_res,
           "correlation_residual": corr_res, "max_residual": worst,
           "tolerance": IDENTITY_TOL, "passed": passed}
    if not passed:
        # still emit the data, then fail with the numeric exit code
        return doc, 3
    return doc


# --- parser -------------------------------------------------------------------

def _global_flags(parser, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=d(None), help="override the master/RNG seed")
    g.add_argument("--out", default=d(None), help="output directory")
    g.add_argument("--frames", type=int, default=d(None), help="override the frame count")
    g.add_argument("--grid", type=_parse_grid, default=d(None), metavar="WxH",
                   help="override the simulation grid")
    g.add_argument("--json", action="store_true", default=d(False),
                   help="write machine-readable output to stdout")
    g.add_argument("--quiet", action="store_true", default=d(False),
                   help="suppress diagnostics on stderr")


def _sim_flags(p, sensor=True):
    p.add_argument("--mode", choices=MODES, default="multiplicative")
    p.add_argument("--slices", type=int, default=1, help="multi-slice layers through the chamber")
    p.add_argument("--workers", type=int, default=1)
    if sensor:
        p.add_argument("--noise-free", action="store_true", help="record intensities without a camera")
        p.add_argument("--exposure", type=float, default=1000.0, help="counts per unit intensity")
        p.add_argument("--read-noise", type=float, default=2.0)
        p.add_argument("--sensor-seed", type=int, default=0)


COMMANDS = {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speckleholo",
                                     description="Speckle-holography particle unmixing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _global_flags(p, suppress=True)
        COMMANDS[name] = fn
        return p

    p = add("simulate", cmd_simulate, "simulate the frames of a scene into FGRD files")
    p.add_argument("scene")
    _sim_flags(p)

    p = add("basis", cmd_basis, "build per-species autocorrelation basis kernels")
    p.add_argument("scene", help="scene file supplying optics and species")
    p.add_argument("--species", nargs="+", help="restrict to these species")
    p.add_argument("--raw", action="store_true", help="do not mean-normalize frames")
    p.add_argument("--mode", choices=MODES, default="multiplicative")

    p = add("unmix", cmd_unmix, "estimate abundances from a scene, frames, or an autocorrelation map")
    p.add_argument("inputs", nargs="*", help="FGRD frames (or one map with --autocorr)")
    p.add_argument("--scene", help="run the full experiment for this scene")
    p.add_argument("--manifest", help="replay an experiment manifest")
    p.add_argument("--bases", help="basis directory")
    p.add_argument("--autocorr", action="store_true", help="the input is an autocorrelation map")
    p.add_argument("--optics", help="optics or scene JSON the inputs were recorded under")
    p.add_argument("--species", nargs="+", help="species to unmix against")
    p.add_argument("--raw", action="store_true", help="do not mean-normalize frames")
    p.add_argument("--blocks", type=int, default=4, help="frame blocks for the repeatability estimate")
    p.add_argument("--save-grids", choices=("none", "summary", "frames"), default="none")
    p.add_argument("--timing", action="store_true", help="record wall time in the report")
    _sim_flags(p)

    p = add("train", cmd_train, "train one stage of the two-stage estimator")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--stage", choices=("I", "II"), required=True)
    p.add_argument("--params", help="stage-I parameters (required for stage II)")
    p.add_argument("--config", help="JSON file of training settings")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--squared", action="store_true", help="squared-norm quantification loss")

    p = add("estimate", cmd_estimate, "predict abundances for dataset features")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--params", required=True)

    p = add("evaluate", cmd_evaluate, "regression metrics of predictions against truth")
    p.add_argument("--y", required=True, help="true values: comma list or file")
    p.add_argument("--yhat", required=True, help="predicted values: comma list or file")

    p = add("noise", cmd_noise, "high-pass noise level of an image")
    p.add_argument("image")
    p.add_argument("--ksize", type=int, default=NOISE_KSIZE)
    p.add_argument("--sigma", type=float, default=NOISE_SIGMA)

    p = add("uvvis", cmd_uvvis, "Beer-Lambert absorbance baseline over an abundance ladder")
    p.add_argument("--ladder", required=True, help="abundances in mg/mL: comma list or file")
    p.add_argument("--epsilon", type=float, required=True, help="effective extinction, mL/(mg*cm)")
    p.add_argument("--path-length", type=float, default=1.0, help="cm")
    p.add_argument("--saturation", type=float, default=3.0, help="absorbance ceiling")
    p.add_argument("--relative-noise", type=float, default=0.0)

    p = add("dataset", cmd_dataset, "generate a training set from a dataset spec")
    p.add_argument("spec")

    p = add("identity-check", cmd_identity_check,
            "check the spectral factorization of propagated-field autocorrelations")
    p.add_argument("scene")
    p.add_argument("--mode", choices=MODES, default="multiplicative")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    def log(msg):
        if not args.quiet:
            print(msg, file=sys.stderr)

    try:
        result = COMMANDS[args.command](args, log)
        code = 0
        if isinstance(result, tuple):
            result, code = result
        validate(result, f"cli-{args.command}")
        if args.json:
            sys.stdout.write(json.dumps(result, indent=1, sort_keys=True) + "\n")
        return code
    except SpeckleError as e:
        print(f"speckleholo {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"speckleholo {args.command}: error: {e}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
