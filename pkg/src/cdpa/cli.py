"""Command-line pipeline runner.

Subcommands: phantom, project, corrupt, recon, finetune, eval, posterior,
experiment. Every command accepts ``--config FILE`` (JSON) whose keys match
the long flag names; explicit flags override config values. Each run writes a
manifest JSON (config, seeds, package version, input hashes) next to its
primary output.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O or
file-format error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .analytic import FilterSpec, beer_lambert, fbp, fdk
from .denoiser import UNetModel, WeightFormatError, denoise_slices, load_weights
from .diffusion import SamplerConfig, UNetScore, cdpa_sample, dpa_sample
from .experiment import ExperimentConfig, run_experiment
from .geometry import ParallelGeometry2D, VolumeGrid, geometry_from_json, uniform_angles
from .io import PhantomSpec, VolumeFormatError, make_phantom, read_projections, read_volume, simulate_counts, write_montage, write_projections, write_volume
from .metrics import MetricConfig, psnr, ssim2d, ssim3
from .optimize import DCProblem, DivergenceError, dc_loss, finetune, gd_reconstruct
from .posterior import mc_mean, mc_std, sample_ensemble, support_mask, uncertainty_report
from .projector import ConeProjector, ParallelProjector, ProjectionStack, Sinogram2D


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(primary_out: str, command: str, config: dict, inputs: list[str]) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": {k: v for k, v in sorted(config.items())},
        "input_hashes": {os.path.basename(p): _sha256(p) for p in inputs if p},
    }
    path = primary_out + ".manifest.json"
    with open(path + ".tmp", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(path + ".tmp", path)


def _apply_config_file(args: argparse.Namespace, argv: list[str]) -> None:
    if not getattr(args, "config", None):
        return
    with open(args.config) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    cli_tokens = set()
    for tok in argv:
        if tok.startswith("--"):
            cli_tokens.add(tok.split("=")[0].lstrip("-").replace("-", "_"))
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ValueError(f"config key {key!r} is not a flag of this command")
        if attr not in cli_tokens:  # explicit flags win
            setattr(args, attr, value)


def _threads_from(args) -> None:
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("CDPA_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        import numba
        numba.set_num_threads(int(threads))


def _load_measurements(path: str):
    data, angles, geom, voxel = read_projections(path)
    if geom is None:
        raise VolumeFormatError("measurement sidecar lacks the field 'geometry'")
    return data, angles, geom, voxel


def _build_problem(data, angles, geom, size: int) -> DCProblem:
    if isinstance(geom, ParallelGeometry2D):
        op = ParallelProjector(geom, angles, (size, size))
    else:
        op = ConeProjector(geom, angles, VolumeGrid(nx=size, ny=size, nz=size))
    return DCProblem(op, data)


def _analytic_recon(data, angles, geom, size: int, filt: FilterSpec) -> np.ndarray:
    if isinstance(geom, ParallelGeometry2D):
        if data.ndim == 3:  # per-slice sinograms of a volume, (nz, K, D)
            return np.stack([fbp(Sinogram2D(s, angles), geom, (size, size), filt)
                             for s in data])
        return fbp(Sinogram2D(data, angles), geom, (size, size), filt)
    grid = VolumeGrid(nx=size, ny=size, nz=size)
    return fdk(ProjectionStack(data, angles, geom), grid, filt)


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------

def _cmd_phantom(args) -> int:
    spec = PhantomSpec(kind=args.kind, size=args.size, seed=args.seed,
                       intensity_range=(args.lo, args.hi))
    vol = make_phantom(spec)
    write_volume(args.out, vol, voxel_size_mm=args.voxel_size)
    if args.montage:
        write_montage(vol if vol.ndim == 3 else vol[None], args.montage, window=(args.lo, args.hi))
    _write_manifest(args.out, "phantom", {
        "kind": args.kind, "size": args.size, "seed": args.seed,
        "lo": args.lo, "hi": args.hi, "voxel_size": args.voxel_size}, [])
    print(f"wrote {args.out} shape {vol.shape}")
    return 0


def _cmd_project(args) -> int:
    vol, voxel = read_volume(args.volume)
    with open(args.geometry) as fh:
        geom = geometry_from_json(fh.read())
    angles = uniform_angles(args.views)
    if isinstance(geom, ParallelGeometry2D):
        if vol.shape[0] == 1:
            proj = ParallelProjector(geom, angles, vol.shape[1:], voxel)
            data = proj.forward(vol[0])
        else:
            proj = ParallelProjector(geom, angles, vol.shape[1:], voxel)
            data = proj.forward(vol)  # (nz, K, D): independent slice problems
    else:
        grid = VolumeGrid(nx=vol.shape[2], ny=vol.shape[1], nz=vol.shape[0], voxel_size=voxel)
        proj = ConeProjector(geom, angles, grid)
        data = proj.forward(vol)
    write_projections(args.out, data, angles, geom, voxel_size_mm=voxel)
    _write_manifest(args.out, "project", {"volume": args.volume, "geometry": args.geometry,
                                          "views": args.views}, [args.volume, args.geometry])
    print(f"wrote {args.out} shape {data.shape}")
    return 0


def _cmd_corrupt(args) -> int:
    data, angles, geom, voxel = _load_measurements(args.infile)
    raw = simulate_counts(data, args.i0, args.i1, args.photons, seed=args.seed)
    corrected, saturated = beer_lambert(raw)
    write_projections(args.out, corrected.astype(np.float32), angles, geom, voxel_size_mm=voxel)
    _write_manifest(args.out, "corrupt", {
        "infile": args.infile, "photons": args.photons, "i0": args.i0, "i1": args.i1,
        "seed": args.seed, "saturated_pixels": saturated}, [args.infile])
    print(f"wrote {args.out} (saturated pixels: {saturated})")
    return 0


def _cmd_recon(args) -> int:
    data, angles, geom, voxel = _load_measurements(args.measurements)
    filt = FilterSpec(kind=args.filter, cutoff=args.cutoff)
    inputs = [args.measurements]
    if args.method in ("fbp", "fdk"):
        recon = _analytic_recon(data, angles, geom, args.size, filt)
    elif args.method == "gd":
        problem = _build_problem(data, angles, geom, args.size)
        init = "zero" if args.init == "zero" else _analytic_recon(data, angles, geom, args.size, filt)
        recon = gd_reconstruct(problem, init, epochs=args.epochs, lr=args.lr, seed=args.seed)
    elif args.method == "denoise":
        model = UNetModel(load_weights(args.weights))
        inputs.append(args.weights)
        analytic = _analytic_recon(data, angles, geom, args.size, filt)
        if analytic.ndim == 2:
            recon = denoise_slices(model, analytic[None], [args.slice_index], angles.count)[0]
        else:
            recon = denoise_slices(model, analytic, np.arange(analytic.shape[0]), angles.count)
    elif args.method in ("dpa", "cdpa"):
        model = UNetModel(load_weights(args.weights))
        inputs.append(args.weights)
        problem = _build_problem(data, angles, geom, args.size)
        score = UNetScore(model, conditional=args.method == "cdpa")
        cfg = SamplerConfig(steps=args.steps, guidance_epochs=args.guidance_epochs,
                            guidance_lr=args.guidance_lr, eta=args.eta,
                            resample_mode=args.resample_mode, seed=args.seed)
        analytic = _analytic_recon(data, angles, geom, args.size, filt)
        if args.samples > 1:
            ens = sample_ensemble(problem, score, cfg, args.samples, args.method,
                                  fdk_condition=analytic if args.method == "cdpa" else None,
                                  slice_index=args.slice_index, num_views=angles.count)
            if args.samples_dir:
                os.makedirs(args.samples_dir, exist_ok=True)
                for j, s in enumerate(ens.samples):
                    write_volume(os.path.join(args.samples_dir, f"sample_{j:03d}.json"), s, voxel)
            recon = mc_mean(ens)
        elif args.method == "dpa":
            recon = dpa_sample(problem, score, cfg)
        else:
            recon = cdpa_sample(problem, analytic,
                                args.slice_index if analytic.ndim == 2 else None,
                                angles.count, score, cfg)
    else:
        raise ValueError(f"unknown method {args.method!r}")
    write_volume(args.out, recon, voxel_size_mm=voxel)
    _write_manifest(args.out, "recon", {k: v for k, v in vars(args).items() if k != "func"}, inputs)
    print(f"wrote {args.out} shape {recon.shape}")
    return 0


def _cmd_finetune(args) -> int:
    vol, voxel = read_volume(args.infile)
    data, angles, geom, _ = _load_measurements(args.measurements)
    x = vol[0] if (vol.shape[0] == 1 and isinstance(geom, ParallelGeometry2D)) else vol
    problem = _build_problem(data, angles, geom, x.shape[-1])
    refined = finetune(x, problem, steps=args.steps, lr=args.lr, seed=args.seed)
    write_volume(args.out, refined, voxel_size_mm=voxel)
    _write_manifest(args.out, "finetune", {"infile": args.infile, "measurements": args.measurements,
                                           "steps": args.steps, "lr": args.lr, "seed": args.seed},
                    [args.infile, args.measurements])
    print(f"wrote {args.out}; dc_loss {dc_loss(x, problem):.6g} -> {dc_loss(refined, problem):.6g}")
    return 0


def _cmd_eval(args) -> int:
    ref, _ = read_volume(args.ref)
    rec, _ = read_volume(args.infile)
    if ref.shape != rec.shape:
        raise ValueError(f"shape mismatch: ref {ref.shape} vs input {rec.shape}")
    cfg = MetricConfig(clamp_lo=args.clamp[0], clamp_hi=args.clamp[1])
    p = psnr(rec, ref, cfg)
    if ref.shape[0] == 1:
        s = ssim2d(rec[0], ref[0], cfg)
        ssim_kind = "ssim2d"
    else:
        s = ssim3(rec, ref, cfg)
        ssim_kind = "ssim3"
    doc = {"psnr_db": None if math.isinf(p) else p, "psnr_infinite": math.isinf(p),
           ssim_kind: s, "clamp": list(args.clamp)}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(text + "\n")
        _write_manifest(args.json, "eval", {"ref": args.ref, "infile": args.infile,
                                            "clamp": list(args.clamp)}, [args.ref, args.infile])
    print(text)
    return 0


def _cmd_posterior(args) -> int:
    data, angles, geom, voxel = _load_measurements(args.measurements)
    model = UNetModel(load_weights(args.weights))
    problem = _build_problem(data, angles, geom, args.size)
    filt = FilterSpec()
    analytic = _analytic_recon(data, angles, geom, args.size, filt)
    score = UNetScore(model, conditional=args.method == "cdpa")
    cfg = SamplerConfig(steps=args.steps, guidance_epochs=args.guidance_epochs,
                        guidance_lr=args.guidance_lr, seed=args.seed)
    ens = sample_ensemble(problem, score, cfg, args.samples, args.method,
                          fdk_condition=analytic if args.method == "cdpa" else None,
                          slice_index=args.slice_index, num_views=angles.count)
    mean = mc_mean(ens)
    std = mc_std(ens)
    write_volume(args.mean_out, mean, voxel_size_mm=voxel)
    std.astype("<f4").tofile(args.std_out)
    doc = {"samples": args.samples, "seeds": list(ens.seeds), "method": args.method,
           "mean_out": args.mean_out, "std_out": args.std_out}
    if args.ref:
        ref, _ = read_volume(args.ref)
        ref = ref[0] if (ref.shape[0] == 1 and mean.ndim == 2) else ref
        mask = support_mask(ref, args.clamp[1])
        report = uncertainty_report(std, np.abs(mean - ref), mask,
                                    mask_rule=f"ground truth > 1% of {args.clamp[1]}")
        doc["uncertainty"] = report.to_dict()
    with open(args.report, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.report, "posterior", {k: v for k, v in vars(args).items() if k != "func"},
                    [args.measurements, args.weights] + ([args.ref] if args.ref else []))
    print(f"wrote {args.mean_out}, {args.std_out}, {args.report}")
    return 0


def _cmd_experiment(args) -> int:
    views_list = [int(v) for v in args.views_list.split(",")] if args.views_list else [args.views]
    base = dict(geometry=args.geometry, size=args.size, test_count=args.test_count,
                seed=args.seed, samples=args.samples, photons=args.photons,
                gd_epochs=args.gd_epochs, gd_lr=args.gd_lr,
                ft_steps=args.ft_steps, ft_lr=args.ft_lr,
                diffusion_steps=args.steps, guidance_epochs=args.guidance_epochs,
                guidance_lr=args.guidance_lr, eta=args.eta,
                diffusion_weights=args.diffusion_weights,
                denoiser_weights=args.denoiser_weights, threads=args.threads)
    progress = (lambda msg: print(msg, flush=True)) if args.verbose else None
    sweep = {}
    for views in views_list:
        out_dir = args.out_dir if len(views_list) == 1 else os.path.join(args.out_dir, f"views_{views:03d}")
        cfg = ExperimentConfig(views=views, out_dir=out_dir, **base)
        results = run_experiment(cfg, progress=progress)
        sweep[str(views)] = results["summary"]
        print(open(os.path.join(out_dir, "table.md")).read())
    if len(views_list) > 1:
        sweep_path = os.path.join(args.out_dir, "sweep.json")
        with open(sweep_path, "w") as fh:
            json.dump(sweep, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {sweep_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--threads", type=int, default=None,
                   help="worker thread cap (default: CDPA_THREADS env or library default)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdpa",
                                     description="Sparse-view CT reconstruction toolkit")
    parser.add_argument("--version", action="version", version=f"cdpa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom volume")
    p.add_argument("--kind", default="random-ellipsoids",
                   choices=["shepp-logan-2d", "shepp-logan-3d", "random-ellipsoids", "nested-shells"])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lo", type=float, default=0.0)
    p.add_argument("--hi", type=float, default=1.0)
    p.add_argument("--voxel-size", type=float, default=1.0)
    p.add_argument("--montage", help="PNG montage path prefix")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("project", help="forward-project a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--geometry", required=True, help="geometry JSON file")
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("corrupt", help="simulate raw counts and re-correct (adds noise)")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--photons", type=float, default=1e5, help="<=0 disables noise")
    p.add_argument("--i0", type=float, default=100.0)
    p.add_argument("--i1", type=float, default=10000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_corrupt)

    p = sub.add_parser("recon", help="reconstruct from measurements")
    p.add_argument("--method", required=True,
                   choices=["fbp", "fdk", "gd", "denoise", "dpa", "cdpa"])
    p.add_argument("--measurements", required=True)
    p.add_argument("--size", type=int, required=True, help="output grid size per axis")
    p.add_argument("--filter", default="ram-lak", choices=["ram-lak", "hann"])
    p.add_argument("--cutoff", type=float, default=1.0)
    p.add_argument("--init", default="zero", choices=["zero", "fdk"], help="gd initialization")
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--lr", type=float, default=2e-2)
    p.add_argument("--weights", help="network weight container (denoise/dpa/cdpa)")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance-epochs", type=int, default=5)
    p.add_argument("--guidance-lr", type=float, default=5e-4)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--resample-mode", default="forward-renoise",
                   choices=["forward-renoise", "posterior-blend"])
    p.add_argument("--samples", type=int, default=1,
                   help=">1 returns the mean of that many posterior samples")
    p.add_argument("--samples-dir", help="also write individual samples here")
    p.add_argument("--slice-index", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_recon)

    p = sub.add_parser("finetune", help="data-consistency fine-tuning of a reconstruction")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="PSNR/SSIM against a reference volume")
    p.add_argument("--ref", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--clamp", type=float, nargs=2, default=[0.0, 1.0])
    p.add_argument("--json", help="also write the metrics document here")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("posterior", help="Monte-Carlo posterior mean/std and uncertainty report")
    p.add_argument("--measurements", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--method", default="cdpa", choices=["dpa", "cdpa"])
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance-epochs", type=int, default=5)
    p.add_argument("--guidance-lr", type=float, default=5e-4)
    p.add_argument("--slice-index", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ref", help="ground truth for the uncertainty report")
    p.add_argument("--clamp", type=float, nargs=2, default=[0.0, 1.0])
    p.add_argument("--mean-out", required=True)
    p.add_argument("--std-out", required=True)
    p.add_argument("--report", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_posterior)

    p = sub.add_parser("experiment", help="full toy-scale method comparison table")
    p.add_argument("--geometry", default="parallel", choices=["parallel", "cone"])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--views-list", help="comma list, e.g. 20,40,60; runs a sweep")
    p.add_argument("--test-count", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--photons", type=float, default=0.0)
    p.add_argument("--gd-epochs", type=int, default=400)
    p.add_argument("--gd-lr", type=float, default=2e-2)
    p.add_argument("--ft-steps", type=int, default=100)
    p.add_argument("--ft-lr", type=float, default=1e-4)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance-epochs", type=int, default=5)
    p.add_argument("--guidance-lr", type=float, default=5e-3)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--diffusion-weights", default="weights/diffusion.cdpa")
    p.add_argument("--denoiser-weights", default="weights/denoiser.cdpa")
    p.add_argument("--out-dir", default="experiment_out")
    p.add_argument("--verbose", action="store_true")
    _add_common(p)
    p.set_defaults(func=_cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args, list(argv))
        _threads_from(args)
        return args.func(args)
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (VolumeFormatError, WeightFormatError, FileNotFoundError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, KeyError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
