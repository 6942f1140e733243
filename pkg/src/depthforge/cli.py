"""Command-line interface.

Subcommands: synth, corrupt, estimate, refine, pipeline, eval, experiment,
sweep.  Every run writes ``config.resolved.txt`` next to its outputs.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure.  ``DEPTHFORGE_THREADS`` caps the number of worker processes used
for seed grids (default 1).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import io
from .config import RunConfig, load_config
from .core import ingest_depth, normalize_depth
from .errors import DepthForgeError, DimensionMismatch, InvalidConfig, IoFailure, NumericalError
from .metrics import CSV_COLUMNS, evaluate, mean_report
from .protocols import (epsilon_sweep, inpainting_trial, n_samples_sweep, noisy_completion_trial,
                        run_pipeline, MIN_DEPTH)
from .refine import refine
from .stochastic import EnsembleStats, estimate
from .synth import CorruptionSpec, corrupt, generate_scene

CSV_HELP = "CSV columns: " + ", ".join(CSV_COLUMNS)
RESOLVED = "config.resolved.txt"


def thread_cap() -> int:
    raw = os.environ.get("DEPTHFORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise InvalidConfig(f"DEPTHFORGE_THREADS must be a positive integer, got {raw!r}") from e
    if n < 1:
        raise InvalidConfig(f"DEPTHFORGE_THREADS must be a positive integer, got {raw!r}")
    return n


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise InvalidConfig(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args) -> RunConfig:
    overrides = _parse_set(getattr(args, "set", None))
    for flag in ("eps", "n_samples", "seed", "seeds", "dims", "iterations", "noise_sigma", "sparse_count"):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[flag] = str(val)
    return load_config(getattr(args, "config", None), overrides)


def _write_resolved(cfg: RunConfig, out_dir) -> None:
    io.ensure_dir(out_dir)
    try:
        with open(os.path.join(out_dir, RESOLVED), "w") as f:
            f.write(cfg.to_kv())
    except OSError as e:
        raise IoFailure(f"cannot write resolved config: {e}") from e


def _open_csv(path):
    try:
        return open(path, "w", newline="")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _load_depth(path, cfg: RunConfig):
    return ingest_depth(io.read_pfm(path), cfg.max_depth)


def _load_mask(path, shape):
    if path is None:
        return None
    m = io.read_mask(path)
    if m.shape != shape:
        raise DimensionMismatch(f"mask {m.shape} does not match depth {shape}")
    return m


# subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    scene_cfg = cfg.scene_config()
    _write_resolved(cfg, args.out)
    with _open_csv(os.path.join(args.out, "manifest.csv")) as f:
        w = csv.writer(f)
        w.writerow(["seed", "rgb", "depth", "height", "width", "min_objects", "max_objects", "d_min", "d_max"])
        for seed in cfg.seeds:
            sc = generate_scene(seed, scene_cfg)
            rgb_name, d_name = f"scene_{seed}.ppm", f"scene_{seed}.pfm"
            io.write_ppm(sc.rgb, os.path.join(args.out, rgb_name))
            io.write_pfm(sc.depth_true, os.path.join(args.out, d_name))
            w.writerow([seed, rgb_name, d_name, scene_cfg.height, scene_cfg.width,
                        scene_cfg.min_objects, scene_cfg.max_objects, scene_cfg.d_min, scene_cfg.d_max])
    return 0


def cmd_corrupt(args) -> int:
    cfg = resolve_config(args)
    d = _load_depth(args.depth, cfg)
    h2i = tuple(float(v) for v in args.h2i.split(",")) if args.h2i else (0.01, 0.1)
    spec = CorruptionSpec(mode=args.mode, noise_ratio=args.noise_ratio, noise_sigma=cfg.noise_sigma,
                          sparse_count=cfg.sparse_count, h2i_range=h2i, coverage=cfg.coverage, seed=cfg.seed)
    d_cond, flagged = corrupt(d, spec)
    _write_resolved(cfg, args.out)
    io.write_pfm(d_cond, os.path.join(args.out, "cond.pfm"))
    io.write_pgm(d_cond > 0, os.path.join(args.out, "mask.pgm"))
    io.write_pgm(flagged, os.path.join(args.out, "corruption.pgm"))
    return 0


def cmd_estimate(args) -> int:
    cfg = resolve_config(args)
    d = _load_depth(args.depth, cfg)
    rgb = io.read_ppm(args.rgb)
    m = _load_mask(args.mask, d.shape)
    m = (d > 0) if m is None else (m & (d > 0))
    d_norm, norm = normalize_depth(d, m, cfg.quantiles)
    stats = estimate(rgb, d_norm, m, cfg.n_samples, cfg.seed, cfg.gmrf_params())
    _write_resolved(cfg, args.out)
    _write_stats(stats, args.out, args.gamma)
    with _open_csv(os.path.join(args.out, "norm.csv")) as f:
        w = csv.writer(f)
        w.writerow(["scale", "shift", "n_samples", "seed"])
        w.writerow([repr(norm.scale), repr(norm.shift), stats.n_samples, cfg.seed])
    return 0


def _write_stats(stats, out, gamma):
    io.write_pfm(stats.mu_hat, os.path.join(out, "mu.pfm"))
    io.write_pfm(stats.sigma2_hat, os.path.join(out, "sigma2.pfm"))
    io.write_pgm(io.to_gray8(stats.sigma2_hat, gamma=gamma), os.path.join(out, "sigma2.pgm"))


def _write_fit(path, fit, result, cfg):
    with _open_csv(path) as f:
        w = csv.writer(f)
        w.writerow(["a", "b", "residual_rms", "support_count", "reliable_pixels", "final_coverage", "eps",
                    "iterations"])
        w.writerow([repr(fit.a), repr(fit.b), repr(fit.residual_rms), fit.support_count,
                    int(result.reliable_mask.sum()) if result is not None else "",
                    f"{result.mask.mean():.6f}" if result is not None else "", cfg.eps, cfg.iterations])


def cmd_refine(args) -> int:
    cfg = resolve_config(args)
    d = _load_depth(args.depth, cfg)
    rgb = io.read_ppm(args.rgb)
    m = _load_mask(args.mask, d.shape)
    m = (d > 0) if m is None else (m & (d > 0))
    mu = io.read_pfm(args.mu).astype(np.float64)
    sig = io.read_pfm(args.sigma2).astype(np.float64)
    stats = EnsembleStats(mu_hat=mu, sigma2_hat=sig, n_samples=cfg.n_samples)
    res = refine(d, m, stats, rgb, cfg=cfg.refine_config(), return_details=True)
    _write_resolved(cfg, args.out)
    io.write_pfm(res.depth, os.path.join(args.out, "refined.pfm"))
    io.write_pgm(res.mask, os.path.join(args.out, "mask_final.pgm"))
    io.write_pgm(res.certainty, os.path.join(args.out, "mask_sigma.pgm"))
    _write_fit(os.path.join(args.out, "fit.csv"), res.fit, res, cfg)
    return 0


def cmd_pipeline(args) -> int:
    cfg = resolve_config(args)
    d = _load_depth(args.depth, cfg)
    rgb = io.read_ppm(args.rgb)
    m = _load_mask(args.mask, d.shape)
    res = run_pipeline(rgb, d, m, cfg.n_samples, cfg.seed, cfg.gmrf_params(), cfg.refine_config(),
                       mode=args.mode, quantiles=cfg.quantiles)
    _write_resolved(cfg, args.out)
    _write_stats(res.stats, args.out, args.gamma)
    io.write_pfm(res.diff_only, os.path.join(args.out, "diff_only.pfm"))
    if res.refined is not None:
        io.write_pgm(res.refined.certainty, os.path.join(args.out, "mask_sigma.pgm"))
        io.write_pgm(res.refined.mask, os.path.join(args.out, "mask_final.pgm"))
        io.write_pfm(res.refined.depth, os.path.join(args.out, "refined.pfm"))
        _write_fit(os.path.join(args.out, "fit.csv"), res.refined.fit, res.refined, cfg.refine_config())
    else:
        _write_fit(os.path.join(args.out, "fit.csv"), res.diff_fit, None, cfg.refine_config())
    return 0


def cmd_eval(args) -> int:
    pred = io.read_pfm(args.pred).astype(np.float64)
    gt = io.read_pfm(args.gt).astype(np.float64)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs truth {gt.shape}")
    m = _load_mask(args.mask, gt.shape)
    m = (gt > 0) if m is None else (m & (gt > 0))
    ks = tuple(float(k) for k in args.ks.split(","))
    rep = evaluate(np.maximum(pred, MIN_DEPTH), gt, m, ks)
    row = rep.csv_row(args.run_id, "eval", "", "")
    out = sys.stdout if args.out is None else _open_csv(args.out)
    try:
        w = csv.writer(out)
        w.writerow(CSV_COLUMNS)
        w.writerow(row)
    finally:
        if out is not sys.stdout:
            out.close()
    if args.error_map:
        err = np.abs(pred - gt)
        lo, hi = (0.0, args.error_range) if args.error_range else (None, None)
        io.write_pgm(io.to_gray8(err, lo, hi, mask=m), args.error_map)
    return 0


def _noisy_job(job):
    seed, ratio, pcfg = job
    tr = noisy_completion_trial(seed, ratio, pcfg)
    return [(name, tr.report(name)) for name in ("refined", "diff_only", "raw")]


def _inpaint_job(job):
    seed, h2i, pcfg = job
    tr = inpainting_trial(seed, h2i, pcfg)
    return [(name, tr.report(name)) for name in ("refined", "diff_only", "prior_only")]


def _run_jobs(fn, jobs):
    workers = thread_cap()
    if workers == 1 or len(jobs) <= 1:
        yield from map(fn, jobs)
        return
    with ProcessPoolExecutor(max_workers=workers) as ex:
        yield from ex.map(fn, jobs)


def cmd_experiment(args) -> int:
    cfg = resolve_config(args)
    pcfg = cfg.protocol_config()
    if args.protocol == "noisy-completion":
        conditions = [float(r) for r in cfg.noise_ratios]
        fn = _noisy_job
    else:
        conditions = [tuple(b) for b in cfg.h2i_bins]
        fn = _inpaint_job
    _write_resolved(cfg, args.out)
    jobs = [(s, c, pcfg) for c in conditions for s in cfg.seeds]
    path = os.path.join(args.out, "report.csv")
    per_cond = {}
    with _open_csv(path) as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        f.flush()
        for (seed, cond, _), reports in zip(jobs, _run_jobs(fn, jobs)):
            label = _cond_label(cond)
            for name, rep in reports:
                w.writerow(rep.csv_row(f"{name}-s{seed}", args.protocol, label, seed))
                per_cond.setdefault((label, name), []).append(rep)
            f.flush()
        for (label, name), reps in per_cond.items():
            w.writerow(mean_report(reps).csv_row(f"{name}-mean", args.protocol, label, "mean"))
    return 0


def _cond_label(cond) -> str:
    if isinstance(cond, tuple):
        return f"({cond[0]:g},{cond[1]:g}]"
    return f"{cond:g}"


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    pcfg = cfg.protocol_config()
    ratio = float(args.noise_ratio)
    _write_resolved(cfg, args.out)
    path = os.path.join(args.out, "sweep.csv")
    rows = {}
    with _open_csv(path) as f:
        w = csv.writer(f)
        w.writerow(["axis", "value"] + list(CSV_COLUMNS))
        for seed in cfg.seeds:
            if args.axis == "n-samples":
                d_true, out = n_samples_sweep(seed, ratio, cfg=pcfg)
                items = [(n, depth, sig) for n, (depth, sig) in out.items()]
            elif args.axis == "epsilon":
                d_true, out = epsilon_sweep(seed, ratio, cfg=pcfg)
                items = [(eps, depth, cert) for eps, (depth, cert) in out.items()]
            else:
                tr = noisy_completion_trial(seed, ratio, pcfg, ablation=True)
                d_true = tr.d_true
                items = [("with", tr.outputs["refined"], None), ("without", tr.outputs["no_sigma2"], None)]
            full = np.ones(d_true.shape, dtype=bool)
            for value, depth, panel in items:
                rep = evaluate(np.maximum(depth, MIN_DEPTH), d_true, full)
                w.writerow([args.axis, value] + rep.csv_row(f"{args.axis}-{value}-s{seed}", "noisy-completion",
                                                            f"{ratio:g}", seed))
                rows.setdefault(value, []).append(rep)
                if panel is not None and seed == cfg.seeds[0]:
                    img = io.to_gray8(panel, gamma=args.gamma) if panel.dtype != bool else panel
                    io.write_pgm(img, os.path.join(args.out, f"panel_{args.axis}_{value}.pgm"))
            f.flush()
        for value, reps in rows.items():
            w.writerow([args.axis, value] + mean_report(reps).csv_row(f"{args.axis}-{value}-mean",
                                                                      "noisy-completion", f"{ratio:g}", "mean"))
    return 0


# parser ------------------------------------------------------------------

def _common(p, out_required=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("-o", "--out", required=out_required, help="output directory")


def _stage_flags(p):
    p.add_argument("--eps", type=float, help="certainty threshold on the variance (default 0.01)")
    p.add_argument("--n-samples", dest="n_samples", type=int, help="ensemble size N (default 10)")
    p.add_argument("--iterations", type=int, help="propagation rounds K (default 6)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--gamma", type=float, default=0.5, help="display gamma for variance images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthforge", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic RGB-D scenes")
    _common(p)
    p.add_argument("--seeds", help="e.g. 0..9 or 1,4,7")
    p.add_argument("--dims", help="HxW, e.g. 64x64")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corrupt", help="apply a corruption protocol to a depth map")
    _common(p)
    p.add_argument("--depth", required=True)
    p.add_argument("--mode", choices=("sparse+noise", "holes", "structured-mask"), default="sparse+noise")
    p.add_argument("--noise-ratio", type=float, default=0.1)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, help="scene units (default 15%% of range)")
    p.add_argument("--sparse-count", dest="sparse_count", type=int)
    p.add_argument("--h2i", help="lo,hi removed-area fraction")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_corrupt)

    for name, fn, helptext in (("estimate", cmd_estimate, "stage 1: ensemble mean and variance"),
                               ("pipeline", cmd_pipeline, "both stages end to end")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _stage_flags(p)
        p.add_argument("--rgb", required=True)
        p.add_argument("--depth", required=True)
        p.add_argument("--mask", help="optional conditioning mask (PGM)")
        if name == "pipeline":
            p.add_argument("--mode", choices=("full", "diff-only"), default="full")
        p.set_defaults(func=fn)

    p = sub.add_parser("refine", help="stage 2 from saved ensemble statistics")
    _common(p)
    _stage_flags(p)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", required=True, help="conditioning depth in scene units")
    p.add_argument("--mask")
    p.add_argument("--mu", required=True)
    p.add_argument("--sigma2", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="metrics of a prediction against ground truth", epilog=CSV_HELP)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask")
    p.add_argument("--ks", default="1.25")
    p.add_argument("--run-id", dest="run_id", default="eval")
    p.add_argument("-o", "--out", help="CSV path (stdout by default)")
    p.add_argument("--error-map", dest="error_map", help="write |error| as an 8-bit PGM")
    p.add_argument("--error-range", dest="error_range", type=float,
                   help="fixed upper end of the error display range (per-image by default)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run a protocol over a seed grid", epilog=CSV_HELP)
    _common(p)
    p.add_argument("--protocol", choices=("noisy-completion", "inpainting"), required=True)
    p.add_argument("--seeds")
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("sweep", help="sensitivity sweeps", epilog="CSV columns: axis, value, " + ", ".join(CSV_COLUMNS))
    _common(p)
    p.add_argument("--axis", choices=("n-samples", "epsilon", "sigma2-ablation"), required=True)
    p.add_argument("--seeds")
    p.add_argument("--noise-ratio", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.5)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DepthForgeError as e:
        print(f"depthforge: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"depthforge: error: {e}", file=sys.stderr)
        return 3
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"depthforge: error: {e}", file=sys.stderr)
        return NumericalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
