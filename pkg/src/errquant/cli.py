"""``errquant`` command line: corrupt, calibrate, predict, evaluate and studies.

Every command is a function of (config, inputs, seed).  Per-image work runs in
a process pool; results are gathered in sorted input order, and image ``i``
uses the seed ``SeedSequence([seed, i])``, so output does not depend on
``--workers``.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bp
from .conformal import (
    BinningScheme,
    PixelTables,
    Records,
    build_pixel_tables,
    build_table,
    coverage,
    load_table,
    mutual_information,
    pool_records,
    predict_quantile,
)
from .config import ExperimentConfig
from .core import ConfigError, DivergenceError, DomainError, GaussianLikelihood, PosteriorModel, ShapeError, StatisticalError
from .imageio import center_crop, read_grid, write_cif
from .metrics import psnr, ssim
from .priors import make_prior
from .samplers import num_samples, run_sampler
from .toy1d import MixtureSpec, density_grid, toy_pipeline_check

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


# --- helpers ----------------------------------------------------------------


def image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def q_tag(q: float) -> str:
    return f"{q:g}"


def image_stem(path) -> str:
    stem = Path(path).stem
    for suffix in ("_gt", "_z", "_xhat"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def _sorted_paths(paths) -> list[Path]:
    return sorted(Path(p) for p in paths)


def _pair(truths, observed) -> list[tuple[Path, Path]]:
    truths, observed = _sorted_paths(truths), _sorted_paths(observed)
    if len(truths) != len(observed):
        raise ConfigError(f"got {len(truths)} ground truths but {len(observed)} observations")
    for t, o in zip(truths, observed):
        if image_stem(t) != image_stem(o):
            raise ConfigError(f"unpaired inputs {t.name} and {o.name}")
    return list(zip(truths, observed))


def _map(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def build_model(cfg: ExperimentConfig, z: np.ndarray, prior_name: str | None = None) -> PosteriorModel:
    name = prior_name or cfg.prior
    foe = cfg.foe_spec() if name == "foe" else None
    prior = make_prior(name, z.shape, huber_delta=cfg.huber_delta, foe=foe)
    return PosteriorModel(GaussianLikelihood(cfg.noise_sigma, z), prior, lam=cfg.lam)


def posterior_stats(cfg: ExperimentConfig, z: np.ndarray, seed: int, trace_path=None):
    """Run the configured sampler on ``z``; returns (mean, variance) maps."""
    model = build_model(cfg, z)
    if trace_path is not None and cfg.trace_every > 0:
        with open(trace_path, "w") as fh:
            fh.write(cfg.header() + "\n")
            stats = run_sampler(cfg.sampler, model, cfg.sampler_config(seed), trace=fh, trace_every=cfg.trace_every)
    else:
        stats = run_sampler(cfg.sampler, model, cfg.sampler_config(seed))
    return stats.mean, stats.variance


def _stats_job(job):
    cfg, path, index, trace_path = job
    z = read_grid(path)
    mean, var = posterior_stats(cfg, z, image_seed(cfg.seed, index), trace_path)
    return z, mean, var


def _write_csv(path, header: str, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --- commands ---------------------------------------------------------------


def cmd_corrupt(cfg: ExperimentConfig, images, out_dir: Path, sigma: float | None = None) -> list[Path]:
    """Write ``{stem}_gt.cif`` (cropped truth) and ``{stem}_z.cif`` (noisy)."""
    sigma = cfg.noise_sigma if sigma is None else sigma
    if sigma < 0:
        raise ConfigError("noise sigma must be nonnegative")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, path in enumerate(_sorted_paths(images)):
        x = read_grid(path)
        if cfg.crop > 0 and min(x.shape) > cfg.crop:
            x = center_crop(x, cfg.crop)
        rng = np.random.Generator(np.random.PCG64(image_seed(cfg.seed, i)))
        z = x + sigma * rng.standard_normal(x.shape)
        stem = image_stem(path)
        write_cif(out_dir / f"{stem}_gt.cif", x)
        write_cif(out_dir / f"{stem}_z.cif", z)
        written.append(out_dir / f"{stem}_z.cif")
    return written


def cmd_calibrate(cfg: ExperimentConfig, truths, observed, out_dir: Path) -> dict:
    pairs = _pair(truths, observed)
    if not pairs:
        raise ConfigError("calibration needs at least one image pair")
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, o, i, None) for i, (_, o) in enumerate(pairs)]
    results = _map(_stats_job, jobs, cfg.workers)
    xs = [read_grid(t) for t, _ in pairs]
    for x, (z, _, _), (t, _) in zip(xs, results, pairs):
        if x.shape != z.shape:
            raise ShapeError(f"{t.name}: truth shape {x.shape} differs from observation {z.shape}")
    means = [r[1] for r in results]
    variances = [r[2] for r in results]
    joint = pool_records("joint", xs, means, variances)
    joint.to_csv(out_dir / "records.csv", header=cfg.header())
    bins = BinningScheme.from_data(joint.t_hat, cfg.bins, cfg.bin_scale)
    separate = pool_records("separate", xs, means, variances) if cfg.pooling == "separate" else None
    tables = {}
    for q in cfg.q:
        if separate is None:
            table = build_table(joint, bins, q, cfg.ess_sup)
        else:
            table = build_pixel_tables(separate, xs[0].shape, bins, q, cfg.ess_sup)
        path = out_dir / f"table_q{q_tag(q)}.csv"
        table.to_csv(path, header=cfg.header())
        tables[q] = path
    return tables


def _load_tables(paths, wanted) -> list:
    tables = []
    for p in paths:
        try:
            tables.append(load_table(p))
        except (ValueError, IndexError) as exc:
            raise OSError(f"{p}: cannot read quantile table ({exc})") from exc
    have = {t.q for t in tables}
    missing = [q for q in wanted if q not in have]
    if missing:
        raise ConfigError(f"no table for q={', '.join(q_tag(q) for q in missing)}")
    if wanted:
        tables = [t for t in tables if t.q in set(wanted)]
    return tables


def cmd_predict(cfg: ExperimentConfig, table_paths, observed, out_dir: Path, wanted_q=()) -> list[Path]:
    tables = _load_tables(table_paths, wanted_q)
    if not tables:
        raise ConfigError("predict needs at least one quantile table")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = _sorted_paths(observed)
    jobs = []
    for i, p in enumerate(paths):
        trace = out_dir / f"{image_stem(p)}_trace.csv" if cfg.trace_every > 0 else None
        jobs.append((cfg, p, i, trace))
    results = _map(_stats_job, jobs, cfg.workers)
    written = []
    for p, (_, mean, var) in zip(paths, results):
        stem = image_stem(p)
        write_cif(out_dir / f"{stem}_xhat.cif", mean)
        write_cif(out_dir / f"{stem}_that.cif", var)
        written += [out_dir / f"{stem}_xhat.cif", out_dir / f"{stem}_that.cif"]
        for tab in tables:
            if isinstance(tab, PixelTables):
                sq = tab.predict(var)
            else:
                sq = predict_quantile(tab, var)
            path = out_dir / f"{stem}_sq{q_tag(tab.q)}.cif"
            write_cif(path, sq)
            written.append(path)
    return written


def cmd_evaluate(cfg: ExperimentConfig, truths, pred_dir: Path, out_path: Path, wanted_q=()) -> list[list]:
    """Per-image PSNR, SSIM, coverage per q and MI; last row holds means.

    The MI entry of the summary row pools the records of all images.
    """
    truths = _sorted_paths(truths)
    if not truths:
        raise ConfigError("evaluate needs ground truth files")
    qs = list(wanted_q) or _discover_q(pred_dir, image_stem(truths[0]))
    rows, all_records = [], []
    for t in truths:
        stem = image_stem(t)
        x = read_grid(t)
        xhat = read_grid(pred_dir / f"{stem}_xhat.cif")
        that = read_grid(pred_dir / f"{stem}_that.cif")
        if not (x.shape == xhat.shape == that.shape):
            raise ShapeError(f"{stem}: truth and prediction shapes differ")
        s = (xhat - x) ** 2
        rec = Records(s, that)
        all_records.append(rec)
        cov = [coverage(s, read_grid(pred_dir / f"{stem}_sq{q_tag(q)}.cif")) for q in qs]
        rows.append([stem, psnr(xhat, x), ssim(xhat, x), *cov, _mi_or_nan(rec)])
    body = np.array([r[1:-1] for r in rows], dtype=np.float64)
    summary = ["mean", *[float(v) for v in body.mean(axis=0)], _mi_or_nan(Records.concat(all_records))]
    rows.append(summary)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["image", "psnr", "ssim", *[f"coverage_q{q_tag(q)}" for q in qs], "mi"]
    _write_csv(out_path, cfg.header(), cols, rows)
    return rows


def _discover_q(pred_dir: Path, stem: str) -> list[float]:
    qs = []
    for p in sorted(pred_dir.glob(f"{stem}_sq*.cif")):
        try:
            qs.append(float(p.stem[len(stem) + 3 :]))
        except ValueError:
            continue
    return sorted(qs)


def _mi_or_nan(rec: Records) -> float:
    try:
        return mutual_information(rec)
    except StatisticalError:
        return math.nan


def geometric_checkpoints(n: int) -> list[int]:
    pts = [1 << k for k in range(n.bit_length()) if (1 << k) <= n]
    if not pts or pts[-1] != n:
        pts.append(n)
    return pts


def _bp_reference(cfg: ExperimentConfig, z: np.ndarray):
    labels = bp.LabelSpace(cfg.labels)
    marg = bp.bp_sweep(bp.tv_mrf(z, cfg.noise_sigma, cfg.lam, labels), cfg.bp_iterations)
    return marg, labels


def _chain_convergence(cfg: ExperimentConfig, z, bp_mean, bp_var) -> list[tuple[int, int, float, float]]:
    model = build_model(cfg, z)
    scfg = cfg.sampler_config()
    n = num_samples(cfg.iterations, cfg.burn_in, cfg.thinning)
    rows = []

    def hook(count, k, stats):
        rows.append((count, k, bp.mean_abs_diff(bp_mean, stats.mean), bp.mean_abs_diff(bp_var, stats.variance)))

    run_sampler(cfg.sampler, model, scfg, checkpoints=geometric_checkpoints(n), on_checkpoint=hook)
    return rows


def cmd_bp_compare(cfg: ExperimentConfig, observed: Path, out_dir: Path, export_marginals: bool = False, slice_row=None) -> Path:
    z = read_grid(observed)
    out_dir.mkdir(parents=True, exist_ok=True)
    marg, labels = _bp_reference(cfg, z)
    bp_mean, bp_var = bp.bp_moments(marg, labels)
    write_cif(out_dir / "bp_mean.cif", bp_mean)
    write_cif(out_dir / "bp_var.cif", bp_var)
    if export_marginals:
        bp.export_marginals_raw(marg, out_dir / "marginals")
    if slice_row is not None:
        if not 0 <= slice_row < z.shape[0]:
            raise ConfigError(f"slice row {slice_row} outside the image")
        bp.write_marginal_slice(out_dir / f"marginal_row{slice_row}.csv", marg, labels, slice_row, cfg.header())
    rows = _chain_convergence(cfg, z, bp_mean, bp_var)
    path = out_dir / "bp_compare.csv"
    _write_csv(path, cfg.header(), ["samples", "iterations", "md_mean", "md_var"], rows)
    return path


def cmd_thinning_study(cfg: ExperimentConfig, observed: Path, out_dir: Path) -> Path:
    z = read_grid(observed)
    out_dir.mkdir(parents=True, exist_ok=True)
    marg, labels = _bp_reference(cfg, z)
    bp_mean, bp_var = bp.bp_moments(marg, labels)
    rows = []
    for h in sorted(set(cfg.thinning_list)):
        sub = replace(cfg, thinning=h)
        for count, k, md_m, md_v in _chain_convergence(sub, z, bp_mean, bp_var):
            rows.append((h, count, k, md_m, md_v))
    path = out_dir / "thinning_study.csv"
    _write_csv(path, cfg.header(), ["thinning", "samples", "iterations", "md_mean", "md_var"], rows)
    return path


def toy_spec(cfg: ExperimentConfig) -> MixtureSpec:
    k = len(cfg.toy_centers)
    weights = cfg.toy_weights or (1.0 / k,) * k
    if len(weights) != k:
        raise ConfigError("toy_weights must match toy_centers")
    return MixtureSpec(tuple(cfg.toy_centers), (cfg.toy_sigma_x**2,) * k, tuple(weights), cfg.toy_sigma_z**2)


def cmd_toy(cfg: ExperimentConfig, out_dir: Path, density: bool = True) -> list:
    spec = toy_spec(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for q in cfg.q:
        res = toy_pipeline_check(spec, cfg.toy_m, cfg.toy_n, q, seed=cfg.seed, n_bins=cfg.bins)
        res.to_csv(out_dir / f"toy_bins_q{q_tag(q)}.csv", header=cfg.header())
        results.append(res)
    _write_csv(out_dir / "toy_coverage.csv", cfg.header(), ["q", "coverage"], [(r.q, r.coverage) for r in results])
    if density:
        ss, ts, dens = density_grid(spec)
        rows = [(float(s), float(t), float(d)) for t, row in zip(ts, dens) for s, d in zip(ss, row)]
        _write_csv(out_dir / "toy_density.csv", cfg.header(), ["s", "t", "density"], rows)
    return results


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out-dir", type=Path, default=Path("out"))
    common.add_argument("--q", type=float, action="append", help="quantile level (repeatable)")
    common.add_argument("--pooling", choices=("joint", "separate"))

    parser = argparse.ArgumentParser(prog="errquant", description="Conformal error quantiles for MCMC image posteriors.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corrupt", parents=[common], help="add Gaussian noise to clean images")
    p.add_argument("images", nargs="+", type=Path)
    p.add_argument("--sigma", type=float, help="noise std (default: config noise_sigma)")

    p = sub.add_parser("calibrate", parents=[common], help="build quantile tables from paired data")
    p.add_argument("--truth", nargs="+", type=Path, required=True)
    p.add_argument("--observed", nargs="+", type=Path, required=True)

    p = sub.add_parser("predict", parents=[common], help="posterior estimate plus error quantile maps")
    p.add_argument("--table", nargs="+", type=Path, required=True)
    p.add_argument("--observed", nargs="+", type=Path, required=True)

    p = sub.add_parser("evaluate", parents=[common], help="coverage, PSNR, SSIM and MI of predictions")
    p.add_argument("--truth", nargs="+", type=Path, required=True)
    p.add_argument("--pred-dir", type=Path, required=True)

    p = sub.add_parser("bp-compare", parents=[common], help="chain moments against a BP reference")
    p.add_argument("--observed", type=Path, required=True)
    p.add_argument("--export-marginals", action="store_true")
    p.add_argument("--slice-row", type=int)

    p = sub.add_parser("thinning-study", parents=[common], help="bp-compare over several thinning factors")
    p.add_argument("--observed", type=Path, required=True)
    p.add_argument("--h", type=int, action="append", help="thinning factor (repeatable)")

    p = sub.add_parser("toy", parents=[common], help="1D Gaussian-mixture coverage check")
    p.add_argument("--no-density", action="store_true")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.q:
        overrides["q"] = tuple(args.q)
    if args.pooling:
        overrides["pooling"] = args.pooling
    if getattr(args, "h", None):
        overrides["thinning_list"] = tuple(args.h)
    if args.config is not None and not args.config.is_file():
        raise OSError(f"config file not found: {args.config}")
    cfg = ExperimentConfig.load(args.config, overrides)
    if args.command in ("bp-compare", "thinning-study"):
        return _validate_bp(cfg)
    return cfg.validate()


def _validate_bp(cfg: ExperimentConfig) -> ExperimentConfig:
    # BP needs the TV model; ula/pula chains run on its Huber smoothing instead
    if cfg.prior == "tv" and cfg.sampler in ("ula", "pula"):
        cfg = replace(cfg, prior="huber_tv")
    if cfg.prior not in ("tv", "huber_tv"):
        raise ConfigError("bp-compare needs prior tv (BP requires a pairwise model)")
    return cfg.validate()


def run(args) -> int:
    cfg = _config_from_args(args)
    out = args.out_dir
    if args.command == "corrupt":
        cmd_corrupt(cfg, args.images, out, args.sigma)
    elif args.command == "calibrate":
        cmd_calibrate(cfg, args.truth, args.observed, out)
    elif args.command == "predict":
        cmd_predict(cfg, args.table, args.observed, out, tuple(args.q or ()))
    elif args.command == "evaluate":
        cmd_evaluate(cfg, args.truth, args.pred_dir, out / "metrics.csv", tuple(args.q or ()))
    elif args.command == "bp-compare":
        cmd_bp_compare(cfg, args.observed, out, args.export_marginals, args.slice_row)
    elif args.command == "thinning-study":
        cmd_thinning_study(cfg, args.observed, out)
    elif args.command == "toy":
        cmd_toy(cfg, out, density=not args.no_density)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except DivergenceError as exc:
        print(f"error: chain diverged at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ShapeError, DomainError, StatisticalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
