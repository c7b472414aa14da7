"""Command-line harness: ``rank-surfaces run|bench|sir --config PATH``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunSpec, load, run_specs
from .designer import Designer, RunReport
from .gp import FitResult, InsufficientDataError, KrigingModel, NumericalError, ObservationSet, default_bounds, fit_hyperparameters
from .problems import make_problem

log = logging.getLogger("rank_surfaces")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def fmt(v) -> str:
    """Shortest round-tripping text for a number (``repr`` of a Python float)."""
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    f = float(v)
    return repr(f) if np.isfinite(f) else str(f)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def default_jobs() -> int:
    env = os.environ.get("RANK_SURFACES_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer RANK_SURFACES_JOBS=%r", env)
    return os.cpu_count() or 1


# -- single runs -----------------------------------------------------------------


def execute(spec: RunSpec) -> RunReport:
    problem = make_problem(spec.problem_block["name"], spec.problem_block.get("params"))
    return Designer(problem, spec.designer, spec.kernels, spec.grid, spec.weights).run()


def _coord_names(dim: int) -> list[str]:
    return [f"x{j + 1}" for j in range(dim)]


def write_run(out: Path, report: RunReport, labels, has_truth: bool):
    out.mkdir(parents=True, exist_ok=True)
    dim = report.grid.shape[1]
    write_csv(
        out / "design.csv",
        ["step", *_coord_names(dim), "surface", "sample_mean", "noise_var", "batch_size"],
        ([r.step, *r.location, labels[r.surface], r.sample_mean, r.noise_variance, r.batch_size]
         for r in report.design.records),
    )
    header = ["step", "empirical_loss"] + (["true_loss"] if has_truth else []) + ["error_prob"]
    write_csv(
        out / "trace.csv",
        header,
        ([t.k, t.empirical_loss] + ([t.true_loss] if has_truth else []) + [t.error_probability]
         for t in report.trace),
    )
    write_csv(
        out / "classifier.csv",
        ["point", *_coord_names(dim), "surface", "m_gap", "p_best"],
        ([j, *report.grid[j], labels[int(c)], report.m_gap[j], report.p_best[j]]
         for j, c in enumerate(report.classifier)),
    )


def summary_dict(report: RunReport, labels, raw_config: dict) -> dict:
    final = report.final
    return {
        "version": f"rank-surfaces {__version__}",
        "steps": final.k,
        "empirical_loss": final.empirical_loss,
        "true_loss": final.true_loss,
        "error_prob": final.error_probability,
        "counts": {labels[j]: int(c) for j, c in enumerate(report.counts)},
        "stopped_early": report.stopped_early,
        "m_gap_clamped": report.m_gap_clamped,
        "kernels": [
            {"scale": m.kernel.scale, "theta": list(m.kernel.theta), "trend": m.kernel.trend, "nugget": nug}
            for m, nug in zip(report.models, report.nuggets)
        ],
        "wall_time_s": report.wall_time,
        "config": raw_config,
    }


def _formats(raw: dict) -> set[str]:
    """Output families to write: ``csv`` tables and/or ``json`` summaries (both by default)."""
    return set(raw.get("output", {}).get("formats", ["csv", "json"]))


def _write_summary(path: Path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _output_dir(args, raw: dict, default: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(raw.get("output", {}).get("directory", default))


def cmd_run(args) -> int:
    cfg = load(args.config)
    problem, methods = run_specs(cfg, seed=args.seed)
    spec = methods[0][1][0]
    report = execute(spec)
    out = _output_dir(args, cfg.raw, "out")
    out.mkdir(parents=True, exist_ok=True)
    formats = _formats(cfg.raw)
    if "csv" in formats:
        write_run(out, report, problem.labels, problem.has_truth)
    if "json" in formats:
        _write_summary(out / "summary.json", summary_dict(report, problem.labels, cfg.raw))
    log.info("run finished: k=%d EL=%.4g in %.1fs", report.final.k, report.final.empirical_loss, report.wall_time)
    return EXIT_OK


# -- replication sweeps ------------------------------------------------------------


def _bench_task(spec: RunSpec, save_dir: str | None):
    try:
        report = execute(spec)
    except (NumericalError, InsufficientDataError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
    if save_dir is not None:
        problem = make_problem(spec.problem_block["name"], spec.problem_block.get("params"))
        write_run(Path(save_dir), report, problem.labels, problem.has_truth)
    f = report.final
    return {
        "ok": True,
        "empirical_loss": f.empirical_loss,
        "true_loss": f.true_loss,
        "error_prob": f.error_probability,
        "counts": [int(c) for c in report.counts],
        "wall_time": report.wall_time,
    }


def run_tasks(tasks, jobs: int):
    """Run ``(spec, save_dir)`` tasks, in order, across ``jobs`` processes."""
    if jobs <= 1 or len(tasks) <= 1:
        return [_bench_task(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_bench_task, *zip(*tasks)))


def _mean_se(values):
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return None, None
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else None
    return float(v.mean()), se


def bench_tables(problem, methods, results):
    """Rows of ``bench.csv`` and ``bench_summary.csv``."""
    L = problem.L
    count_cols = [f"D_{lab}" for lab in problem.labels]
    rows, summary = [], []
    it = iter(results)
    for name, runs in methods:
        res = [next(it) for _ in runs]
        for i, (spec, r) in enumerate(zip(runs, res)):
            if r["ok"]:
                rows.append([name, i, spec.designer.seed, 0, r["empirical_loss"], r["true_loss"], r["error_prob"], *r["counts"], ""])
            else:
                rows.append([name, i, spec.designer.seed, 1, None, None, None, *([None] * L), r["error"]])
        ok = [r for r in res if r["ok"]]
        el = _mean_se(r["empirical_loss"] for r in ok)
        tl = _mean_se(r["true_loss"] for r in ok)
        ep = _mean_se(r["error_prob"] for r in ok)
        counts = [_mean_se(r["counts"][j] for r in ok)[0] for j in range(L)]
        summary.append([name, len(ok), len(res) - len(ok), *el, *tl, *ep, *counts])
    header = ["method", "replicate", "seed", "failed", "empirical_loss", "true_loss", "error_prob", *count_cols, "error"]
    sheader = ["method", "n_ok", "n_failed", "empirical_loss_mean", "empirical_loss_se", "true_loss_mean",
               "true_loss_se", "error_prob_mean", "error_prob_se", *[f"{c}_mean" for c in count_cols]]
    return (header, rows), (sheader, summary)


def cmd_bench(args) -> int:
    cfg = load(args.config)
    problem, methods = run_specs(cfg, seed=args.seed, bench=True)
    out = _output_dir(args, cfg.raw, "bench_out")
    out.mkdir(parents=True, exist_ok=True)
    save = cfg.raw.get("output", {}).get("save_runs", False)
    tasks = []
    for name, runs in methods:
        for i, spec in enumerate(runs):
            save_dir = str(out / "runs" / _safe(name) / f"rep{i:03d}") if save else None
            tasks.append((spec, save_dir))
    t0 = time.perf_counter()
    results = run_tasks(tasks, args.jobs)
    (h, rows), (sh, srows) = bench_tables(problem, methods, results)
    formats = _formats(cfg.raw)
    if "csv" in formats:
        write_csv(out / "bench.csv", h, rows)
        write_csv(out / "bench_summary.csv", sh, srows)
    failed = sum(1 for r in results if not r["ok"])
    if "json" in formats:
        _write_summary(out / "bench_timing.json", {
            "version": f"rank-surfaces {__version__}", "wall_time_s": time.perf_counter() - t0,
            "run_times_s": [r.get("wall_time") for r in results], "failed": failed, "config": cfg.raw})
    for row in srows:
        log.info("%s: EL=%s (n=%d)", row[0], fmt(row[3]), row[1])
    if failed:
        log.warning("%d replicate(s) failed; see bench.csv", failed)
    return EXIT_OK


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


# -- epidemic case study -------------------------------------------------------------


def smooth_noise(report: RunReport, ell: int, widths, seed: int, form: str = "standard") -> np.ndarray:
    """Kriging smoother (with fitted nugget) of batch noise sd estimates, evaluated on the grid."""
    recs = report.design.for_surface(ell)
    X = np.array([r.location for r in recs])
    sd = np.sqrt(np.array([r.noise_variance * r.batch_size for r in recs]))
    obs = ObservationSet(X, sd, np.zeros_like(sd))
    fit: FitResult = fit_hyperparameters(obs, default_bounds(obs, widths), restarts=3, fit_nugget=True, seed=seed,
                                          form=form)
    model = KrigingModel(fit.kernel, fit.observations)
    return np.maximum(model.posterior(report.grid).mean, 0.0)


def cmd_sir(args) -> int:
    cfg = load(args.config)
    if cfg.raw["problem"]["name"] != "sir":
        raise cfg.error(["problem", "name"], "the sir command needs problem.name = \"sir\"")
    problem, methods = run_specs(cfg, seed=args.seed)
    spec = methods[0][1][0]
    if spec.designer.noise_mode != "batch_estimated":
        raise cfg.error(["designer"], "the sir command needs noise_mode = \"batch_estimated\"")
    report = execute(spec)
    out = _output_dir(args, cfg.raw, "sir_out")
    out.mkdir(parents=True, exist_ok=True)
    formats = _formats(cfg.raw)
    if "csv" in formats:
        write_run(out, report, problem.labels, problem.has_truth)
        widths = problem.upper - problem.lower
        form = spec.designer.fit.form
        sig = [smooth_noise(report, ell, widths, spec.designer.seed, form) for ell in range(problem.L)]
        write_csv(
            out / "noise_surfaces.csv",
            ["point", "s", "i", *[f"sigma_{lab}" for lab in problem.labels]],
            ([j, int(x[0]), int(x[1]), *(s[j] for s in sig)] for j, x in enumerate(report.grid)),
        )
    if "json" in formats:
        _write_summary(out / "summary.json", summary_dict(report, problem.labels, cfg.raw))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rank-surfaces", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "one seeded sequential design run"),
                        ("bench", "replicated runs across acquisition methods"),
                        ("sir", "epidemic intervention case study")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--jobs", type=int, default=None,
                       help="worker processes for replications (default: $RANK_SURFACES_JOBS or all cores)")
        p.add_argument("--seed", type=int, default=None, help="override the seed (base seed for bench)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "sir": cmd_sir}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs is None:
        args.jobs = default_jobs()
    if args.jobs < 1:
        print("error: --jobs must be positive", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be nonnegative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, InsufficientDataError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
