"""Command-line entry point.

Exit codes: 0 success (all checks passed), 1 a check failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checks import CATALOG, run_check
from .config import ConfigError, Experiment, build_experiment, load_config
from .io import surface_rows, write_bundle, write_csv, write_json
from .runner import RunContext, convergence_sweep, solution_summary

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG = 0, 1, 2
_SOLVE_KIND = {"simulate": "simulate", "solve-bsde": "bsde", "solve-rbsde": "rbsde", "solve-2bsde": "2bsde"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rhbsde", description="Random-horizon BSDE solvers and diagnostics.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "solve-bsde", "solve-rbsde", "solve-2bsde", "check", "run", "sweep"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="TOML experiment file")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override the configured seed")
        s.add_argument("--threads", type=int, default=None, help="worker threads (default: RHBSDE_THREADS or 1)")
        s.add_argument("--format", choices=("csv", "json"), default=None, help="table format (default: config)")
        s.add_argument("--plots", action="store_true", help="render figures next to the tables")
        if name == "sweep":
            s.add_argument("--axis", required=True, choices=("h", "n_paths", "truncation_n", "truncation", "basis_degree"))
    sub.add_parser("list-checks")
    return p


def _threads(arg: int | None) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get("RHBSDE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"RHBSDE_THREADS must be an integer, got {env!r}") from None
    return None


def manifest(exp: Experiment, command: str) -> dict:
    import scipy

    return {
        "package": "rhbsde",
        "version": __version__,
        "command": command,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "seed": exp.seed,
        "kind": exp.kind,
        "config_sha256": exp.config_hash,
        "config": exp.raw,
    }


def _print_table(rows: list[tuple]) -> None:
    for r in rows:
        print(",".join(str(v) for v in r))


def _experiment(args) -> Experiment:
    exp = load_config(args.config, args.seed, _threads(args.threads))
    kind = _SOLVE_KIND.get(args.command)
    if kind is not None and kind != exp.kind:
        raw = dict(exp.raw)
        raw["experiment"] = dict(raw.get("experiment", {}), kind=kind)
        exp = build_experiment(raw, exp.source_text, args.seed, exp.threads)
    return exp


def _run(args) -> int:
    exp = _experiment(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fmt = args.format or ("csv" if "csv" in exp.formats else "json")
    plots = args.plots or exp.plots
    write_json(manifest(exp, args.command), out / "manifest.json")

    if args.command == "sweep":
        sw = convergence_sweep(exp, args.axis)
        write_json(sw.to_record(), out / "sweep.json")
        if fmt == "csv":
            write_csv(sw.rows(), out / "sweep.csv")
        if plots:
            from .report import plot_sweep

            plot_sweep(sw, out / f"sweep_{args.axis}.png")
        _print_table([("axis", "value", "y0", "se", "error")] +
                     [(r["axis"], r["value"], r["y0"], r["se"], r["error"]) for r in sw.rows()])
        print(f"order,{sw.order}")
        return EXIT_OK

    ctx = RunContext(exp)
    if args.command == "simulate":
        write_bundle(ctx.bundle, out / "paths.rhbp")
    summary = solution_summary(exp, ctx)
    results = []
    if args.command in ("check", "run"):
        results = [run_check(ctx, c.name, c.params) for c in exp.checks]
        summary["checks"] = [r.to_record() for r in results]
    write_json(summary, out / "summary.json")

    sol = ctx.solution
    bins = None
    if sol is not None:
        bins = getattr(sol, "bins", None) or exp.bins or _bins_for(ctx)
        times = exp.grid.times
        rows = surface_rows(sol, bins, times)
        if fmt == "csv":
            write_csv(rows, out / "surface.csv")
        else:
            write_json(rows, out / "surface.json")
    if results and fmt == "csv":
        write_csv([{"name": r.name, "passed": r.passed, "error": r.error or ""} for r in results], out / "checks.csv")
    if plots:
        from . import report

        if exp.kind != "2bsde":
            report.plot_paths(ctx.bundle, out / "paths.png")
        if sol is not None:
            report.plot_surface(rows, out / "value_surface.png")
            if exp.kind == "rbsde":
                report.plot_obstacle(sol, out / "obstacle.png")

    table = [("quantity", "value")]
    if sol is not None:
        for k, v in sol.summary().items():
            if isinstance(v, (int, float, str, bool)):
                table.append((k, v))
    for r in results:
        table.append((f"check:{r.name}", "pass" if r.passed else f"FAIL{(' ' + r.error) if r.error else ''}"))
    _print_table(table)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def _bins_for(ctx):
    from .bsde import StateBins

    x = ctx.bundle.state[:, :, 0]
    lo, hi = np.quantile(x, [0.005, 0.995])
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    return StateBins(float(lo), float(hi), ctx.exp.n_bins)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list-checks":
        _print_table([("name", "applies_to", "tolerance", "verifies")] +
                     [(c.name, "|".join(c.kinds), f'"{c.tolerance}"', f'"{c.reference}"') for c in CATALOG.values()])
        return EXIT_OK
    try:
        return _run(args)
    except ConfigError as exc:
        for msg in exc.problems:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
