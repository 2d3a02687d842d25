"""Run an experiment: simulate, solve by kind, execute the configured checks, sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .bsde import solve_bsde
from .config import Experiment
from .paths import PathBundle, TimeGrid
from .rbsde import solve_rbsde
from .twobsde import TwoBsdeProblem, solve_2bsde_hjb, solve_2bsde_sweep


class RunContext:
    """Lazily built bundle and solution shared by every check of a run."""

    def __init__(self, exp: Experiment):
        self.exp = exp

    @cached_property
    def bundle(self) -> PathBundle:
        return self.exp.sim_config().simulate(self.exp.volatility)

    @cached_property
    def problem(self) -> TwoBsdeProblem:
        e = self.exp
        return TwoBsdeProblem(e.family, e.gen, e.term, e.controls)

    @cached_property
    def solution(self):
        return solve(self.exp, self.bundle if self.exp.kind in ("bsde", "rbsde") else None)


def solve(exp: Experiment, bundle: PathBundle | None = None):
    """Solution object for the experiment kind (None for ``simulate``)."""
    kind = exp.kind
    if kind == "simulate":
        return None
    if kind in ("bsde", "rbsde") and bundle is None:
        bundle = exp.sim_config().simulate(exp.volatility)
    if kind == "bsde":
        return solve_bsde(bundle, exp.gen, exp.term, exp.basis, exp.picard, z_mode=exp.z_mode)
    if kind == "rbsde":
        return solve_rbsde(bundle, exp.gen, exp.term, exp.obstacle, exp.basis, exp.picard,
                           ladder=exp.ladder, z_mode=exp.z_mode)
    problem = TwoBsdeProblem(exp.family, exp.gen, exp.term, exp.controls)
    if exp.raw.get("numerics", {}).get("twobsde_method", "sweep") == "hjb":
        return solve_2bsde_hjb(problem, exp.sim_config(), exp.basis, exp.bins, exp.n_bins)
    return solve_2bsde_sweep(problem, exp.sim_config(), exp.basis, exp.picard, exp.bins, exp.n_bins)


def headline(sol) -> tuple[float, float]:
    """(value at time 0, its standard error) for any solution kind."""
    if hasattr(sol, "V0"):
        return float(sol.V0), float(sol.V0_se)
    return float(sol.y0), float(sol.y0_se)


def solution_summary(exp: Experiment, ctx: RunContext) -> dict:
    b = ctx.bundle if exp.kind != "2bsde" else None
    out: dict = {"kind": exp.kind, "name": exp.name, "seed": exp.seed}
    if b is not None:
        out["paths"] = {
            "n_paths": b.n_paths,
            "n_steps": b.grid.n_steps,
            "step_h": b.grid.step_h,
            "mean_stop_time": float(np.mean(b.stop_times)),
            "alive_at_cap_fraction": float(b.alive_at_cap_fraction),
        }
    sol = ctx.solution
    if sol is not None:
        out["solution"] = sol.summary()
    return out


# ---------------------------------------------------------------------------
# Convergence sweeps


@dataclass
class SweepResult:
    axis: str
    values: list
    y0: list
    se: list
    errors: list
    reference: float | None
    order: float | None
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"axis": self.axis, "value": v, "y0": y, "se": s, "error": e}
                for v, y, s, e in zip(self.values, self.y0, self.se, self.errors)]

    def to_record(self) -> dict:
        return dict(self.__dict__)


def _fit_order(x, y) -> float | None:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0) & np.isfinite(y)
    if ok.sum() < 2:
        return None
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def convergence_sweep(exp: Experiment, axis: str) -> SweepResult:
    """Rerun the experiment along one numerical axis on the configured seed.

    axis ``h``: error against the reference (or the finest run), order = slope in log h.
    axis ``n_paths``: standard error of the value, order = -slope in log n.
    axis ``truncation_n``: D-norm distance of the truncated solutions to the reference level.
    axis ``basis_degree``: value per polynomial degree against the reference (or the richest basis).
    """
    sw = exp.sweep
    ref = sw.get("reference")
    if axis == "h":
        hs = [float(v) for v in sw.get("h", [exp.grid.step_h * 4, exp.grid.step_h * 2, exp.grid.step_h])]
        cap = exp.grid.horizon_cap
        y0, se = [], []
        for h in hs:
            grid = TimeGrid(h, int(round(cap / h)))
            e = exp.with_overrides(grid=grid)
            y, s = headline(RunContext(e).solution)
            y0.append(y)
            se.append(s)
        target = float(ref) if ref is not None else y0[int(np.argmin(hs))]
        errors = [abs(y - target) for y in y0]
        pts = [(h, err) for h, err in zip(hs, errors) if ref is not None or h != min(hs)]
        order = _fit_order([p[0] for p in pts], [p[1] for p in pts])
        return SweepResult("h", hs, y0, se, errors, target, order)
    if axis == "n_paths":
        ns = [int(v) for v in sw.get("n_paths", [exp.n_paths // 16, exp.n_paths // 4, exp.n_paths])]
        y0, se = [], []
        for n in ns:
            y, s = headline(RunContext(exp.with_overrides(n_paths=n)).solution)
            y0.append(y)
            se.append(s)
        errors = [abs(y - float(ref)) for y in y0] if ref is not None else [math.nan] * len(ns)
        slope = _fit_order(ns, se)
        return SweepResult("n_paths", ns, y0, se, errors, ref, None if slope is None else -slope)
    if axis == "basis_degree":
        degs = [int(v) for v in sw.get("basis_degree", [1, 2, 3, 4])]
        y0, se = [], []
        for deg in degs:
            b = replace(exp.basis, degree=deg)
            y, s = headline(RunContext(exp.with_overrides(basis=b)).solution)
            y0.append(y)
            se.append(s)
        target = float(ref) if ref is not None else y0[-1]
        errors = [abs(y - target) for y in y0]
        return SweepResult("basis_degree", degs, y0, se, errors, target, None)
    if axis in ("truncation", "truncation_n"):
        from .bsde import horizon_truncation_study
        from .rbsde import truncation_study

        ctx = RunContext(exp)
        ns = [float(v) for v in sw.get("truncation", [1, 2, 4, 8])]
        ref_n = float(sw.get("truncation_reference", 2 * max(ns)))
        if exp.kind == "rbsde":
            st = truncation_study(ctx.bundle, exp.gen, exp.term, exp.obstacle, ns, ref_n, exp.basis, exp.picard)
        elif exp.kind == "bsde":
            st = horizon_truncation_study(ctx.bundle, exp.gen, exp.term, ns, exp.basis, exp.picard, ref_n)
        else:
            raise ValueError("truncation sweeps need a bsde or rbsde experiment")
        errors = list(st["errors"])
        y0 = list(st.get("y0", [math.nan] * len(ns)))
        monotone = all(errors[i + 1] < errors[i] for i in range(len(errors) - 1))
        return SweepResult("truncation", ns, y0, [math.nan] * len(ns), errors, st["y0_reference"],
                           _fit_order(ns, errors), {"strictly_decreasing": monotone})
    raise ValueError(f"unknown sweep axis {axis!r} (h, n_paths, truncation_n, basis_degree)")
