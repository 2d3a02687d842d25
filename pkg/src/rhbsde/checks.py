"""Named diagnostic checks runnable from a configuration file.

Each entry of ``CATALOG`` describes what the check verifies and its default
tolerance; ``run_check`` executes one against a run context and never raises
for a failed check (errors are reported in the result).
"""

from __future__ import annotations

import json
import traceback
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import (
    apriori_check,
    comparison_check,
    hitting_time_divergence,
    horizon_truncation_study,
    stability_check,
    tanaka_check,
)
from .measures import control_densities
from .norms import NormParams, WindowError, doob_check
from .paths import Deterministic, ExitOfBox, truncate_horizon
from .rbsde import ObstacleSpec, rbsde_comparison_check, rbsde_stability_check, truncation_study
from .twobsde import TwoBsdeProblem, dpp_check, minimality_check, supermartingale_check, twobsde_comparison_check


@dataclass
class CheckResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    error: str | None = None

    def to_record(self) -> dict:
        return {"name": self.name, "passed": self.passed, "metrics": self.metrics, "error": self.error}


@dataclass(frozen=True)
class CheckInfo:
    name: str
    reference: str
    tolerance: str
    kinds: tuple
    fn: Callable


def _record(report) -> dict:
    rec = report.to_record() if hasattr(report, "to_record") else dict(report)
    return json.loads(json.dumps(rec, default=_jsonable))


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.bool_):
        return bool(v)
    return str(v)


# ---------------------------------------------------------------------------


def _value_reference(ctx, prm):
    from .runner import headline

    if "expected" not in prm:
        raise ValueError("value_reference needs 'expected'")
    v, se = headline(ctx.solution)
    exp = float(prm["expected"])
    allow = max(float(prm.get("abs_tol", 0.0)), float(prm.get("rel_tol", 0.05)) * abs(exp))
    allow += float(prm.get("n_se", 0.0)) * se
    return abs(v - exp) <= allow, {"value": v, "se": se, "expected": exp, "allowance": allow}


def _pde_oracle(ctx, prm):
    from .oracles import FdProblem, g_heat_value, solve_elliptic_exit, solve_parabolic
    from .runner import headline

    exp = ctx.exp
    gen, g = exp.gen, exp.term.g
    if g is None:
        raise ValueError("the PDE oracle needs a Markov terminal value g(x)")
    src = exp.raw.get("problem", {}).get("generator", {}).get("expr", "0")
    v, se = headline(ctx.solution)
    rel = float(prm.get("rel_tol", 0.05))
    hw = float(prm.get("half_width", 8.0))
    dx = float(prm.get("dx", 0.02))
    gx = lambda x: np.asarray(g(np.asarray(x, dtype=float)[:, None]), dtype=float)
    if exp.kind == "2bsde":
        from .config import Expr

        e = Expr(str(src), ("t", "x", "y", "z", "s"), dict(exp.raw.get("problem", {}).get("constants", {})))
        if e.uses("z") or e.uses("s"):
            raise ValueError("the G-heat oracle supports drivers in (t, x, y) only")
        one = np.ones((1, 1, 1))
        F = lambda t, x, vv, p: gen(t, x[:, None], vv, np.zeros((x.size, 1)), np.broadcast_to(one, (x.size, 1, 1)))
        ref = g_heat_value([float(m.constant[0, 0]) for m in exp.family.members], gx, exp.x0, exp.rule.T, hw, dx, F)
    elif isinstance(exp.rule, Deterministic):
        sig = float(exp.volatility.constant[0, 0])
        S = np.full((1, 1, 1), sig)

        def F(t, x, vv, p):
            s = np.broadcast_to(S, (x.size, 1, 1))
            return gen(t, x[:, None], vv, (p / sig)[:, None] if sig > 0 else 0 * p[:, None], s)

        T = exp.rule.T
        nx = int(round(2 * hw / dx))
        prob = FdProblem("parabolic_semilinear", exp.x0 - hw, exp.x0 + hw, nx, int(prm.get("nt", 400)), T, sig,
                         terminal=gx, f=F)
        ref = solve_parabolic(prob).at(exp.x0)
    elif isinstance(exp.rule, ExitOfBox):
        sig = float(exp.volatility.constant[0, 0])
        lo, hi = exp.rule.lower[0], exp.rule.upper[0]
        S = np.full((1, 1, 1), sig)

        def F(x, vv, p):
            return gen(0.0, x[:, None], vv, (p / sig)[:, None], np.broadcast_to(S, (x.size, 1, 1)))

        nx = int(prm.get("nx", 400))
        prob = FdProblem("elliptic_exit", lo, hi, nx, sigma=sig, boundary=(float(gx(np.array([lo]))[0]),
                                                                          float(gx(np.array([hi]))[0])), f=F)
        ref = solve_elliptic_exit(prob).at(exp.x0)
    else:
        raise ValueError("no PDE oracle for this stopping rule")
    allow = rel * max(abs(ref), 1e-12) + float(prm.get("n_se", 3.0)) * se
    return abs(v - ref) <= allow, {"value": v, "se": se, "oracle": ref, "allowance": allow}


def _shift_obstacle(o: ObstacleSpec, c: float) -> ObstacleSpec:
    if not o.constrained:
        return o
    return ObstacleSpec(lambda t, x, _S=o.S_fn: np.asarray(_S(t, x), dtype=float) + c, f"{o.label}+{c:g}")


def _comparison(ctx, prm):
    exp = ctx.exp
    rng = np.random.default_rng(int(prm.get("seed", exp.seed)))
    n_pairs = int(prm.get("n_pairs", 5))
    top = float(prm.get("max_shift", 0.5))
    reports = []
    for _ in range(n_pairs):
        cf, cx = rng.uniform(0, top, 2)
        if exp.kind == "bsde":
            r = comparison_check(ctx.bundle, (exp.gen, exp.term), (exp.gen.shifted(cf), exp.term.shifted(cx)),
                                 exp.basis, exp.picard)
        elif exp.kind == "rbsde":
            cs = rng.uniform(0, cx)
            r = rbsde_comparison_check(ctx.bundle, (exp.gen, exp.term, exp.obstacle),
                                       (exp.gen.shifted(cf), exp.term.shifted(cx), _shift_obstacle(exp.obstacle, cs)),
                                       exp.basis, exp.picard, ladder=exp.ladder)
        else:
            p2 = TwoBsdeProblem(exp.family, exp.gen.shifted(cf), exp.term.shifted(cx), exp.controls)
            r = twobsde_comparison_check(ctx.problem, p2, exp.sim_config(), exp.basis, exp.picard)
        reports.append(r)
    worst = max(reports, key=lambda r: r.violation - r.tolerance)
    return all(r.passed for r in reports), {"pairs": n_pairs, "passed_pairs": sum(r.passed for r in reports),
                                            "worst": _record(worst)}


def _apriori(ctx, prm):
    exp = ctx.exp
    etas = prm.get("etas", [prm.get("eta", 0.0)])
    out, ok = [], True
    for eta in etas:
        r = apriori_check(ctx.solution, NormParams(float(prm.get("p", 2.0)), float(eta)), exp.controls)
        ok &= r.passed
        out.append(_record(r))
    return ok, {"reports": out}


def _stability(ctx, prm):
    exp = ctx.exp
    eps = prm.get("eps", [0.1, 0.01, 0.001])
    if exp.kind == "rbsde":
        r = rbsde_stability_check(ctx.bundle, exp.gen, exp.term, exp.obstacle, prm.get("perturbation", "xi"), eps,
                                  exp.basis, exp.picard, float(prm.get("p", 2.0)), float(prm.get("p_prime", 3.0)),
                                  window=tuple(prm.get("window", (0.5, 1.1))), ladder=exp.ladder)
        return r.passed, _record(r)
    rows, ok = [], True
    for e in eps:
        r = stability_check(ctx.bundle, (exp.gen, exp.term), (exp.gen.shifted(float(e)), exp.term.shifted(float(e))),
                            exp.basis, exp.picard, float(prm.get("p", 2.0)), float(prm.get("p_prime", 3.0)),
                            float(prm.get("eta", 0.0)), controls=exp.controls)
        ok &= r.passed
        rows.append(_record(r))
    dys = [r["dY"] for r in rows]
    shrinking = all(dys[i + 1] <= dys[i] for i in range(len(dys) - 1))
    return ok and shrinking, {"reports": rows, "dY_decreasing": shrinking}


def _two_horizon(ctx, prm):
    exp = ctx.exp
    n = float(prm.get("n", exp.grid.horizon_cap / 2))
    tb = truncate_horizon(ctx.bundle, n)
    r = stability_check(ctx.bundle, (exp.gen, exp.term), (exp.gen, exp.term), exp.basis, exp.picard,
                        float(prm.get("p", 2.0)), float(prm.get("p_prime", 3.0)), float(prm.get("eta", 0.0)),
                        controls=exp.controls, second_bundle=tb)
    return r.passed, _record(r)


def _skorokhod(ctx, prm):
    sol = ctx.solution
    tol = float(prm.get("tol", 1e-3))
    K_tot = float(np.mean(sol.K[np.arange(sol.K.shape[0]), sol.bundle.stop_index]))
    return sol.skorokhod <= tol * (1.0 + K_tot), {"residual": sol.skorokhod, "K_mean_total": K_tot, "tol": tol}


def _truncation(ctx, prm):
    exp = ctx.exp
    ns = [float(v) for v in prm.get("levels", [1, 2, 4, 8])]
    ref_n = float(prm.get("reference", 2 * max(ns)))
    if exp.kind == "rbsde":
        st = truncation_study(ctx.bundle, exp.gen, exp.term, exp.obstacle, ns, ref_n, exp.basis, exp.picard)
    else:
        st = horizon_truncation_study(ctx.bundle, exp.gen, exp.term, ns, exp.basis, exp.picard, ref_n)
    errs = st["errors"]
    ok = all(errs[i + 1] < errs[i] for i in range(len(errs) - 1))
    return ok, _record(st)


def _picard(ctx, prm):
    sol = ctx.solution
    exp = ctx.exp
    limit = float(prm.get("max_ratio", 0.5))
    guard = exp.grid.step_h * (exp.gen.lipschitz_L + abs(exp.gen.monotone_mu))
    ratios = sol.picard_ratios
    med = sol.median_picard_ratio if ratios else 0.0
    ok = bool(sol.converged) and (med < limit or not ratios)
    return ok, {"median_ratio": med, "ratios": ratios, "guard": guard, "iterations": sol.picard_iters}


def _dpp(ctx, prm):
    exp = ctx.exp
    t1 = float(prm.get("t1", exp.grid.horizon_cap / 2))
    r = dpp_check(ctx.problem, t1, exp.sim_config(), exp.basis, exp.picard, float(prm.get("tolerance", 0.03)),
                  direct=ctx.solution)
    return r.passed, _record(r)


def _minimality(ctx, prm):
    sol = ctx.solution
    N = sol.V.shape[0] - 1
    s = sol_index(sol, prm.get("s", 0.0))
    t = sol_index(sol, prm.get("t", N * sol.step_h))
    r = minimality_check(sol, s, t, float(prm.get("n_se", 3.0)))
    return r.passed, _record(r)


def sol_index(sol, t: float) -> int:
    return int(round(float(t) / sol.step_h))


def _supermartingale(ctx, prm):
    r = supermartingale_check(ctx.solution, int(prm.get("blocks", 4)), float(prm.get("n_se", 3.0)))
    return r.passed, _record(r)


def _doob(ctx, prm):
    exp = ctx.exp
    seeds = int(prm.get("seeds", 1))
    p, q = float(prm.get("p", 2.0)), float(prm.get("q", 4.0))
    reports = []
    for i in range(seeds):
        b = ctx.bundle if i == 0 else exp.sim_config(seed=exp.seed + i).simulate(exp.volatility)
        M = b.X[:, :, 0]
        reports.append(doob_check(M, p, q, b.stop_index, control_densities(b, exp.controls)))
    return all(r.passed for r in reports), {"seeds": seeds, "passed_seeds": sum(r.passed for r in reports),
                                            "first": _record(reports[0])}


def _tanaka(ctx, prm):
    r = tanaka_check(ctx.bundle.state, prm.get("slack"))
    return r.passed, _record(r)


def _divergence(ctx, prm):
    r = hitting_time_divergence(float(prm.get("L", 1.0)), prm.get("n_list", (1, 2, 4)),
                               int(prm.get("n_paths", 20000)), seed=int(prm.get("seed", ctx.exp.seed)))
    return r.passed, _record(r)


def _z_reference(ctx, prm):
    from .config import Expr

    exp = ctx.exp
    sol = ctx.solution
    if "expr" not in prm:
        raise ValueError("z_reference needs 'expr' (a function of t and x)")
    e = Expr(str(prm["expr"]), ("t", "x"), dict(exp.raw.get("problem", {}).get("constants", {})))
    t = float(prm.get("t", 0.5))
    k = exp.grid.index_of(t)
    centers = np.asarray(prm.get("x", [exp.x0]), dtype=float)
    fitted = sol.z_at(k, centers[:, None])[:, 0]
    expected = np.broadcast_to(np.asarray(e(t=t, x=centers), dtype=float), centers.shape)
    tol = float(prm.get("abs_tol", 0.05))
    err = float(np.max(np.abs(fitted - expected)))
    return err <= tol, {"t": t, "x": centers.tolist(), "fitted": fitted.tolist(), "expected": expected.tolist(),
                        "max_error": err, "tol": tol}


def _determinism(ctx, prm):
    from .runner import RunContext, solution_summary

    a = json.dumps(solution_summary(ctx.exp, ctx), sort_keys=True, default=_jsonable)
    b = json.dumps(solution_summary(ctx.exp, RunContext(ctx.exp)), sort_keys=True, default=_jsonable)
    return a == b, {"identical": a == b}


_ALL = ("simulate", "bsde", "rbsde", "2bsde")
_SOLVED = ("bsde", "rbsde", "2bsde")

CATALOG: dict[str, CheckInfo] = {c.name: c for c in [
    CheckInfo("value_reference", "time-0 value against a supplied reference value",
              "rel_tol 0.05 (plus n_se standard errors)", _SOLVED, _value_reference),
    CheckInfo("pde_oracle", "time-0 value against an independent finite-difference solution",
              "rel_tol 0.05 + 3 SE", ("bsde", "2bsde"), _pde_oracle),
    CheckInfo("comparison_bsde", "comparison principle: ordered (xi, f) give ordered Y (randomized pairs)",
              "3 SE + 2 h L scale per pair", ("bsde",), _comparison),
    CheckInfo("comparison_rbsde", "comparison principle with obstacles: ordered (xi, f, S) give ordered Y",
              "3 SE + 2 h L scale per pair", ("rbsde",), _comparison),
    CheckInfo("comparison_2bsde", "comparison principle for the second-order equation over the menu",
              "3 SE + 2 h L scale per pair", ("2bsde",), _comparison),
    CheckInfo("apriori", "a-priori estimate: norm ratio stable under doubling xi and f0",
              "ratio moves by less than a factor 2", ("bsde",), _apriori),
    CheckInfo("stability", "perturbing xi and f moves the solution continuously",
              "bsde: dY nonincreasing in eps; rbsde: fitted exponent in [0.5, 1.1]", ("bsde", "rbsde"), _stability),
    CheckInfo("two_horizon", "value gap between two stopping horizons bounded by the data gap",
              "3 SE", ("bsde",), _two_horizon),
    CheckInfo("skorokhod", "Skorokhod condition: reflection only acts when Y touches the obstacle",
              "1e-3 (1 + E K_tau)", ("rbsde",), _skorokhod),
    CheckInfo("truncation", "truncated-horizon solutions approach the full solution",
              "errors strictly decreasing in n", ("bsde", "rbsde"), _truncation),
    CheckInfo("picard_contraction", "fixed-point sweeps contract", "median ratio < 0.5",
              ("bsde", "rbsde"), _picard),
    CheckInfo("dpp", "dynamic programming: value equals the two-stage value", "relative gap 0.03",
              ("2bsde",), _dpp),
    CheckInfo("minimality", "the optimal member's defect increment vanishes", "3 SE + h^2 slack",
              ("2bsde",), _minimality),
    CheckInfo("supermartingale", "V + int F is a supermartingale under every member",
              "3 SE + regression allowance", ("2bsde",), _supermartingale),
    CheckInfo("doob", "Doob-type maximal inequality under the tilt family", "3 combined SE", _ALL, _doob),
    CheckInfo("tanaka", "pathwise Tanaka inequality for |X| on the grid", "exact up to rounding", _ALL, _tanaka),
    CheckInfo("divergence_example", "hitting-time example: weighted moments blow up, tilted norms stay finite",
              "growth >= 2 per doubling, spread < 0.2", _ALL, _divergence),
    CheckInfo("z_reference", "fitted Z against a supplied function of (t, x)", "abs_tol 0.05", ("bsde",),
              _z_reference),
    CheckInfo("determinism", "re-running with the same seed reproduces the summary exactly", "bitwise",
              _SOLVED, _determinism),
]}


def run_check(ctx, name: str, params: dict) -> CheckResult:
    info = CATALOG[name]
    if ctx.exp.kind not in info.kinds:
        return CheckResult(name, False, {}, f"check {name!r} does not apply to a {ctx.exp.kind} experiment")
    try:
        passed, metrics = info.fn(ctx, params)
    except (ArithmeticError, ValueError, RuntimeError, WindowError) as exc:
        return CheckResult(name, False, {}, f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # noqa: BLE001 - report, do not crash the whole run
        return CheckResult(name, False, {}, "".join(traceback.format_exception_only(type(exc), exc)).strip())
    return CheckResult(name, bool(passed), json.loads(json.dumps(metrics, default=_jsonable)))
