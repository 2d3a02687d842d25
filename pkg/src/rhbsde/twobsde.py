"""Second-order BSDEs over finite volatility menus.

The value is V = max over family members of the member BSDE solutions on a
common set of state bins. Each member's defect process K^P (its supermartingale
part) is read off the aggregated V along that member's own paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .bsde import (
    BackwardSolution,
    ComparisonReport,
    GeneratorSpec,
    OrderPreconditionError,
    PicardConfig,
    StateBins,
    TerminalSpec,
    _sample_order,
    backward_induction,
    comparison_statistics,
    solve_bsde,
)
from .measures import DriftControlSet, MeasureFamily
from .paths import PathBundle, SimConfig, truncate_horizon
from .regression import RegressionBasis, StepFit


class NonMarkovError(ValueError):
    pass


@dataclass
class TwoBsdeProblem:
    family: MeasureFamily
    gen: GeneratorSpec
    term: TerminalSpec
    controls: DriftControlSet | None = None

    def __post_init__(self):
        self.gen.check_window()


@dataclass
class TwoBsdeSolution:
    V: np.ndarray  # [N+1, n_bins]
    Z_agg: np.ndarray  # [N+1, n_bins, d]
    argmax_member: np.ndarray  # [N+1, n_bins]
    member_values: np.ndarray  # [members, N+1, n_bins]
    occupancy: np.ndarray  # [members, N+1, n_bins] fraction of each member's paths
    bins: StateBins
    per_member: list = field(repr=False)
    U_decomp: list = field(repr=False)  # per-member K^P [n, N+1]
    labels: list = field(default_factory=list)
    V0: float = 0.0
    V0_se: float = 0.0
    argmax0: int = 0
    z_consistency: float = 0.0
    tail_certificate: dict = field(default_factory=dict)
    method: str = "sweep"
    value_fits: list = field(default_factory=list, repr=False)
    failures: dict = field(default_factory=dict)

    step_h: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.V.shape[0]) * self.step_h

    def value_at(self, k: int, x: np.ndarray) -> np.ndarray:
        """V(t_k, x) as a function of the state."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != 1 and x.shape[0] == 1:
            x = x.T
        return self.value_fits[k](x)

    def summary(self) -> dict:
        return {
            "V0": float(self.V0),
            "V0_se": float(self.V0_se),
            "argmax_member_at_0": self.labels[self.argmax0] if self.labels else int(self.argmax0),
            "member_Y0": [float(s.y0) for s in self.per_member] if self.per_member else [],
            "z_consistency": float(self.z_consistency),
            "method": self.method,
            "tail_certificate": self.tail_certificate,
            "failed_members": {str(k): v for k, v in self.failures.items()},
        }


class _MaxOfFits:
    """Pointwise max over member value functions; skips members without a fit at this step."""

    def __init__(self, fits):
        self.fits = [f for f in fits if f is not None]

    def __call__(self, x):
        return np.max(np.stack([f(x) for f in self.fits]), axis=0)

    def argmax(self, x):
        return np.argmax(np.stack([f(x) for f in self.fits]), axis=0)


def _default_bins(bundles: Sequence[PathBundle], n_bins: int) -> StateBins:
    lo = min(float(np.quantile(b.state[:, :, 0], 0.005)) for b in bundles)
    hi = max(float(np.quantile(b.state[:, :, 0], 0.995)) for b in bundles)
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    return StateBins(lo, hi, n_bins)


def _occupancy(bundle: PathBundle, bins: StateBins) -> np.ndarray:
    N1 = bundle.grid.n_steps + 1
    occ = np.zeros((N1, bins.n_bins))
    for k in range(N1):
        b = bins.assign(bundle.state_at(k))
        ok = (b >= 0) & (bundle.stop_index > k) if k < N1 - 1 else b >= 0
        occ[k] = np.bincount(b[ok], minlength=bins.n_bins) / bundle.n_paths
    return occ


def _terminal_fn(term: TerminalSpec):
    if term.g is None:
        return None
    return lambda x: np.asarray(term.g(np.atleast_2d(x)), dtype=float)


class _StepValue:
    """Value function at one step: fitted where available, terminal g otherwise."""

    def __init__(self, fit, g):
        self.fit, self.g = fit, g

    def __call__(self, x):
        if self.fit is not None and self.fit.fits:
            return self.fit(x)
        return self.g(x)


def tail_certificate(bundles: Sequence[PathBundle], levels: Sequence[float] = (1, 2, 4, 8, 16)) -> dict:
    """sup over members of P(tau >= n) along the ladder; should decrease toward 0."""
    cap = bundles[0].grid.horizon_cap
    ns = [float(n) for n in levels if n <= cap + 1e-12]
    vals = [max(float(np.mean(b.stop_times >= n - 1e-12)) for b in bundles) for n in ns]
    return {"n": ns, "tail": vals,
            "nonincreasing": bool(all(vals[i + 1] <= vals[i] for i in range(len(vals) - 1)))}


def _defects(bundle: PathBundle, sol: BackwardSolution, value_fns, z_fns, gen: GeneratorSpec) -> np.ndarray:
    """K^P along the member's paths: dK_k = -(V_{k+1} - V_k) - h F + Z . dX."""
    n, N, h = bundle.n_paths, bundle.grid.n_steps, bundle.grid.step_h
    K = np.zeros((n, N + 1))
    dK = np.zeros((n, N))
    for k in range(N):
        idx = np.flatnonzero(bundle.stop_index > k)
        if idx.size == 0:
            break
        x = bundle.state_at(k)[idx]
        x1 = bundle.state_at(k + 1)[idx]
        v = value_fns[k](x)
        stopped_next = bundle.stop_index[idx] <= k + 1
        v1 = np.where(stopped_next, sol.xi[idx], value_fns[k + 1](x1) if k + 1 < N else sol.xi[idx])
        z = z_fns[k](x)
        sig = np.asarray(bundle.sigma_samples[idx, k])
        F = gen(k * h, x, v, z, sig)
        dK[idx, k] = -(v1 - v) - h * F + np.einsum("ij,ij->i", z, x1 - x)
    K[:, 1:] = np.cumsum(dK, axis=1)
    return K


def _aggregate(problem: TwoBsdeProblem, bundles, sols, bins: StateBins, method: str,
               value_fits=None, z_fits=None, failures=None) -> TwoBsdeSolution:
    N = bundles[0].grid.n_steps
    h = bundles[0].grid.step_h
    centers = bins.centers[:, None]
    M = len(sols)
    g = _terminal_fn(problem.term)
    member_values = np.full((M, N + 1, bins.n_bins), np.nan)
    member_z = np.full((M, N + 1, bins.n_bins, bundles[0].d), np.nan)
    for i, s in enumerate(sols):
        for k in range(N + 1):
            if s.y_fits[k] is not None:
                member_values[i, k] = s.y_fits[k](centers)
                member_z[i, k] = s.z_fits[k](centers).reshape(bins.n_bins, -1)
            elif g is not None:
                member_values[i, k] = g(centers)
                member_z[i, k] = 0.0
    filled = np.where(np.isnan(member_values), -np.inf, member_values)
    argmax = np.argmax(filled, axis=0)
    V = np.take_along_axis(filled, argmax[None], axis=0)[0]
    V[~np.isfinite(V)] = np.nan
    Z = np.take_along_axis(member_z, argmax[None, :, :, None], axis=0)[0]
    occ = np.stack([_occupancy(b, bins) for b in bundles])
    # cross-member Z consistency, weighted by joint occupancy
    zc = 0.0
    for i in range(M):
        for j in range(i + 1, M):
            w = np.minimum(occ[i], occ[j])
            diff = np.abs(member_z[i] - member_z[j]).max(axis=-1)
            ok = np.isfinite(diff) & (w > 0)
            if ok.any():
                zc = max(zc, float(np.sum(w[ok] * diff[ok]) / np.sum(w[ok])))
    if value_fits is None:
        value_fits = [_StepValue(_MaxOfFits([s.y_fits[k] for s in sols]), g) for k in range(N + 1)]
        z_sel = []
        for k in range(N + 1):
            fits = [(s.y_fits[k], s.z_fits[k]) for s in sols if s.y_fits[k] is not None]
            z_sel.append(_ArgmaxZ(fits, bundles[0].d))
        z_fits = z_sel
    y0s = np.array([s.y0 for s in sols])
    a0 = int(np.argmax(y0s))
    U = [_defects(b, s, value_fits, z_fits, problem.gen) for b, s in zip(bundles, sols)]
    out = TwoBsdeSolution(
        V=V, Z_agg=Z, argmax_member=argmax, member_values=member_values, occupancy=occ, bins=bins,
        per_member=list(sols), U_decomp=U, labels=problem.family.labels, V0=float(y0s[a0]),
        V0_se=float(sols[a0].y0_se), argmax0=a0, z_consistency=zc,
        tail_certificate=tail_certificate(bundles), method=method, value_fits=value_fits,
        failures=failures or {},
    )
    out.step_h = h
    return out


class _ArgmaxZ:
    def __init__(self, fits, d):
        self.fits, self.d = fits, d

    def __call__(self, x):
        if not self.fits:
            return np.zeros((x.shape[0], self.d))
        vals = np.stack([f(x) for f, _ in self.fits])
        j = np.argmax(vals, axis=0)
        zs = np.stack([z(x).reshape(x.shape[0], -1) for _, z in self.fits])
        return zs[j, np.arange(x.shape[0])]


def _screen(problem: TwoBsdeProblem, sim_config: SimConfig) -> MeasureFamily:
    if problem.family.generator_finiteness_check:
        return problem.family
    gen = problem.gen
    fam, _ = problem.family.screened(lambda t, x, s: gen.f0(t, x, np.asarray(s)), sim_config)
    return fam


def solve_2bsde_sweep(problem: TwoBsdeProblem, sim_config: SimConfig,
                      basis: RegressionBasis = RegressionBasis(), picard: PicardConfig = PicardConfig(),
                      bins: StateBins | None = None, n_bins: int = 20) -> TwoBsdeSolution:
    """One BSDE per member on common random numbers, then V = max of member values per bin."""
    family = _screen(problem, sim_config)
    bundles, sols, failures = [], [], {}
    kept = []
    for i, spec in enumerate(family.members):
        b = sim_config.simulate(spec, i)
        try:
            s = solve_bsde(b, problem.gen, problem.term, basis, picard)
        except (RuntimeError, ValueError) as exc:
            failures[i] = str(exc)
            continue
        bundles.append(b)
        sols.append(s)
        kept.append(spec)
    if not sols:
        raise RuntimeError(f"every member solve failed: {failures}")
    prob = TwoBsdeProblem(MeasureFamily(kept, True), problem.gen, problem.term, problem.controls)
    bins = bins or _default_bins(bundles, n_bins)
    return _aggregate(prob, bundles, sols, bins, "sweep", failures=failures)


def solve_2bsde_hjb(problem: TwoBsdeProblem, sim_config: SimConfig,
                    basis: RegressionBasis = RegressionBasis(), bins: StateBins | None = None,
                    n_bins: int = 20) -> TwoBsdeSolution:
    """Backward induction maximizing over the menu at every state sample.

    The regression sample is a bundle under the widest member; from each
    sample x_k every menu entry proposes x_k + sigma_j dW_k and the step keeps
    max_j {E[V_{k+1}(x'_j)] + h F(t, x, ., Z_j, sigma_j)}.
    """
    if not problem.term.markov:
        raise NonMarkovError("the pointwise-maximized induction needs xi = g(X_tau)")
    family = _screen(problem, sim_config)
    members = family.members
    widest = int(np.argmax([m.sigma_bound for m in members]))
    ref = sim_config.simulate(members[widest], widest)
    grid, rule = ref.grid, sim_config.rule
    N, h = grid.n_steps, grid.step_h
    d = ref.d
    gen = problem.gen
    g = _terminal_fn(problem.term)
    fits: list = [None] * (N + 1)
    zfits: list = [None] * (N + 1)
    V0 = V0_se = 0.0
    arg0 = 0
    for k in range(N - 1, -1, -1):
        idx = np.flatnonzero(ref.stop_index > k)
        if idx.size == 0:
            continue
        t = k * h
        x = ref.state_at(k)[idx]
        dw = ref.W[idx, k + 1] - ref.W[idx, k]
        fb = basis.fit(x, step=k)
        cands, zs = [], []
        for spec in members:
            sig = np.broadcast_to(spec.evaluate(t, x), (idx.size, d, ref.m))
            dx = np.einsum("nij,nj->ni", sig, dw)
            x1 = x + dx
            if k + 1 >= N:
                stops = np.ones(idx.size, dtype=bool)
            else:
                stops = np.asarray(rule.fires(grid, k + 1, x1), dtype=bool)
            nxt = g(x1) if fits[k + 1] is None else np.where(stops, g(x1), fits[k + 1](x1))
            _, cont = fb.fitted(nxt)
            a = np.einsum("nij,nkj->nik", sig, sig)
            a_pinv = np.linalg.pinv(a)
            _, cov = fb.fitted((nxt - cont)[:, None] * dx / h)
            z = np.einsum("nij,nj->ni", a_pinv, cov.reshape(dx.shape))
            cands.append(cont + h * gen(t, x, cont, z, sig))
            zs.append(z)
        cands = np.stack(cands)
        j = np.argmax(cands, axis=0)
        best = cands[j, np.arange(idx.size)]
        zbest = np.stack(zs)[j, np.arange(idx.size)]
        coefs = fb.solve(np.column_stack([best, zbest]))
        fits[k] = StepFit(fb, coefs[:, 0])
        zfits[k] = StepFit(fb, coefs[:, 1:])
        fb.release()
        if k == 0:
            V0 = float(np.mean(best))
            V0_se = float(np.std(cands[j, np.arange(idx.size)], ddof=1) / math.sqrt(idx.size)) if idx.size > 1 else 0.0
            arg0 = int(np.bincount(j).argmax())
    bins = bins or _default_bins([ref], n_bins)
    centers = bins.centers[:, None]
    V = np.full((N + 1, bins.n_bins), np.nan)
    Zs = np.zeros((N + 1, bins.n_bins, d))
    for k in range(N + 1):
        if fits[k] is not None:
            V[k] = fits[k](centers)
            Zs[k] = zfits[k](centers).reshape(bins.n_bins, -1)
        else:
            V[k] = g(centers)
    occ = _occupancy(ref, bins)[None]
    out = TwoBsdeSolution(
        V=V, Z_agg=Zs, argmax_member=np.zeros_like(V, dtype=int), member_values=V[None], occupancy=occ,
        bins=bins, per_member=[], U_decomp=[], labels=family.labels, V0=V0, V0_se=V0_se, argmax0=arg0,
        tail_certificate=tail_certificate([ref]), method="hjb",
        value_fits=[_StepValue(_MaxOfFits([f]) if f is not None else None, g) for f in fits],
    )
    out.step_h = h
    return out


# ---------------------------------------------------------------------------
# Checks


@dataclass
class MinimalityReport:
    s_index: int
    t_index: int
    member_increments: list  # pooled E[K_t - K_s] per member
    member_se: list
    per_bin_min: list  # per bin at s: min over members of E[K_t - K_s | bin]
    per_bin_se: list
    insufficient_bins: list
    argmax_member: int
    eps_stat: float
    slack: float
    passed: bool

    def to_record(self) -> dict:
        return dict(self.__dict__)


def minimality_check(sol: TwoBsdeSolution, s_index: int, t_index: int, n_se: float = 3.0,
                     min_count: int = 30, slack_per_step: float | None = None) -> MinimalityReport:
    """inf over members of E[K^P_t - K^P_s | bin at s] should vanish.

    The pooled increment of each member is reported too; the member achieving
    V (argmax at time s) should have increment within eps_stat of 0.
    """
    if not 0 <= s_index < t_index:
        raise ValueError("need 0 <= s < t")
    if not sol.U_decomp:
        raise ValueError("minimality needs per-member K processes (sweep solution)")
    bins = sol.bins
    incs, ses = [], []
    per_bin = np.full((len(sol.U_decomp), bins.n_bins), np.nan)
    per_bin_se = np.full((len(sol.U_decomp), bins.n_bins), np.nan)
    counts = np.zeros((len(sol.U_decomp), bins.n_bins))
    for i, (K, s) in enumerate(zip(sol.U_decomp, sol.per_member)):
        b = s.bundle
        alive = b.stop_index > s_index
        dK = (K[:, t_index] - K[:, s_index])[alive]
        incs.append(float(dK.mean()) if dK.size else math.nan)
        ses.append(float(dK.std(ddof=1) / math.sqrt(dK.size)) if dK.size > 1 else math.inf)
        cells = bins.assign(b.state_at(s_index)[alive])
        for c in range(bins.n_bins):
            sel = cells == c
            counts[i, c] = sel.sum()
            if sel.sum() >= min_count:
                per_bin[i, c] = dK[sel].mean()
                per_bin_se[i, c] = dK[sel].std(ddof=1) / math.sqrt(sel.sum())
    with np.errstate(all="ignore"):
        j = np.nanargmin(np.where(np.isnan(per_bin), np.inf, per_bin), axis=0)
    bin_min = per_bin[j, np.arange(bins.n_bins)]
    bin_se = per_bin_se[j, np.arange(bins.n_bins)]
    insufficient = [int(c) for c in range(bins.n_bins) if np.all(counts[:, c] < min_count) and counts[:, c].sum() > 0]
    h = sol.step_h
    L = sol.per_member[0].generator.lipschitz_L if sol.per_member[0].generator is not None else 0.0
    slack = (t_index - s_index) * h * h * (1.0 + L) if slack_per_step is None else slack_per_step * (t_index - s_index)
    arg = int(sol.argmax0) if s_index == 0 else int(np.bincount(sol.argmax_member[s_index]).argmax())
    eps = n_se * ses[arg]
    ok_bins = ~np.isnan(bin_min)
    passed = bool(abs(incs[arg]) <= eps + slack
                  and np.all(bin_min[ok_bins] <= n_se * bin_se[ok_bins] + slack))
    return MinimalityReport(s_index, t_index, incs, ses, bin_min.tolist(), bin_se.tolist(), insufficient,
                            arg, eps, slack, passed)


@dataclass
class DppReport:
    t1: float
    direct: float
    two_stage: float
    rel_gap: float
    per_member_outer: list
    per_bin: list
    tolerance: float
    passed: bool

    def to_record(self) -> dict:
        return dict(self.__dict__)


def dpp_check(problem: TwoBsdeProblem, t1: float, sim_config: SimConfig,
              basis: RegressionBasis = RegressionBasis(), picard: PicardConfig = PicardConfig(),
              tolerance: float = 0.03, direct: TwoBsdeSolution | None = None,
              min_occupancy: float = 0.01) -> DppReport:
    """Direct V against sup over members of the BSDE on [0, t1 ^ tau] with terminal V_{t1 ^ tau}.

    The second stage runs on paths independent of the direct solve (seed + 1):
    on the same paths the two computations coincide algebraically. Values are
    compared at time 0 and, per occupied bin, at the midpoint step of [0, t1].
    """
    grid = sim_config.grid
    if not 0 < t1 < grid.horizon_cap:
        raise ValueError("t1 must lie strictly inside the horizon")
    direct = direct or solve_2bsde_sweep(problem, sim_config, basis, picard)
    k1 = grid.index_of(t1)
    V1 = direct.value_fits[k1]
    fresh = replace(sim_config, seed=sim_config.seed + 1)
    members = _screen(problem, sim_config).members
    outer, outer_sols, occ = [], [], []
    ks = k1 // 2
    bins = direct.bins
    for i, spec in enumerate(members):
        b = fresh.simulate(spec, i)
        tb = truncate_horizon(b, t1)
        reached = b.stop_index <= k1
        if not np.any(~reached):
            raise ValueError("no paths alive at t1")
        xi_inner = np.where(reached, problem.term.values(b), V1(tb.stopped_state()))
        s = backward_induction(tb, problem.gen, xi_inner, basis, picard)
        outer.append(s.y0)
        outer_sols.append(s)
        occ.append(_occupancy(tb, bins)[ks])
    two_stage = float(max(outer))
    a = direct.V0
    gap = abs(a - two_stage) / max(abs(a), 1e-12)
    per_bin = []
    if ks > 0:
        occupied = np.flatnonzero(np.max(occ, axis=0) >= min_occupancy)
        x = bins.centers[occupied][:, None]
        d_val = direct.value_fits[ks](x)
        t_val = np.max([s.y_fits[ks](x) for s in outer_sols if s.y_fits[ks] is not None], axis=0)
        for c, dv, tv in zip(occupied, d_val, t_val):
            per_bin.append({"bin": int(c), "x": float(bins.centers[c]), "direct": float(dv), "two_stage": float(tv),
                            "rel_gap": float(abs(dv - tv) / max(abs(dv), 1e-12))})
    passed = gap <= tolerance and all(p["rel_gap"] <= tolerance for p in per_bin)
    return DppReport(t1, a, two_stage, gap, outer, per_bin, tolerance, bool(passed))


def twobsde_comparison_check(first: TwoBsdeProblem, second: TwoBsdeProblem, sim_config: SimConfig,
                             basis: RegressionBasis = RegressionBasis(), picard: PicardConfig = PicardConfig(),
                             order_samples: int = 512, seed: int = 0) -> ComparisonReport:
    """Member-wise comparison on common paths; V <= V' follows because max is monotone."""
    if len(first.family.members) != len(second.family.members):
        raise ValueError("both problems must share the volatility menu")
    reports = []
    for i, spec in enumerate(first.family.members):
        b = sim_config.simulate(spec, i)
        xi1, xi2 = first.term.values(b), second.term.values(b)
        if np.any(xi1 > xi2 + 1e-12 * (1 + np.abs(xi2))):
            raise OrderPreconditionError(f"terminal values are not ordered for member {i}")
        scale = 1.0 + float(np.max(np.abs(xi1)))
        if _sample_order(b, first.gen, second.gen, order_samples, seed, scale) > 1e-12 * scale:
            raise OrderPreconditionError(f"drivers are not ordered for member {i}")
        s1 = solve_bsde(b, first.gen, first.term, basis, picard)
        s2 = solve_bsde(b, second.gen, second.term, basis, picard)
        L = max(first.gen.lipschitz_L, second.gen.lipschitz_L)
        reports.append((comparison_statistics(s1.Y, s2.Y, b.stop_index, b.grid.step_h, L), s1.y0, s2.y0))
    worst = max(reports, key=lambda r: r[0].violation - r[0].tolerance)[0]
    v0 = max(r[1] for r in reports)
    v0p = max(r[2] for r in reports)
    passed = all(r[0].passed for r in reports)
    return ComparisonReport(worst.violation, worst.tolerance, worst.std_error, v0p - v0, passed)


@dataclass
class SupermartingaleReport:
    max_excess: float
    max_drift: float
    regression_allowance: list
    blocks: int
    passed: bool

    def to_record(self) -> dict:
        return dict(self.__dict__)


def _block_bin_drifts(sol: TwoBsdeSolution, a: int, c: int, min_occ: float):
    """Per member and bin: mean and SE of U^P_c - U^P_a given the bin at a."""
    out = []
    for K, s in zip(sol.U_decomp, sol.per_member):
        b = s.bundle
        alive = b.stop_index > a
        dU = -(K[:, c] - K[:, a])[alive]
        cells = sol.bins.assign(b.state_at(a)[alive])
        rows = {}
        for cell in np.unique(cells[cells >= 0]):
            sel = cells == cell
            if sel.sum() < max(30, min_occ * b.n_paths):
                continue
            rows[int(cell)] = (float(dU[sel].mean()), float(dU[sel].std(ddof=1) / math.sqrt(sel.sum())))
        out.append(rows)
    return out


def supermartingale_check(sol: TwoBsdeSolution, blocks: int = 4, n_se: float = 3.0,
                          min_occupancy: float = 0.01) -> SupermartingaleReport:
    """Drift of U^P = -K^P over time blocks and state bins must be <= 0 within tolerance.

    The tolerance is n_se standard errors plus a regression allowance: the
    largest |drift| shown by the member attaining V in the block (that member
    is a martingale in the limit, so what it shows is fitted-value noise).
    """
    if not sol.U_decomp:
        raise ValueError("supermartingale check needs per-member K processes")
    N = sol.V.shape[0] - 1
    edges = np.linspace(0, N, blocks + 1).astype(int)
    worst_excess, worst_drift = -math.inf, -math.inf
    allowances = []
    for a, c in zip(edges[:-1], edges[1:]):
        rows = _block_bin_drifts(sol, a, c, min_occupancy)
        allow = 0.0
        for cell in set().union(*[r.keys() for r in rows]):
            j = int(sol.argmax_member[a, cell])
            if cell in rows[j]:
                allow = max(allow, abs(rows[j][cell][0]))
        allowances.append(allow)
        slack = (c - a) * sol.step_h ** 2
        for r in rows:
            for m, se in r.values():
                worst_drift = max(worst_drift, m)
                worst_excess = max(worst_excess, m - (n_se * se + allow + slack))
    return SupermartingaleReport(worst_excess, worst_drift, allowances, blocks, bool(worst_excess <= 0))
