"""Reflected BSDE solver: Snell envelope, truncation ladder and Skorokhod diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bsde import (
    BackwardSolution,
    ComparisonReport,
    GeneratorSpec,
    OrderPreconditionError,
    PicardConfig,
    TerminalSpec,
    _sample_order,
    _rows,
    _time_major,
    _z_from_regression,
    backward_induction,
    comparison_statistics,
)
from .norms import NormParams, norm_D, norm_H, norm_K, norm_L
from .paths import PathBundle, quadratic_variation_density, truncate_horizon
from .regression import RegressionBasis, StepFit


class ObstacleError(ValueError):
    pass


class TruncationNonConvergence(RuntimeError):
    def __init__(self, residuals):
        self.residuals = list(residuals)
        super().__init__(f"truncation ladder did not converge: {self.residuals}")


@dataclass(frozen=True)
class ObstacleSpec:
    """Lower barrier S(t, state). ``S_fn=None`` means unconstrained (S = -inf)."""

    S_fn: Callable | None = None
    label: str = ""

    @classmethod
    def unconstrained(cls) -> "ObstacleSpec":
        return cls(None, "unconstrained")

    @property
    def constrained(self) -> bool:
        return self.S_fn is not None

    def values(self, bundle: PathBundle) -> np.ndarray:
        """S on every (path, step); -inf from the stop index on (Y is pinned to xi there)."""
        n, N1 = bundle.n_paths, bundle.grid.n_steps + 1
        out = np.full((n, N1), -np.inf)
        if self.S_fn is None:
            return out
        h = bundle.grid.step_h
        for k in range(N1):
            alive = bundle.stop_index > k
            if not alive.any():
                break
            out[alive, k] = np.broadcast_to(
                np.asarray(self.S_fn(k * h, bundle.state_at(k)[alive]), dtype=float), (int(alive.sum()),)
            )
        return out

    def check_terminal(self, bundle: PathBundle, xi: np.ndarray, tol: float = 1e-9) -> None:
        if self.S_fn is None:
            return
        s_tau = np.asarray(self.S_fn(bundle.stop_times, bundle.stopped_state()), dtype=float)
        s_tau = np.broadcast_to(s_tau, xi.shape)
        scale = 1.0 + float(np.max(np.abs(xi), initial=0.0))
        bad = s_tau > xi + tol * scale
        if bundle.censored is not None:
            # paths cut by the horizon cap never reached tau; the condition does not apply
            bad &= ~bundle.censored
        if bad.any():
            raise ObstacleError(
                f"obstacle exceeds the terminal value on {int(bad.sum())} paths "
                f"(max excess {float(np.max(s_tau - xi)):.3g})"
            )


@dataclass
class ReflectedSolution(BackwardSolution):
    skorokhod: float = 0.0
    ladder: dict = field(default_factory=dict)

    def binding(self, tol: float = 1e-12) -> np.ndarray:
        """Indicator of (path, step) where the obstacle is active."""
        S = self.S if self.S is not None else np.full_like(self.Y, -np.inf)
        scale = max(1.0, float(np.max(np.abs(self.Y))))
        return np.isfinite(S) & (self.Y - S <= tol * scale)

    def summary(self) -> dict:
        out = super().summary()
        out["skorokhod_residual"] = float(self.skorokhod)
        out["K_mean_total"] = float(np.mean(self.K[np.arange(self.K.shape[0]), self.bundle.stop_index]))
        if self.ladder:
            out["truncation_levels"] = list(self.ladder.get("levels", []))
            out["truncation_residuals"] = list(self.ladder.get("residuals", []))
        return out


def skorokhod_residual(sol: BackwardSolution) -> float:
    """Mean over paths of sum_k min(1, (Y_k - S_k)^+) dK_k (start-of-step convention)."""
    if sol.K is None:
        raise ValueError("solution carries no K")
    dK = np.diff(sol.K, axis=1)
    if sol.S is None:
        return 0.0
    gap = sol.Y[:, :-1] - sol.S[:, :-1]
    gap = np.where(np.isfinite(gap), gap, 1.0)
    w = np.minimum(1.0, np.maximum(gap, 0.0))
    return float(np.mean(np.sum(w * dK, axis=1)))


def _as_reflected(sol: BackwardSolution, **extra) -> ReflectedSolution:
    fields = {k: getattr(sol, k) for k in sol.__dataclass_fields__}
    if fields["K"] is None:
        n, N1 = sol.Y.shape
        fields["K"] = np.zeros((n, N1))
    out = ReflectedSolution(**fields, **extra)
    out.skorokhod = skorokhod_residual(out)
    return out


def snell_envelope(bundle: PathBundle, discount_mu: float, term: TerminalSpec, obstacle: ObstacleSpec,
                   basis: RegressionBasis = RegressionBasis(), z_mode: str = "covariation") -> ReflectedSolution:
    """Discounted dynamic programming yhat_k = max(Shat_k, E_k[yhat_{k+1}]), then undiscount.

    yhat = e^{-mu t} y, Shat = e^{-mu t} S, xihat = e^{-mu tau} xi. This is the
    reflected solution for the driver -mu y.
    """
    xi = term.values(bundle)
    obstacle.check_terminal(bundle, xi)
    S = obstacle.values(bundle)
    qv = quadratic_variation_density(bundle)
    n, N, h = bundle.n_paths, bundle.grid.n_steps, bundle.grid.step_h
    times = bundle.times
    stop = bundle.stop_index
    disc = np.exp(-discount_mu * times)
    X = np.ascontiguousarray(np.moveaxis(bundle.X, 1, 0)) + bundle.initial_offset
    W = np.ascontiguousarray(np.moveaxis(bundle.W, 1, 0))
    sig_all, sig_const = _time_major(bundle.sigma_samples)
    ap_all, ap_const = _time_major(qv.a_hat_pinv)
    S_t = np.ascontiguousarray(S.T)
    frozen = np.arange(N + 1)[:, None] >= stop[None, :]
    yhat = np.where(frozen, (disc[stop] * xi)[None, :], 0.0)
    Y = np.where(frozen, xi[None, :], 0.0)
    Z = np.zeros((N + 1, n, bundle.d))
    dN = np.zeros((N, n))
    lifts = np.zeros((N, n))
    y_fits: list = [None] * (N + 1)
    z_fits: list = [None] * (N + 1)
    conds = []
    fallback = 0
    for k in range(N - 1, -1, -1):
        idx = np.flatnonzero(stop > k)
        if idx.size == 0:
            continue
        if idx.size == n:
            idx = slice(None)
        count = n if isinstance(idx, slice) else idx.size
        x = X[k, idx]
        fb = basis.fit(x, step=k)
        conds.append(fb.condition)
        fallback += int(fb.constant_only)
        nxt = yhat[k + 1, idx]
        _, cont = fb.fitted(nxt)
        new = np.maximum(disc[k] * S_t[k, idx], cont)
        yhat[k, idx] = new
        y_k = new / disc[k]
        dx = X[k + 1, idx] - x
        dw = W[k + 1, idx] - W[k, idx]
        zk = _z_from_regression(fb, nxt, cont, dx, dw, _rows(ap_all, ap_const, k, idx, count),
                                _rows(sig_all, sig_const, k, idx, count), h, z_mode) / disc[k]
        lift = (new - cont) / disc[k]
        Y[k, idx] = y_k
        Z[k, idx] = zk
        lifts[k, idx] = lift
        dN[k, idx] = Y[k + 1, idx] - y_k - h * discount_mu * y_k - np.einsum("ij,ij->i", zk, dx) + lift
        coefs = fb.solve(np.column_stack([y_k, zk]))
        y_fits[k] = StepFit(fb, coefs[:, 0])
        z_fits[k] = StepFit(fb, coefs[:, 1:])
        fb.release()
    Y = np.ascontiguousarray(Y.T)
    Z = np.ascontiguousarray(np.moveaxis(Z, 0, 1))
    dN = np.ascontiguousarray(dN.T)
    lifts = lifts.T
    K = np.zeros((n, N + 1))
    K[:, 1:] = np.cumsum(lifts, axis=1)
    report = {"basis": basis.describe(), "z_mode": z_mode, "method": "snell",
              "max_condition": float(max(conds)) if conds else 1.0,
              "constant_fallback_steps": fallback}
    se = float(np.std(disc[stop] * xi, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    sol = ReflectedSolution(
        Y=Y, Z=Z, residual_N=dN, picard_iters=1, regression_report=report, sweep_distances=[0.0],
        converged=True, xi=xi, step0_se=se, bundle=bundle, y_fits=y_fits, z_fits=z_fits, K=K, S=S,
        generator=GeneratorSpec.discounting(discount_mu), terminal=term, basis=basis,
    )
    sol.skorokhod = skorokhod_residual(sol)
    return sol


DEFAULT_LADDER = (1.0, 2.0, 4.0, 8.0, 16.0)


def _truncated_terminal(bundle: PathBundle, tb: PathBundle, xi: np.ndarray, tail: np.ndarray) -> np.ndarray:
    """xi where the true stop is reached by the truncation, the tail value y_{tau ^ n} otherwise."""
    rows = np.arange(bundle.n_paths)
    return np.where(tb.stop_index >= bundle.stop_index, xi, tail[rows, tb.stop_index])


def solve_truncated(bundle: PathBundle, gen: GeneratorSpec, term: TerminalSpec, obstacle: ObstacleSpec,
                    n_time: float, tail: ReflectedSolution | None = None,
                    basis: RegressionBasis = RegressionBasis(), picard: PicardConfig = PicardConfig(),
                    z_mode: str = "covariation") -> ReflectedSolution:
    """Reflected induction with driver ``gen`` on [0, tau ^ n] and terminal y_{tau ^ n} from ``tail``."""
    if tail is None:
        tail = snell_envelope(bundle, gen.monotone_mu, term, obstacle, basis, z_mode)
    tb = truncate_horizon(bundle, min(n_time, bundle.grid.horizon_cap))
    xi = tail.xi
    xi_n = _truncated_terminal(bundle, tb, xi, tail.Y)
    S = obstacle.values(tb)
    sol = backward_induction(tb, gen, xi_n, basis, picard, obstacle=S, z_mode=z_mode)
    sol.terminal = term
    return _as_reflected(sol)


def solve_rbsde(bundle: PathBundle, gen: GeneratorSpec, term: TerminalSpec, obstacle: ObstacleSpec,
                basis: RegressionBasis = RegressionBasis(), picard: PicardConfig = PicardConfig(),
                ladder: Sequence[float] = DEFAULT_LADDER, tol: float = 1e-4, p: float = 2.0,
                z_mode: str = "covariation", require_convergence: bool = False) -> ReflectedSolution:
    """Two-stage construction.

    (1) Snell envelope for the driver -mu y gives the tail value beyond the
    truncation time; (2) for each level n of ``ladder`` the reflected induction
    with the full driver runs on [0, tau ^ n] with terminal y_{tau ^ n}. The
    ladder stops when successive levels differ by less than ``tol`` in the D
    norm, or once a level reaches every path's stop (the answer is then exact
    for the discrete scheme).
    """
    gen.check_window()
    tail = snell_envelope(bundle, gen.monotone_mu, term, obstacle, basis, z_mode)
    cover = float(bundle.stop_times.max())
    levels = sorted(float(v) for v in ladder)
    if not levels or levels[-1] < cover:
        levels.append(cover)
    prm = NormParams(p, 0.0)
    prev = None
    residuals: list[float] = []
    used: list[float] = []
    sol = None
    for n_time in levels:
        sol = solve_truncated(bundle, gen, term, obstacle, n_time, tail, basis, picard, z_mode)
        used.append(n_time)
        covered = n_time >= cover
        if prev is not None:
            r = norm_D(sol.Y - prev.Y, prm, bundle.times, bundle.stop_index).value
            residuals.append(r)
            scale = 1.0 + float(np.max(np.abs(sol.Y)))
            if r < tol * scale:
                break
        if covered:
            break
        prev = sol
    else:
        if require_convergence:
            raise TruncationNonConvergence(residuals)
    sol.ladder = {"levels": used, "residuals": residuals, "cover_time": cover}
    return sol


def truncation_study(bundle: PathBundle, gen: GeneratorSpec, term: TerminalSpec, obstacle: ObstacleSpec,
                     ns: Sequence[float] = (1, 2, 4, 8), reference_n: float = 16.0,
                     basis: RegressionBasis = RegressionBasis(), picard: PicardConfig = PicardConfig(),
                     p: float = 2.0) -> dict:
    """||Y^n - Y^ref||_D for every ladder level against the ``reference_n`` run."""
    tail = snell_envelope(bundle, gen.monotone_mu, term, obstacle, basis)
    ref = solve_truncated(bundle, gen, term, obstacle, reference_n, tail, basis, picard)
    prm = NormParams(p, 0.0)
    errors, y0 = [], []
    for n_time in ns:
        sol = solve_truncated(bundle, gen, term, obstacle, n_time, tail, basis, picard)
        errors.append(norm_D(sol.Y - ref.Y, prm, bundle.times, bundle.stop_index).value)
        y0.append(sol.y0)
    return {"n": list(ns), "reference_n": reference_n, "errors": errors, "y0": y0,
            "y0_reference": ref.y0, "alive_at_cap_fraction": bundle.alive_at_cap_fraction,
            "strictly_decreasing": bool(all(errors[i + 1] < errors[i] for i in range(len(errors) - 1)))}


def rbsde_comparison_check(bundle: PathBundle, first: tuple, second: tuple,
                           basis: RegressionBasis = RegressionBasis(), picard: PicardConfig = PicardConfig(),
                           order_samples: int = 1024, seed: int = 0, **solve_kw) -> ComparisonReport:
    """Pairs (gen, term, obstacle) with xi <= xi', f <= f', S <= S' solved on common paths."""
    (g1, t1, o1), (g2, t2, o2) = first, second
    xi1, xi2 = t1.values(bundle), t2.values(bundle)
    if np.any(xi1 > xi2 + 1e-12 * (1 + np.abs(xi2))):
        raise OrderPreconditionError("terminal values are not ordered (xi <= xi')")
    S1, S2 = o1.values(bundle), o2.values(bundle)
    both = np.isfinite(S1) & np.isfinite(S2)
    if np.any(np.isfinite(S1) & ~np.isfinite(S2)) or np.any(S1[both] > S2[both] + 1e-12):
        raise OrderPreconditionError("obstacles are not ordered (S <= S')")
    scale = 1.0 + float(np.max(np.abs(xi1)))
    if _sample_order(bundle, g1, g2, order_samples, seed, scale) > 1e-12 * scale:
        raise OrderPreconditionError("drivers are not ordered (f <= f') at sampled points")
    s1 = solve_rbsde(bundle, g1, t1, o1, basis, picard, **solve_kw)
    s2 = solve_rbsde(bundle, g2, t2, o2, basis, picard, **solve_kw)
    L = max(g1.lipschitz_L, g2.lipschitz_L)
    return comparison_statistics(s1.Y, s2.Y, bundle.stop_index, bundle.grid.step_h, L)


@dataclass
class RbsdeStabilityReport:
    perturbation: str
    eps: list
    dY: list
    dZ: list
    dK: list
    delta_xi: list
    delta_f: list
    exponent: float
    passed: bool

    def to_record(self) -> dict:
        return dict(self.__dict__)


def rbsde_stability_check(bundle: PathBundle, gen: GeneratorSpec, term: TerminalSpec, obstacle: ObstacleSpec,
                          perturbation: str = "xi", eps_list: Sequence[float] = (0.1, 0.01, 0.001),
                          basis: RegressionBasis = RegressionBasis(), picard: PicardConfig = PicardConfig(),
                          p: float = 2.0, p_prime: float = 3.0, eta: float = 0.0,
                          window: tuple = (0.5, 1.1), **solve_kw) -> RbsdeStabilityReport:
    """Perturb xi or f by eps with S fixed and fit the order of ||dY||_D in eps."""
    if perturbation not in ("xi", "f"):
        raise ValueError("perturbation must be 'xi' or 'f'")
    base = solve_rbsde(bundle, gen, term, obstacle, basis, picard, **solve_kw)
    prm = NormParams(p, eta)
    times, stop = bundle.times, bundle.stop_index
    dY, dZ, dK, dxi, dfs = [], [], [], [], []
    for eps in eps_list:
        if perturbation == "xi":
            g2, t2 = gen, term.shifted(eps)
        else:
            g2, t2 = gen.shifted(eps), term
        s2 = solve_rbsde(bundle, g2, t2, obstacle, basis, picard, **solve_kw)
        dY.append(norm_D(s2.Y - base.Y, prm, times, stop).value)
        dZ.append(norm_H(s2.Z - base.Z, np.asarray(bundle.sigma_samples), prm, times, stop).value)
        # total variation of K' - K, which is a nondecreasing process
        tv = np.zeros_like(base.K)
        tv[:, 1:] = np.cumsum(np.abs(np.diff(s2.K - base.K, axis=1)), axis=1)
        dK.append(norm_K(tv, prm, times, stop).value)
        dxi.append(norm_L(s2.xi - base.xi, NormParams(p_prime, eta), times, stop).value ** p)
        df = eps * bundle.stop_times if perturbation == "f" else np.zeros(bundle.n_paths)
        dfs.append(float(np.mean(df ** p_prime)) ** (p / p_prime))
    eps_arr = np.asarray(eps_list, dtype=float)
    pos = eps_arr > 0
    exponent = math.nan
    if pos.sum() > 1:
        v = np.log(np.maximum(np.asarray(dY)[pos], 1e-300))
        exponent = float(np.polyfit(np.log(eps_arr[pos]), v, 1)[0])
    passed = bool(window[0] <= exponent <= window[1])
    return RbsdeStabilityReport(perturbation, list(eps_list), dY, dZ, dK, dxi, dfs, exponent, passed)
