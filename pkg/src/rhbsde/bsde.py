"""Random-horizon BSDE solver.

Discretization of

    Y_{t^tau} = xi + int_{t^tau}^tau f_s(Y_s, Z_s) ds - int_{t^tau}^tau (Z_s . dX_s + dN_s)

on a uniform grid: conditional expectations are least-squares regressions on
the alive paths, the driver is handled by Picard sweeps over the whole
backward pass, and Z is read off the covariation of Y with X through the
generalized inverse of sigma sigma^T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .measures import DriftControlSet, control_densities, sup_expectation
from .norms import NormParams, WindowError, norm_D, norm_H, norm_L, norm_N
from .paths import PathBundle, QvDensity, quadratic_variation_density
from .regression import RegressionBasis, StepFit


class PicardDivergenceError(RuntimeError):
    def __init__(self, ratio: float, distances: Sequence[float]):
        self.ratio = ratio
        self.distances = list(distances)
        super().__init__(f"Picard iteration is not contracting (successive ratio {ratio:.3g})")


class AssumptionViolation(ValueError):
    pass


class OrderPreconditionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Problem data


@dataclass(frozen=True)
class GeneratorSpec:
    """Driver F(t, x, y, z, sigma) with its structural constants.

    ``F_fn`` is vectorized: t is a float, x is [n, d], y is [n], z is [n, d] and
    sigma is [n, d, m]; it returns [n] (or something broadcastable to it).
    """

    F_fn: Callable
    lipschitz_L: float = 0.0
    monotone_mu: float = 0.0
    weight_rho: float = 1.0
    moment_q: float = 4.0
    label: str = ""

    def __call__(self, t, x, y, z, sigma) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.F_fn(t, x, y, z, sigma), dtype=float), y.shape)

    def f0(self, t, x, sigma) -> np.ndarray:
        n = x.shape[0]
        return self(t, x, np.zeros(n), np.zeros((n, x.shape[1])), sigma)

    def check_window(self) -> None:
        if not self.moment_q > 1:
            raise WindowError(f"moment q={self.moment_q} must exceed 1")
        if not self.weight_rho > -self.monotone_mu:
            raise WindowError(
                f"integrability weight rho={self.weight_rho} must exceed -mu={-self.monotone_mu}"
            )
        if self.lipschitz_L < 0:
            raise WindowError("Lipschitz constant must be nonnegative")

    # constructors -----------------------------------------------------------
    @classmethod
    def zero(cls, **kw) -> "GeneratorSpec":
        return cls.constant(0.0, **kw)

    @classmethod
    def constant(cls, c: float, **kw) -> "GeneratorSpec":
        kw.setdefault("label", f"F={c:g}")
        return cls(lambda t, x, y, z, s, _c=float(c): np.full(y.shape, _c), **kw)

    @classmethod
    def linear(cls, a: float = 0.0, b=0.0, c: float | Callable = 0.0, **kw) -> "GeneratorSpec":
        """F = a y + b . (sigma^T z) + c, with c a constant or a function of (t, x)."""
        b_arr = np.atleast_1d(np.asarray(b, dtype=float))

        def F(t, x, y, z, s):
            out = a * y
            if np.any(b_arr):
                sz = np.einsum("nij,ni->nj", np.broadcast_to(s, (y.shape[0],) + np.shape(s)[-2:]), z)
                out = out + sz @ np.broadcast_to(b_arr, (sz.shape[1],))
            cc = c(t, x) if callable(c) else c
            return out + cc

        kw.setdefault("lipschitz_L", max(abs(a), float(np.linalg.norm(b_arr))))
        kw.setdefault("monotone_mu", -a)
        kw.setdefault("weight_rho", max(0.0, a) + 1.0)
        kw.setdefault("label", f"F={a:g}*y+{b_arr.tolist()}.sz+c")
        return cls(F, **kw)

    @classmethod
    def discounting(cls, mu: float, **kw) -> "GeneratorSpec":
        kw.setdefault("label", f"F=-{mu:g}*y")
        return cls.linear(a=-mu, **kw)

    # transformations -------------------------------------------------------
    def shifted(self, c: float | Callable) -> "GeneratorSpec":
        """F + c, where c is a constant or a function of (t, x)."""
        base = self.F_fn

        def F(t, x, y, z, s):
            return base(t, x, y, z, s) + (c(t, x) if callable(c) else c)

        return replace(self, F_fn=F, label=f"{self.label}+shift")

    def with_f0_scaled(self, factor: float) -> "GeneratorSpec":
        """F + (factor - 1) f0, which multiplies f0 by ``factor``."""
        base = self.F_fn

        def F(t, x, y, z, s):
            n = y.shape[0]
            f0 = base(t, x, np.zeros(n), np.zeros((n, x.shape[1])), s)
            return base(t, x, y, z, s) + (factor - 1.0) * f0

        return replace(self, F_fn=F, label=f"{self.label}*f0x{factor:g}")

    def truncated(self, n_time: float) -> "GeneratorSpec":
        """f^n = F on [0, n], -mu y after n."""
        base, mu = self.F_fn, self.monotone_mu

        def F(t, x, y, z, s):
            if t <= n_time + 1e-12:
                return base(t, x, y, z, s)
            return -mu * y

        return replace(self, F_fn=F, label=f"{self.label}|n={n_time:g}")

    # sampled structural checks ---------------------------------------------
    def check_assumptions(self, bundle: PathBundle, n_samples: int = 512, seed: int = 0,
                          eps: float = 1e-6, y_scale: float = 1.0) -> dict:
        """Sample Lipschitz and monotonicity quotients along the bundle."""
        rng = np.random.default_rng(seed)
        n, N = bundle.n_paths, bundle.grid.n_steps
        p = rng.integers(0, n, n_samples)
        k = rng.integers(0, N, n_samples)
        d = bundle.d
        lip, mono = 0.0, -np.inf
        for kk in np.unique(k):
            sel = p[k == kk]
            x = bundle.state_at(int(kk))[sel]
            s = np.asarray(bundle.sigma_samples[sel, kk])
            t = kk * bundle.grid.step_h
            y1, y2 = rng.normal(0, y_scale, (2, len(sel)))
            z1, z2 = rng.normal(0, 1.0, (2, len(sel), d))
            F1 = self(t, x, y1, z1, s)
            F2 = self(t, x, y2, z2, s)
            dz = np.einsum("nij,ni->nj", s, z1 - z2)
            denom = np.abs(y1 - y2) + np.linalg.norm(dz, axis=1)
            ok = denom > 1e-12
            if ok.any():
                lip = max(lip, float(np.max(np.abs(F1 - F2)[ok] / denom[ok])))
            F2y = self(t, x, y2, z1, s)
            dy = y1 - y2
            okm = np.abs(dy) > 1e-12
            if okm.any():
                q = (dy * (F1 - F2y))[okm] / dy[okm] ** 2
                mono = max(mono, float(np.max(q)))
        if lip > self.lipschitz_L * (1 + eps) + 1e-12:
            raise AssumptionViolation(
                f"sampled Lipschitz quotient {lip:.6g} exceeds L={self.lipschitz_L:.6g}"
            )
        if mono > -self.monotone_mu + eps * abs(self.monotone_mu) + 1e-12:
            raise AssumptionViolation(
                f"sampled monotonicity quotient {mono:.6g} exceeds -mu={-self.monotone_mu:.6g}"
            )
        return {"lipschitz_quotient": lip, "monotonicity_quotient": mono}


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal variable xi.

    Either ``g`` (a function of the state at the stopping index, the Markov
    case) or ``xi_fn`` (any function of the stopped bundle) must be given.
    """

    g: Callable | None = None
    xi_fn: Callable | None = None
    integrability: tuple | None = None
    label: str = ""

    def __post_init__(self):
        if (self.g is None) == (self.xi_fn is None):
            raise ValueError("give exactly one of g or xi_fn")

    @property
    def markov(self) -> bool:
        return self.g is not None

    @classmethod
    def constant(cls, c: float) -> "TerminalSpec":
        return cls(g=lambda x, _c=float(c): np.full(x.shape[0], _c), label=f"xi={c:g}")

    @classmethod
    def of_state(cls, g: Callable, label: str = "") -> "TerminalSpec":
        return cls(g=g, label=label)

    def values(self, bundle: PathBundle) -> np.ndarray:
        if self.g is not None:
            out = self.g(bundle.stopped_state())
        else:
            out = self.xi_fn(bundle)
        return np.broadcast_to(np.asarray(out, dtype=float), (bundle.n_paths,)).copy()

    def shifted(self, c: float) -> "TerminalSpec":
        if self.g is not None:
            g = self.g
            return replace(self, g=lambda x: g(x) + c, label=f"{self.label}+{c:g}")
        f = self.xi_fn
        return replace(self, xi_fn=lambda b: f(b) + c, label=f"{self.label}+{c:g}")

    def scaled(self, c: float) -> "TerminalSpec":
        if self.g is not None:
            g = self.g
            return replace(self, g=lambda x: c * g(x), label=f"{c:g}*{self.label}")
        f = self.xi_fn
        return replace(self, xi_fn=lambda b: c * f(b), label=f"{c:g}*{self.label}")


@dataclass(frozen=True)
class PicardConfig:
    max_iters: int = 50
    tol: float = 1e-6
    min_sweeps: int = 2
    implicit: bool = False
    newton_iters: int = 20
    newton_tol: float = 1e-12


# ---------------------------------------------------------------------------
# Solution container


@dataclass
class BackwardSolution:
    Y: np.ndarray
    Z: np.ndarray
    residual_N: np.ndarray
    picard_iters: int
    regression_report: dict
    sweep_distances: list
    converged: bool
    xi: np.ndarray
    step0_se: float
    bundle: PathBundle = field(repr=False)
    y_fits: list = field(default_factory=list, repr=False)
    z_fits: list = field(default_factory=list, repr=False)
    K: np.ndarray | None = None
    S: np.ndarray | None = None
    generator: GeneratorSpec | None = field(default=None, repr=False)
    terminal: TerminalSpec | None = field(default=None, repr=False)
    basis: RegressionBasis | None = field(default=None, repr=False)
    picard: PicardConfig | None = field(default=None, repr=False)

    @property
    def y0(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    @property
    def y0_se(self) -> float:
        return float(self.step0_se)

    @property
    def picard_ratios(self) -> list[float]:
        d = self.sweep_distances
        return [d[i + 1] / d[i] if d[i] > 0 else 0.0 for i in range(len(d) - 1)]

    @property
    def median_picard_ratio(self) -> float:
        r = self.picard_ratios
        return float(np.median(r)) if r else 0.0

    def value_at(self, k: int, x: np.ndarray) -> np.ndarray:
        """Fitted value function v(t_k, x); only for steps where some path was alive."""
        fit = self.y_fits[k]
        if fit is None:
            raise ValueError(f"no regression at step {k}")
        return fit(x)

    def z_at(self, k: int, x: np.ndarray) -> np.ndarray:
        fit = self.z_fits[k]
        if fit is None:
            raise ValueError(f"no regression at step {k}")
        out = fit(x)
        return out if out.ndim == 2 else out[:, None]

    def summary(self) -> dict:
        p = NormParams(2.0, 0.0)
        n_norm = norm_N(self.residual_N, p, self.bundle.times, self.bundle.stop_index)
        return {
            "Y0_mean": self.y0,
            "Y0_se": self.y0_se,
            "picard_iters": int(self.picard_iters),
            "picard_converged": bool(self.converged),
            "median_picard_ratio": self.median_picard_ratio,
            "residual_norm": float(n_norm.value),
            "alive_at_cap_fraction": self.bundle.alive_at_cap_fraction,
        }


# ---------------------------------------------------------------------------
# Core backward induction


def _z_from_regression(fb, y_next, cont_y, dx, dw, a_pinv, sig, h, mode):
    resid = (y_next - cont_y)[:, None]
    if mode == "covariation":
        _, cov = fb.fitted(resid * dx / h)
        return np.einsum("nij,nj->ni", a_pinv, np.atleast_2d(cov.reshape(dx.shape)))
    # markov: regress against the Brownian increment, giving sigma^T Z
    _, sz = fb.fitted(resid * dw / h)
    sz = sz.reshape(dw.shape)
    return np.einsum("nij,njk,nk->ni", a_pinv, sig, sz)


def _newton_y(gen, t, x, cont, z, sig, h, y0, iters, tol):
    y = y0.copy()
    for _ in range(iters):
        F = gen(t, x, y, z, sig)
        g = y - cont - h * F
        delta = 1e-7 * (1.0 + np.abs(y))
        dF = (gen(t, x, y + delta, z, sig) - gen(t, x, y - delta, z, sig)) / (2 * delta)
        step = g / (1.0 - h * dF)
        y = y - step
        if np.max(np.abs(step), initial=0.0) < tol * (1.0 + np.max(np.abs(y), initial=0.0)):
            break
    return y


def _time_major(arr: np.ndarray):
    """[n, N, ...] -> [N, n, ...] contiguous, or the single matrix when arr is a broadcast constant."""
    if arr.ndim >= 2 and arr.strides[0] == 0 and arr.strides[1] == 0:
        return np.asarray(arr[0, 0]), True
    return np.ascontiguousarray(np.moveaxis(arr, 1, 0)), False


def _rows(arr, const: bool, k: int, sel, count: int):
    if const:
        return np.broadcast_to(arr, (count,) + arr.shape)
    return arr[k, sel]


def backward_induction(bundle: PathBundle, gen: GeneratorSpec, xi: np.ndarray,
                       basis: RegressionBasis, picard: PicardConfig = PicardConfig(),
                       obstacle: np.ndarray | None = None, qv: QvDensity | None = None,
                       z_mode: str = "covariation") -> BackwardSolution:
    """Picard-iterated regression scheme, with optional per-step reflection on ``obstacle``.

    ``obstacle`` is an [n, N+1] array (``-inf`` where unconstrained). Reflection
    lifts Y_k to max(S_k, continuation) and records the lift as dK.
    """
    if z_mode not in ("covariation", "markov"):
        raise ValueError(f"unknown z_mode {z_mode!r}")
    qv = qv if qv is not None else quadratic_variation_density(bundle)
    grid = bundle.grid
    n, N, h = bundle.n_paths, grid.n_steps, grid.step_h
    d = bundle.d
    stop = bundle.stop_index
    xi = np.asarray(xi, dtype=float)

    # internal arrays are time-major so that each step reads contiguous rows
    X = np.ascontiguousarray(np.moveaxis(bundle.X, 1, 0)) + bundle.initial_offset
    W = np.ascontiguousarray(np.moveaxis(bundle.W, 1, 0))
    sig_all, sig_const = _time_major(bundle.sigma_samples)
    ap_all, ap_const = _time_major(qv.a_hat_pinv)
    S_t = None if obstacle is None else np.ascontiguousarray(obstacle.T)
    frozen = np.arange(N + 1)[:, None] >= stop[None, :]
    Y_prev = np.where(frozen, xi[None, :], 0.0)
    Z_prev = np.zeros((N + 1, n, d))
    alive_steps = []
    for k in range(N):
        idx = np.flatnonzero(stop > k)
        alive_steps.append(slice(None) if idx.size == n else idx)

    distances: list[float] = []
    conds: list[float] = []
    fallback_steps = 0
    converged = False
    it = 0
    for it in range(1, picard.max_iters + 1):
        Y = np.where(frozen, xi[None, :], 0.0)
        Z = np.zeros((N + 1, n, d))
        dN = np.zeros((N, n))
        lifts = np.zeros((N, n)) if obstacle is not None else None
        y_fits: list = [None] * (N + 1)
        z_fits: list = [None] * (N + 1)
        conds = []
        fallback_steps = 0
        drive_sum = np.zeros(n)
        for k in range(N - 1, -1, -1):
            idx = alive_steps[k]
            count = n if isinstance(idx, slice) else idx.size
            if count == 0:
                continue
            t = k * h
            x = X[k, idx]
            dx = X[k + 1, idx] - x
            dw = W[k + 1, idx] - W[k, idx]
            sig = _rows(sig_all, sig_const, k, idx, count)
            a_pinv = _rows(ap_all, ap_const, k, idx, count)
            y_next = Y[k + 1, idx]
            fb = basis.fit(x, step=k)
            conds.append(fb.condition)
            fallback_steps += int(fb.constant_only)
            if picard.implicit:
                _, cont_y = fb.fitted(y_next)
                zk = _z_from_regression(fb, y_next, cont_y, dx, dw, a_pinv, sig, h, z_mode)
                y = _newton_y(gen, t, x, cont_y, zk, sig, h, Y_prev[k, idx] if it > 1 else cont_y,
                              picard.newton_iters, picard.newton_tol)
                drive = h * gen(t, x, y, zk, sig)
            else:
                drive = h * gen(t, x, Y_prev[k, idx], Z_prev[k, idx], sig)
                _, both = fb.fitted(np.stack([y_next + drive, y_next], axis=1))
                y, cont_y = both[:, 0], both[:, 1]
                zk = _z_from_regression(fb, y_next, cont_y, dx, dw, a_pinv, sig, h, z_mode)
            drive_sum[idx] += drive
            lift = 0.0
            if S_t is not None:
                s_k = S_t[k, idx]
                lift = np.where(np.isfinite(s_k), np.maximum(s_k - y, 0.0), 0.0)
                y = y + lift
                lifts[k, idx] = lift
            Y[k, idx] = y
            Z[k, idx] = zk
            dN[k, idx] = y_next - y + drive - np.einsum("ij,ij->i", zk, dx) + lift
            coefs = fb.solve(np.column_stack([y, zk]))
            y_fits[k] = StepFit(fb, coefs[:, 0])
            z_fits[k] = StepFit(fb, coefs[:, 1:])
            fb.release()
        # Y_0 is the mean of xi + sum h f along paths; its spread gives the SE
        step0_se = float((xi + drive_sum).std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        dist = float(np.max(np.abs(Y - Y_prev)))
        distances.append(dist)
        Y_prev, Z_prev = Y, Z
        scale = 1.0 + float(np.max(np.abs(Y)))
        if it >= picard.min_sweeps and dist < picard.tol * scale:
            converged = True
            break
        if len(distances) >= 4:
            last = distances[-4:]
            ratios = [last[i + 1] / last[i] if last[i] > 0 else 0.0 for i in range(3)]
            if all(r >= 1.0 for r in ratios):
                raise PicardDivergenceError(ratios[-1], distances)

    K = None
    if obstacle is not None:
        K = np.zeros((n, N + 1))
        K[:, 1:] = np.cumsum(lifts.T, axis=1)
    report = {
        "basis": basis.describe(),
        "z_mode": z_mode,
        "max_condition": float(max(conds)) if conds else 1.0,
        "constant_fallback_steps": int(fallback_steps),
        "implicit": bool(picard.implicit),
    }
    return BackwardSolution(
        Y=np.ascontiguousarray(Y_prev.T), Z=np.ascontiguousarray(np.moveaxis(Z_prev, 0, 1)),
        residual_N=np.ascontiguousarray(dN.T), picard_iters=it, regression_report=report,
        sweep_distances=distances, converged=converged, xi=xi, step0_se=step0_se,
        bundle=bundle, y_fits=y_fits, z_fits=z_fits, K=K,
        S=obstacle, basis=basis, picard=picard, generator=gen,
    )


def solve_bsde(bundle: PathBundle, gen: GeneratorSpec, term: TerminalSpec,
               basis: RegressionBasis = RegressionBasis(), picard: PicardConfig = PicardConfig(),
               z_mode: str = "covariation", qv: QvDensity | None = None) -> BackwardSolution:
    """Solve the BSDE with driver ``gen`` and terminal ``term`` on ``bundle``."""
    gen.check_window()
    sol = backward_induction(bundle, gen, term.values(bundle), basis, picard, qv=qv, z_mode=z_mode)
    sol.terminal = term
    return sol


def estimate_z(bundle: PathBundle, Y: np.ndarray, qv: QvDensity | None = None,
               basis: RegressionBasis = RegressionBasis(), mode: str = "covariation") -> np.ndarray:
    """Z_k = a_hat^+ E_k[(Y_{k+1} - E_k Y_{k+1}) dX_k] / h on alive paths; 0 elsewhere."""
    qv = qv if qv is not None else quadratic_variation_density(bundle)
    n, N, h = bundle.n_paths, bundle.grid.n_steps, bundle.grid.step_h
    Z = np.zeros((n, N + 1, bundle.d))
    for k in range(N):
        idx = np.flatnonzero(bundle.stop_index > k)
        if idx.size == 0:
            continue
        fb = basis.fit(bundle.X[idx, k] + bundle.initial_offset, step=k)
        y_next = Y[idx, k + 1]
        _, cont = fb.fitted(y_next)
        Z[idx, k] = _z_from_regression(
            fb, y_next, cont,
            bundle.X[idx, k + 1] - bundle.X[idx, k],
            bundle.W[idx, k + 1] - bundle.W[idx, k],
            np.asarray(qv.a_hat_pinv[idx, k]), np.asarray(bundle.sigma_samples[idx, k]), h, mode,
        )
    return Z


# ---------------------------------------------------------------------------
# Surfaces


@dataclass(frozen=True)
class StateBins:
    """Bins on the first state component, used for value/Z surfaces."""

    lower: float
    upper: float
    n_bins: int

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    def assign(self, x: np.ndarray) -> np.ndarray:
        """Bin index per sample; -1 outside the range."""
        x = np.asarray(x)
        x = x[:, 0] if x.ndim == 2 else x
        b = np.floor((x - self.lower) / (self.upper - self.lower) * self.n_bins).astype(int)
        b[(x < self.lower) | (x > self.upper)] = -1
        b[x == self.upper] = self.n_bins - 1
        return b


def bin_surface(values: np.ndarray, bundle: PathBundle, bins: StateBins,
                only_alive: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per (step, bin) mean of ``values`` [n, N+1(, d)] and occupancy counts."""
    N1 = bundle.grid.n_steps + 1
    nb = bins.n_bins
    extra = values.shape[2:] if values.ndim > 2 else ()
    sums = np.zeros((N1, nb) + extra)
    counts = np.zeros((N1, nb))
    for k in range(N1):
        b = bins.assign(bundle.state_at(k))
        ok = b >= 0
        if only_alive:
            ok &= bundle.stop_index > k
        counts[k] = np.bincount(b[ok], minlength=nb)
        if extra:
            for j in range(extra[0]):
                sums[k, :, j] = np.bincount(b[ok], weights=values[ok, k, j], minlength=nb)
        else:
            sums[k] = np.bincount(b[ok], weights=values[ok, k], minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sums / (counts if not extra else counts[..., None])
    return mean, counts


# ---------------------------------------------------------------------------
# Checks


def _solution_norms(sol: BackwardSolution, params: NormParams, densities):
    b = sol.bundle
    yD = norm_D(sol.Y, params, b.times, b.stop_index, densities)
    zH = norm_H(sol.Z, np.asarray(b.sigma_samples), params, b.times, b.stop_index, densities)
    return yD, zH


def f0_integral(bundle: PathBundle, gen: GeneratorSpec, rho: float) -> np.ndarray:
    """Per-path sum_{k < stop} |e^{rho t_k} f0_k|^2 h."""
    h = bundle.grid.step_h
    acc = np.zeros(bundle.n_paths)
    for k in range(bundle.grid.n_steps):
        idx = np.flatnonzero(bundle.stop_index > k)
        if idx.size == 0:
            break
        f0 = gen.f0(k * h, bundle.state_at(k)[idx], np.asarray(bundle.sigma_samples[idx, k]))
        acc[idx] += (math.exp(rho * k * h) * f0) ** 2 * h
    return acc


@dataclass
class AprioriReport:
    eta: float
    p: float
    lhs: float
    rhs: float
    ratio: float
    lhs_scaled: float
    rhs_scaled: float
    ratio_scaled: float
    lhs_scaling: float
    passed: bool

    def to_record(self) -> dict:
        return dict(self.__dict__)


def _apriori_sides(sol, params, densities, gen, q, rho):
    b = sol.bundle
    yD, zH = _solution_norms(sol, params, densities)
    lhs = yD.value ** params.p + zH.value ** params.p
    xi_q = norm_L(sol.xi, NormParams(q, rho), b.times, b.stop_index, densities).value
    fbar = _expect_root(f0_integral(b, gen, rho) ** (q / 2), b, densities, q)
    rhs = xi_q ** params.p + fbar ** params.p
    return lhs, rhs, (yD.value ** params.p + zH.value ** params.p) ** (1 / params.p)


def _expect_root(per_path, bundle, densities, q):
    weights = [None] if not densities else [D.at_stop(bundle.stop_index) for D in densities]
    m = sup_expectation(per_path, weights).value
    return max(m, 0.0) ** (1.0 / q)


def apriori_check(sol: BackwardSolution, params: NormParams,
                  controls: DriftControlSet | None = None) -> AprioriReport:
    """Scaling check of ||Y||_D^p + ||Z||_H^p <= C (||xi||^p + fbar^p).

    The constant is not known, so the check re-solves with xi and f0 doubled
    and passes when the empirical ratio LHS/RHS moves by less than a factor 2.
    """
    gen, term = sol.generator, sol.terminal
    params.check_window(gen)
    q, rho = gen.moment_q, gen.weight_rho
    b = sol.bundle
    dens = control_densities(b, controls) if controls is not None else None
    lhs, rhs, lhs_norm = _apriori_sides(sol, params, dens, gen, q, rho)
    gen2, term2 = gen.with_f0_scaled(2.0), term.scaled(2.0)
    sol2 = solve_bsde(b, gen2, term2, sol.basis, sol.picard)
    lhs2, rhs2, lhs_norm2 = _apriori_sides(sol2, params, dens, gen2, q, rho)
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    ratio2 = lhs2 / rhs2 if rhs2 > 0 else (0.0 if lhs2 == 0 else math.inf)
    if ratio == 0 and ratio2 == 0:
        passed = True
    else:
        passed = bool(math.isfinite(ratio) and ratio > 0 and 0.5 <= ratio2 / ratio <= 2.0)
    scaling = lhs_norm2 / lhs_norm if lhs_norm > 0 else 0.0
    return AprioriReport(params.alpha, params.p, lhs, rhs, ratio, lhs2, rhs2, ratio2, scaling, passed)


def _sample_order(bundle, gen_a, gen_b, n_samples, seed, y_scale):
    rng = np.random.default_rng(seed)
    n, N = bundle.n_paths, bundle.grid.n_steps
    worst = -np.inf
    for _ in range(max(1, n_samples // 64)):
        k = int(rng.integers(0, N))
        sel = rng.integers(0, n, 64)
        x = bundle.state_at(k)[sel]
        s = np.asarray(bundle.sigma_samples[sel, k])
        y = rng.normal(0, y_scale, 64)
        z = rng.normal(0, 1.0, (64, bundle.d))
        diff = gen_a(k * bundle.grid.step_h, x, y, z, s) - gen_b(k * bundle.grid.step_h, x, y, z, s)
        worst = max(worst, float(diff.max()))
    return worst


@dataclass
class ComparisonReport:
    violation: float
    tolerance: float
    std_error: float
    y0_gap: float
    passed: bool

    def to_record(self) -> dict:
        return dict(self.__dict__)


def comparison_statistics(Y: np.ndarray, Yp: np.ndarray, stop: np.ndarray, h: float, L: float,
                          n_se: float = 3.0, lip_factor: float = 2.0) -> ComparisonReport:
    """max over alive (path, step) of (Y - Y')^+ against 3 SE + 2 h L scale."""
    n, N1 = Y.shape
    alive = np.arange(N1)[None, :] <= stop[:, None]
    diff = Y - Yp
    violation = float(np.max(np.where(alive, np.maximum(diff, 0.0), 0.0)))
    se = 0.0
    for k in range(N1):
        a = alive[:, k]
        if a.sum() > 1:
            se = max(se, float(diff[a, k].std(ddof=1) / math.sqrt(a.sum())))
    scale = max(1.0, float(np.max(np.abs(Y))), float(np.max(np.abs(Yp))))
    tol = n_se * se + lip_factor * h * L * scale
    gap = float(np.mean(Yp[:, 0]) - np.mean(Y[:, 0]))
    return ComparisonReport(violation, tol, se, gap, bool(violation <= tol + 1e-12 * scale))


def comparison_check(bundle: PathBundle, first: tuple, second: tuple,
                     basis: RegressionBasis = RegressionBasis(), picard: PicardConfig = PicardConfig(),
                     order_samples: int = 1024, seed: int = 0) -> ComparisonReport:
    """Solve (f, xi) and (f', xi') on common paths and measure (Y - Y')^+."""
    (gen, term), (gen2, term2) = first, second
    xi, xi2 = term.values(bundle), term2.values(bundle)
    if np.any(xi > xi2 + 1e-12 * (1 + np.abs(xi2))):
        raise OrderPreconditionError("terminal values are not ordered (xi <= xi')")
    scale = 1.0 + float(np.max(np.abs(xi)))
    if _sample_order(bundle, gen, gen2, order_samples, seed, scale) > 1e-12 * scale:
        raise OrderPreconditionError("drivers are not ordered (f <= f') at sampled points")
    s1 = solve_bsde(bundle, gen, term, basis, picard)
    s2 = solve_bsde(bundle, gen2, term2, basis, picard)
    L = max(gen.lipschitz_L, gen2.lipschitz_L)
    return comparison_statistics(s1.Y, s2.Y, bundle.stop_index, bundle.grid.step_h, L)


def _driver_along(sol: BackwardSolution, gen: GeneratorSpec, stop: np.ndarray) -> np.ndarray:
    """f_k(Y_k, Z_k) of ``sol`` evaluated with driver ``gen`` for k < stop (0 after)."""
    b = sol.bundle
    n, N, h = b.n_paths, b.grid.n_steps, b.grid.step_h
    out = np.zeros((n, N))
    for k in range(N):
        idx = np.flatnonzero(stop > k)
        if idx.size == 0:
            break
        out[idx, k] = gen(k * h, b.state_at(k)[idx], sol.Y[idx, k], sol.Z[idx, k],
                          np.asarray(b.sigma_samples[idx, k]))
    return out


@dataclass
class StabilityReport:
    dY: float
    dZ: float
    delta_xi: float
    delta_f: float
    ratio: float
    dY0: float
    two_horizon_bound: float | None
    two_horizon_se: float | None
    passed: bool

    def to_record(self) -> dict:
        return dict(self.__dict__)


def stability_check(bundle: PathBundle, first: tuple, second: tuple,
                    basis: RegressionBasis = RegressionBasis(), picard: PicardConfig = PicardConfig(),
                    p: float = 2.0, p_prime: float = 3.0, eta: float = 0.0, eta_prime: float | None = None,
                    controls: DriftControlSet | None = None, second_bundle: PathBundle | None = None,
                    n_se: float = 3.0) -> StabilityReport:
    """Compare ||dY||_D^p with ||dxi||^p_{L^{p'}} + E[(int e^{eta t}|df(Y,Z)| dt)^{p'}]^{p/p'}.

    With ``second_bundle`` (the same paths with different stopping indices,
    e.g. a truncation) the second problem runs on its own horizon and the
    two-horizon bound
        |dY_0| <= sup_Q E^Q[|e^{eta tau} xi - e^{eta tau'} xi'| + int_0^{tau v tau'} e^{eta s}|df_s| ds]
    is evaluated; the check passes when it holds within ``n_se`` standard errors.
    """
    (gen, term), (gen2, term2) = first, second
    if not 1 < p < p_prime:
        raise WindowError(f"need 1 < p < p' (p={p}, p'={p_prime})")
    eta_prime = eta if eta_prime is None else eta_prime
    for g in (gen, gen2):
        NormParams(p, eta).check_window(g)
    b2 = bundle if second_bundle is None else second_bundle
    if b2.n_paths != bundle.n_paths or b2.grid != bundle.grid:
        raise ValueError("both problems must share paths and grid")
    s1 = solve_bsde(bundle, gen, term, basis, picard)
    s2 = solve_bsde(b2, gen2, term2, basis, picard)
    times, h = bundle.times, bundle.grid.step_h
    stop1, stop2 = bundle.stop_index, b2.stop_index
    stop_max = np.maximum(stop1, stop2)
    dens = control_densities(bundle, controls) if controls is not None else None
    prm = NormParams(p, eta)
    dY = norm_D(s1.Y - s2.Y, prm, times, stop_max, dens)
    dZ = norm_H(s1.Z - s2.Z, np.asarray(bundle.sigma_samples), prm, times, stop_max, dens)
    f1 = _driver_along(s1, gen, stop1)
    f2 = _driver_along(s1, gen2, stop2)
    weights_t = np.exp(eta * times[:-1])[None, :]
    df_int = np.sum(weights_t * np.abs(f1 - f2), axis=1) * h
    term_gap = np.abs(np.exp(eta * times[stop1]) * s1.xi - np.exp(eta * times[stop2]) * s2.xi)
    w = [None] if dens is None else [D.at_stop(stop_max) for D in dens]
    delta_xi = max(sup_expectation(np.abs(np.exp(eta_prime * times[stop_max]) * (s1.xi - s2.xi)) ** p_prime,
                                   w).value, 0.0) ** (p / p_prime)
    delta_f = max(sup_expectation(df_int ** p_prime, w).value, 0.0) ** (p / p_prime)
    rhs = delta_xi + delta_f
    lhs = dY.value ** p
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs <= 1e-24 else math.inf)
    dY0 = abs(float(np.mean(s1.Y[:, 0]) - np.mean(s2.Y[:, 0])))
    bound = bound_se = None
    if second_bundle is not None:
        est = sup_expectation(term_gap + df_int, w)
        bound, bound_se = est.value, est.std_error
        se0 = math.hypot(s1.y0_se, s2.y0_se)
        passed = bool(dY0 <= bound + n_se * (bound_se + se0))
    else:
        passed = bool(math.isfinite(ratio))
    return StabilityReport(dY.value, dZ.value, delta_xi, delta_f, ratio, dY0, bound, bound_se, passed)


def horizon_truncation_study(bundle: PathBundle, gen: GeneratorSpec, term: TerminalSpec,
                             ns: Sequence[float], basis: RegressionBasis = RegressionBasis(),
                             picard: PicardConfig = PicardConfig(), reference_n: float | None = None,
                             p: float = 2.0) -> dict:
    """||Y^n - Y^ref||_D for the truncated drivers f^n = f 1{t<=n} - mu y 1{t>n}."""
    ns = list(ns)
    ref_n = ns[-1] if reference_n is None else reference_n
    ref = solve_bsde(bundle, gen.truncated(ref_n), term, basis, picard)
    prm = NormParams(p, 0.0)
    errors = []
    for n_time in ns:
        sol = solve_bsde(bundle, gen.truncated(n_time), term, basis, picard)
        errors.append(norm_D(sol.Y - ref.Y, prm, bundle.times, bundle.stop_index).value)
    return {"n": ns, "reference_n": ref_n, "errors": errors, "y0_reference": ref.y0}


# ---------------------------------------------------------------------------
# Worked example and pathwise inequalities


@dataclass
class DivergenceReport:
    n_list: list
    weighted_moments: list
    growth_factors: list
    xi_norms: list
    cauchy_schwarz_bounds: list
    survival_fraction: float
    passed: bool
    L: float

    def to_record(self) -> dict:
        return dict(self.__dict__)


def hitting_time_divergence(L: float = 1.0, n_list: Sequence[float] = (1, 2, 4), n_paths: int = 20000,
                           step_h: float = 1 / 64, cap: float = 8.0, seed: int = 0,
                           n_controls: int = 5) -> DivergenceReport:
    """Hitting time of level 1 with xi = |X_{1 ^ tau}|.

    (a) E[e^{2 L^2 (tau ^ n)} xi^2] over ``n_list``: grows without plateau.
    (b) sup over tilts of E[D xi^2]^{1/2}: stable in n. The tilts are constant
        on [0, 1] and vanish afterwards (xi is fixed by time 1), each bounded by L.
    """
    from .measures import DensityProcess, PiecewiseConstantControl, girsanov_density
    from .paths import HittingLevel, TimeGrid, VolatilitySpec, simulate_paths, truncate_horizon

    grid = TimeGrid(step_h, int(round(cap / step_h)))
    bundle = simulate_paths(VolatilitySpec.from_constant(1.0), HittingLevel(0, 1.0), grid, n_paths, seed)
    k1 = grid.index_of(1.0)
    idx = np.minimum(bundle.stop_index, k1)
    xi = np.abs(bundle.X[np.arange(n_paths), idx, 0])
    values = np.linspace(-L, L, n_controls) if n_controls > 1 else np.array([0.0])
    controls = [PiecewiseConstantControl((1.0,), (float(v), 0.0)) for v in values]
    moments, norms, bounds = [], [], []
    for n_time in n_list:
        tb = truncate_horizon(bundle, n_time)
        tau_n = tb.stop_times
        moments.append(float(np.mean(np.exp(2 * L * L * tau_n) * xi ** 2)))
        best = -np.inf
        cs = -np.inf
        for c in controls:
            D: DensityProcess = girsanov_density(tb, c, L)
            Dn = D.at_stop(tb.stop_index)
            best = max(best, float(np.mean(Dn * xi ** 2)))
            cs = max(cs, float(np.sqrt(np.mean(Dn ** 2)) * np.sqrt(np.mean(xi ** 4))))
        norms.append(math.sqrt(best))
        bounds.append(cs)
    growth = [moments[i + 1] / moments[i] for i in range(len(moments) - 1)]
    spread = (max(norms) - min(norms)) / min(norms) if min(norms) > 0 else math.inf
    passed = bool(all(g >= 2.0 for g in growth) and spread < 0.2)
    return DivergenceReport(list(n_list), moments, growth, norms, bounds,
                            bundle.alive_at_cap_fraction, passed, L)


@dataclass
class TanakaReport:
    min_gap: float
    slack: float
    violation_fraction: float
    max_gap: float
    passed: bool

    def to_record(self) -> dict:
        return dict(self.__dict__)


def tanaka_check(X: np.ndarray, slack: float | None = None) -> TanakaReport:
    """|X_k| - |X_0| >= sum_{j<k} sgn(X_j)(X_{j+1} - X_j) at every grid time.

    ``slack`` defaults to a rounding allowance of 1e-12 times the path scale;
    on a grid the inequality holds exactly by the triangle inequality.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 3:
        X = X[:, :, 0]
    if X.ndim == 1:
        X = X[None, :]
    lhs = np.abs(X) - np.abs(X[:, :1])
    rhs = np.zeros_like(X)
    rhs[:, 1:] = np.cumsum(np.sign(X[:, :-1]) * np.diff(X, axis=1), axis=1)
    gap = lhs - rhs
    if slack is None:
        slack = 1e-12 * max(1.0, float(np.abs(X).max(initial=0.0))) * X.shape[1]
    viol = gap < -slack
    return TanakaReport(float(gap.min()), float(slack), float(viol.mean()), float(gap.max()),
                        bool(not viol.any()))
