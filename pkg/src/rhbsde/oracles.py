"""Deterministic reference solvers.

Finite differences for semilinear parabolic and elliptic exit problems, a
monotone explicit scheme for the G-heat equation, a binomial tree for
American options and closed forms for linear drivers. Nothing here shares
numerical code with the Monte Carlo solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_banded


class CflError(ValueError):
    pass


class NewtonStagnation(RuntimeError):
    pass


class OraclePicardDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class FdProblem:
    """One-dimensional finite-difference problem.

    kind: parabolic_semilinear, elliptic_exit or g_heat.
    ``terminal`` is g(x) for time-dependent problems; ``boundary`` gives the
    Dirichlet data (t, x) -> v (elliptic problems use (lower, upper) values).
    ``f`` is the nonlinearity f(t, x, v, sigma v_x).
    """

    kind: str
    lower: float
    upper: float
    nx: int
    nt: int = 0
    horizon: float = 1.0
    sigma: float | tuple = 1.0
    terminal: Callable | None = None
    boundary: Callable | tuple | None = None
    f: Callable | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("parabolic_semilinear", "elliptic_exit", "g_heat"):
            raise ValueError(f"unknown FD problem kind {self.kind!r}")
        if not self.upper > self.lower:
            raise ValueError("empty domain")
        if self.nx < 3:
            raise ValueError("need at least 3 mesh intervals")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.nx + 1)

    @property
    def dx(self) -> float:
        return (self.upper - self.lower) / self.nx


@dataclass
class FdSolution:
    x: np.ndarray
    t: np.ndarray | None
    v: np.ndarray  # [nt+1, nx+1] (time-dependent) or [nx+1]
    residual: float
    iterations: int = 0

    def at(self, x0: float, t_index: int = 0) -> float:
        row = self.v if self.v.ndim == 1 else self.v[t_index]
        return float(np.interp(x0, self.x, row))


def _f_or_zero(f):
    return f if f is not None else (lambda t, x, v, p: np.zeros_like(v))


def _boundary_values(problem: FdProblem, t: float, x: np.ndarray) -> tuple[float, float]:
    if problem.boundary is None:
        g = problem.terminal
        return float(g(np.array([x[0]]))[0]), float(g(np.array([x[-1]]))[0])
    return float(problem.boundary(t, x[0])), float(problem.boundary(t, x[-1]))


def solve_parabolic(problem: FdProblem, theta: float = 0.5, picard_tol: float = 1e-13,
                    max_picard: int = 200, residual_tol: float = 1e-8) -> FdSolution:
    """Crank-Nicolson for -v_t = 1/2 sigma^2 v_xx + f(t, x, v, sigma v_x), v(T) = g.

    The nonlinearity is treated by fixed-point iteration inside each time step
    until the discrete step equation holds to ``residual_tol``.
    """
    if problem.kind != "parabolic_semilinear":
        raise ValueError("solve_parabolic needs a parabolic_semilinear problem")
    if problem.nt < 1:
        raise ValueError("nt must be positive")
    sigma = float(problem.sigma)
    x = problem.x
    dx = problem.dx
    dt = problem.horizon / problem.nt
    f = _f_or_zero(problem.f)
    nI = len(x) - 2
    c = 0.5 * sigma * sigma / dx ** 2

    def apply_A(v):
        return c * (v[2:] - 2 * v[1:-1] + v[:-2])

    def grad(v):
        return sigma * (v[2:] - v[:-2]) / (2 * dx)

    ab = np.zeros((3, nI))
    ab[0, 1:] = -theta * dt * c
    ab[1, :] = 1 + 2 * theta * dt * c
    ab[2, :-1] = -theta * dt * c

    t_grid = np.linspace(0.0, problem.horizon, problem.nt + 1)
    V = np.zeros((problem.nt + 1, len(x)))
    V[-1] = problem.terminal(x)
    worst = 0.0
    total_iters = 0
    for j in range(problem.nt - 1, -1, -1):
        t_new, t_old = t_grid[j], t_grid[j + 1]
        v_old = V[j + 1]
        lo, hi = _boundary_values(problem, t_new, x)
        f_old = f(t_old, x[1:-1], v_old[1:-1], grad(v_old))
        rhs_const = v_old[1:-1] + (1 - theta) * dt * (apply_A(v_old) + f_old)
        v_new = v_old.copy()
        v_new[0], v_new[-1] = lo, hi
        for it in range(max_picard):
            f_new = f(t_new, x[1:-1], v_new[1:-1], grad(v_new))
            rhs = rhs_const + theta * dt * f_new
            rhs[0] += theta * dt * c * lo
            rhs[-1] += theta * dt * c * hi
            inner = solve_banded((1, 1), ab, rhs)
            change = float(np.max(np.abs(inner - v_new[1:-1])))
            v_new[1:-1] = inner
            total_iters += 1
            if change < picard_tol * (1 + float(np.max(np.abs(inner)))):
                break
        else:
            raise OraclePicardDivergence(f"fixed point did not settle at step {j} (change {change:.3g})")
        res = (v_new[1:-1] - v_old[1:-1]) / dt - theta * (apply_A(v_new) + f(t_new, x[1:-1], v_new[1:-1], grad(v_new))) \
            - (1 - theta) * (apply_A(v_old) + f_old)
        worst = max(worst, float(np.max(np.abs(res))) * dt)
        V[j] = v_new
    if worst > residual_tol:
        raise OraclePicardDivergence(f"discrete residual {worst:.3g} above {residual_tol:g}")
    return FdSolution(x, t_grid, V, worst, total_iters)


def solve_elliptic_exit(problem: FdProblem, tol: float = 1e-10, max_iters: int = 100) -> FdSolution:
    """-1/2 sigma^2 v'' = f(x, v, sigma v') on [lower, upper], Dirichlet data, damped Newton."""
    if problem.kind != "elliptic_exit":
        raise ValueError("solve_elliptic_exit needs an elliptic_exit problem")
    sigma = float(problem.sigma)
    x = problem.x
    dx = problem.dx
    bl, br = problem.boundary if problem.boundary is not None else (0.0, 0.0)
    fx = problem.f if problem.f is not None else (lambda x, v, p: np.zeros_like(v))
    c = 0.5 * sigma * sigma / dx ** 2
    xi = x[1:-1]
    v = np.linspace(bl, br, len(x))

    def residual(v):
        p = sigma * (v[2:] - v[:-2]) / (2 * dx)
        return -c * (v[2:] - 2 * v[1:-1] + v[:-2]) - fx(xi, v[1:-1], p)

    R = residual(v)
    it = 0
    for it in range(1, max_iters + 1):
        if float(np.max(np.abs(R))) <= tol:
            break
        p = sigma * (v[2:] - v[:-2]) / (2 * dx)
        dv = 1e-7 * (1 + np.abs(v[1:-1]))
        dp = 1e-7 * (1 + np.abs(p))
        fv = (fx(xi, v[1:-1] + dv, p) - fx(xi, v[1:-1] - dv, p)) / (2 * dv)
        fp = (fx(xi, v[1:-1], p + dp) - fx(xi, v[1:-1], p - dp)) / (2 * dp)
        g = sigma / (2 * dx)
        ab = np.zeros((3, len(xi)))
        ab[1] = 2 * c - fv
        ab[0, 1:] = (-c - fp * g)[:-1]
        ab[2, :-1] = (-c + fp * g)[1:]
        step = solve_banded((1, 1), ab, -R)
        lam = 1.0
        base = float(np.max(np.abs(R)))
        while lam > 1e-6:
            trial = v.copy()
            trial[1:-1] += lam * step
            Rt = residual(trial)
            if float(np.max(np.abs(Rt))) < base or float(np.max(np.abs(Rt))) <= tol:
                v, R = trial, Rt
                break
            lam *= 0.5
        else:
            raise NewtonStagnation(f"line search failed at residual {base:.3g}")
    final = float(np.max(np.abs(R))) if len(R) else 0.0
    if final > tol:
        raise NewtonStagnation(f"residual {final:.3g} after {it} iterations")
    return FdSolution(x, None, v, final, it)


def solve_g_heat(problem: FdProblem, cfl: float = 0.9, edge: str = "linear") -> FdSolution:
    """Explicit monotone scheme for -v_t = max_sigma {1/2 sigma^2 v_xx + F(t, x, v, sigma v_x)}.

    The time step is dt = cfl * dx^2 / sigma_max^2 (rounded so it divides the
    horizon); a requested ``problem.nt`` that violates the restriction raises.
    ``edge`` is ``linear`` (v_xx = 0 at the ends) or ``terminal`` (g frozen).
    """
    if problem.kind != "g_heat":
        raise ValueError("solve_g_heat needs a g_heat problem")
    menu = np.atleast_1d(np.asarray(problem.sigma, dtype=float))
    if menu.size == 0:
        raise ValueError("empty volatility menu")
    x = problem.x
    dx = problem.dx
    smax = float(np.max(np.abs(menu)))
    limit = dx * dx / smax ** 2 if smax > 0 else math.inf
    if problem.nt > 0:
        dt = problem.horizon / problem.nt
        if dt > limit * (1 + 1e-12):
            raise CflError(f"dt={dt:.3g} exceeds the monotone limit dx^2/sigma_max^2={limit:.3g}")
        nt = problem.nt
    else:
        nt = max(1, int(math.ceil(problem.horizon / (cfl * limit)))) if math.isfinite(limit) else 1
        dt = problem.horizon / nt
    F = problem.f
    v = problem.terminal(x).astype(float)
    g_edges = v[[0, -1]].copy()
    for j in range(nt - 1, -1, -1):
        t = j * dt
        d2 = (v[2:] - 2 * v[1:-1] + v[:-2]) / dx ** 2
        d1 = (v[2:] - v[:-2]) / (2 * dx)
        best = np.full(len(x) - 2, -np.inf)
        for s in menu:
            cand = 0.5 * s * s * d2
            if F is not None:
                cand = cand + F(t, x[1:-1], v[1:-1], s * d1)
            best = np.maximum(best, cand)
        new = v.copy()
        new[1:-1] = v[1:-1] + dt * best
        if edge == "linear":
            new[0] = 2 * new[1] - new[2]
            new[-1] = 2 * new[-2] - new[-3]
        else:
            new[0], new[-1] = g_edges
        v = new
    return FdSolution(x, np.array([0.0, problem.horizon]), np.stack([v, problem.terminal(x)]), 0.0, nt)


def g_heat_value(menu: Sequence[float], terminal: Callable, x0: float = 0.0, horizon: float = 1.0,
                 half_width: float = 8.0, dx: float = 0.02, F: Callable | None = None) -> float:
    """Convenience wrapper: v(0, x0) of the G-heat equation on a fine mesh."""
    nx = int(round(2 * half_width / dx))
    prob = FdProblem("g_heat", x0 - half_width, x0 + half_width, nx, horizon=horizon,
                     sigma=tuple(menu), terminal=terminal, f=F)
    return solve_g_heat(prob).at(x0)


def binomial_american(strike: float, vol_model: str = "additive", sigma: float = 0.2, x0: float = 1.0,
                      horizon: float = 1.0, steps: int = 1000, rate: float = 0.0, kind: str = "put",
                      american: bool = True) -> float:
    """Recombining tree for a martingale underlying; ``rate`` only discounts.

    additive: X moves by +- sigma sqrt(dt) with probability 1/2.
    geometric: X moves by factors u = e^{sigma sqrt(dt)}, 1/u with the martingale probability.
    """
    if steps < 100:
        raise ValueError("use at least 100 tree steps")
    dt = horizon / steps
    j = np.arange(steps + 1)
    if vol_model == "additive":
        step = sigma * math.sqrt(dt)
        xs = x0 + step * (2 * j - steps)
        p = 0.5
    elif vol_model == "geometric":
        u = math.exp(sigma * math.sqrt(dt))
        d = 1 / u
        xs = x0 * u ** (2 * j - steps)
        p = (1 - d) / (u - d) if sigma > 0 else 0.5
    else:
        raise ValueError(f"unknown vol_model {vol_model!r}")

    def payoff(x):
        return np.maximum(strike - x, 0.0) if kind == "put" else np.maximum(x - strike, 0.0)

    disc = math.exp(-rate * dt)
    v = payoff(xs)
    for n in range(steps - 1, -1, -1):
        jj = np.arange(n + 1)
        if vol_model == "additive":
            xn = x0 + step * (2 * jj - n)
        else:
            xn = x0 * u ** (2 * jj - n)
        cont = disc * (p * v[1:] + (1 - p) * v[:-1])
        v = np.maximum(payoff(xn), cont) if american else cont
    return float(v[0])


def linear_bsde_closed_form(mu: float, horizon: float, xi_const: float) -> float:
    """Y_0 for the driver -mu y with constant terminal value at a fixed horizon."""
    return math.exp(-mu * horizon) * xi_const


def heat_moment(x: float, sigma: float, remaining: float) -> float:
    """E[(x + sigma W_s)^2] = x^2 + sigma^2 s."""
    return x * x + sigma * sigma * remaining


def exit_time_mean(x: float, lower: float, upper: float, sigma: float = 1.0) -> float:
    """E[tau] for sigma W started at x leaving (lower, upper)."""
    return (x - lower) * (upper - x) / (sigma * sigma)
