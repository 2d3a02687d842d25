"""Girsanov drift tilts, nonlinear expectations and volatility families."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .paths import PathBundle, SimConfig, VolatilitySpec


class ControlBoundError(ValueError):
    pass


class DriftControl:
    """A policy ``(t, state[n, d]) -> lambda[n, m]``."""

    name = "control"

    def __call__(self, t: float, state: np.ndarray, m: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantControl(DriftControl):
    value: tuple

    def __init__(self, value):
        object.__setattr__(self, "value", tuple(np.atleast_1d(np.asarray(value, dtype=float)).tolist()))

    @property
    def name(self):
        return "const(" + ",".join(f"{v:g}" for v in self.value) + ")"

    def __call__(self, t, state, m):
        v = np.asarray(self.value)
        if v.size == 1 and m > 1:
            v = np.full(m, v[0])
        return np.broadcast_to(v, (state.shape[0], m))


@dataclass(frozen=True)
class PiecewiseConstantControl(DriftControl):
    """Value ``values[i]`` on ``[breaks[i-1], breaks[i])``, last value after the last break."""

    breaks: tuple
    values: tuple

    def __post_init__(self):
        if len(self.values) != len(self.breaks) + 1:
            raise ValueError("need len(values) == len(breaks) + 1")

    @property
    def name(self):
        return "pc(" + ";".join(f"{v}" for v in self.values) + ")"

    def __call__(self, t, state, m):
        i = int(np.searchsorted(np.asarray(self.breaks), t, side="right"))
        v = np.atleast_1d(np.asarray(self.values[i], dtype=float))
        if v.size == 1 and m > 1:
            v = np.full(m, v[0])
        return np.broadcast_to(v, (state.shape[0], m))


@dataclass(frozen=True)
class FeedbackControl(DriftControl):
    """Bang-bang feedback ``lambda = L * sign(target(t, state))`` per component."""

    target: Callable
    bound: float
    label: str = "bang_bang"

    @property
    def name(self):
        return self.label

    def __call__(self, t, state, m):
        val = np.asarray(self.target(t, state), dtype=float)
        val = np.broadcast_to(val.reshape(state.shape[0], -1), (state.shape[0], m))
        return self.bound * np.sign(val)


@dataclass
class DriftControlSet:
    """Finite approximation of the tilt family Q_L; the zero control is always included."""

    bound_L: float
    controls: list = field(default_factory=list)

    def __post_init__(self):
        if self.bound_L < 0:
            raise ValueError("bound_L must be nonnegative")
        self.controls = list(self.controls)
        if not any(isinstance(c, ConstantControl) and not any(c.value) for c in self.controls):
            self.controls.insert(0, ConstantControl(0.0))

    @classmethod
    def constants(cls, bound_L: float, values: Sequence) -> "DriftControlSet":
        return cls(bound_L, [ConstantControl(v) for v in values])

    @classmethod
    def zero(cls) -> "DriftControlSet":
        return cls(0.0, [])

    def __len__(self):
        return len(self.controls)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.controls]


@dataclass(frozen=True)
class DensityProcess:
    D: np.ndarray  # [n, N+1]

    def at_stop(self, stop_index: np.ndarray) -> np.ndarray:
        return self.D[np.arange(self.D.shape[0]), stop_index]


def girsanov_density(bundle: PathBundle, policy: DriftControl, bound: float | None = None) -> DensityProcess:
    """D_{k+1} = D_k exp(lambda_k . dW_k - |lambda_k|^2 h / 2), frozen after the stop."""
    n, N1, m = bundle.W.shape
    h = bundle.grid.step_h
    logD = np.zeros((n, N1))
    for k in range(N1 - 1):
        lam = np.asarray(policy(k * h, bundle.state_at(k), m), dtype=float)
        if bound is not None:
            norms = np.linalg.norm(lam, axis=1)
            if norms.size and norms.max() > bound * (1 + 1e-12):
                raise ControlBoundError(f"|lambda|={norms.max():.6g} exceeds bound L={bound:.6g}")
        alive = bundle.stop_index > k
        dW = bundle.W[:, k + 1] - bundle.W[:, k]
        inc = np.einsum("ij,ij->i", lam, dW) - 0.5 * np.einsum("ij,ij->i", lam, lam) * h
        logD[:, k + 1] = logD[:, k] + np.where(alive, inc, 0.0)
    return DensityProcess(np.exp(logD))


def control_densities(bundle: PathBundle, controls: DriftControlSet) -> list[DensityProcess]:
    return [girsanov_density(bundle, c, controls.bound_L) for c in controls.controls]


@dataclass(frozen=True)
class NonlinearExpectation:
    value: float
    argmax: int
    std_error: float
    per_candidate: tuple
    names: tuple = ()

    def __float__(self):
        return float(self.value)


def _weighted_mean(values: np.ndarray, weights: np.ndarray | None) -> tuple[float, float]:
    w = values if weights is None else weights * values
    n = w.shape[0]
    se = float(w.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(w.mean()), se


def sup_expectation(values: np.ndarray, weights: Sequence[np.ndarray | None],
                    names: Sequence[str] = ()) -> NonlinearExpectation:
    """max_j of the sample mean of weights[j] * values."""
    if len(weights) == 0:
        raise ValueError("empty control set")
    stats = [_weighted_mean(values, w) for w in weights]
    means = np.array([s[0] for s in stats])
    j = int(np.argmax(means))
    return NonlinearExpectation(float(means[j]), j, stats[j][1], tuple(means.tolist()), tuple(names))


def dominated_expectation(bundle: PathBundle, payoff: np.ndarray, controls: DriftControlSet,
                          densities: Sequence[DensityProcess] | None = None) -> NonlinearExpectation:
    """sup over the finite tilt set of E^Q[payoff], each payoff read at the stop."""
    if len(controls) == 0:
        raise ValueError("empty control set")
    payoff = np.asarray(payoff, dtype=float)
    if not np.all(np.isfinite(payoff)):
        raise ValueError("payoff must be finite on every path")
    if densities is None:
        densities = control_densities(bundle, controls)
    weights = [D.at_stop(bundle.stop_index) for D in densities]
    return sup_expectation(payoff, weights, controls.names)


# ---------------------------------------------------------------------------
# Non-dominated layer


@dataclass
class MeasureFamily:
    members: list
    generator_finiteness_check: bool = False

    def __post_init__(self):
        self.members = list(self.members)
        if not self.members:
            raise ValueError("measure family must be nonempty")

    @classmethod
    def constant_volatilities(cls, sigmas: Sequence) -> "MeasureFamily":
        return cls([VolatilitySpec.from_constant(s) for s in sigmas])

    @property
    def labels(self) -> list[str]:
        return [m.label or f"member{i}" for i, m in enumerate(self.members)]

    def screened(self, f0: Callable, sim_config: SimConfig) -> tuple["MeasureFamily", list[int]]:
        """Drop members along whose simulated paths ``f0(t, state, sigma)`` is not finite."""
        keep, rejected = [], []
        for i, spec in enumerate(self.members):
            bundle = sim_config.simulate(spec, i)
            ok = True
            for k in range(bundle.grid.n_steps):
                alive = bundle.alive_mask(k)
                if not alive.any():
                    break
                vals = np.asarray(f0(k * bundle.grid.step_h, bundle.state_at(k)[alive],
                                     bundle.sigma_samples[alive, k]))
                if not np.all(np.isfinite(vals)):
                    ok = False
                    break
            (keep if ok else rejected).append(i)
        if not keep:
            raise ValueError("every family member violates the finiteness screen")
        return MeasureFamily([self.members[i] for i in keep], True), rejected


@dataclass(frozen=True)
class FamilyExpectation:
    value: float
    argmax_member: int
    std_error: float
    per_member: tuple
    per_member_control: tuple


def family_expectation(family: MeasureFamily, payoff_fn: Callable[[PathBundle], np.ndarray],
                       controls: DriftControlSet, sim_config: SimConfig) -> FamilyExpectation:
    """sup over members of the dominated expectation, one bundle per member."""
    results = []
    for i, spec in enumerate(family.members):
        bundle = sim_config.simulate(spec, i)
        results.append(dominated_expectation(bundle, payoff_fn(bundle), controls))
    vals = np.array([r.value for r in results])
    j = int(np.argmax(vals))
    return FamilyExpectation(float(vals[j]), j, results[j].std_error, tuple(vals.tolist()),
                             tuple(r.argmax for r in results))
