"""Forward simulation of the canonical pair (X, W) with stopping times.

X is driven by dX = sigma(t, X) dW, starts at the origin, and is frozen after
its stopping index. Stopping rules act on the *state* ``X + initial_offset``.
Randomness is drawn per fixed-size block of paths from counter-based Philox
streams keyed by ``(seed, block)``, so results do not depend on how the work
is sharded across threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

BLOCK_SIZE = 4096
_STREAM_BROWNIAN = 0


@dataclass(frozen=True)
class TimeGrid:
    step_h: float
    n_steps: int

    def __post_init__(self):
        if not (self.step_h > 0 and math.isfinite(self.step_h)):
            raise ValueError(f"step_h must be positive and finite, got {self.step_h}")
        if int(self.n_steps) < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_horizon(cls, horizon: float, n_steps: int) -> "TimeGrid":
        return cls(horizon / n_steps, n_steps)

    @property
    def horizon_cap(self) -> float:
        return self.n_steps * self.step_h

    @property
    def times(self) -> np.ndarray:
        return self.step_h * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of time ``t`` (rounded to the nearest grid point)."""
        k = int(round(t / self.step_h))
        if abs(k * self.step_h - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the grid (h={self.step_h})")
        return k


@dataclass(frozen=True)
class VolatilitySpec:
    """Volatility map ``(t, x[n, d]) -> [n, d, m]`` (or a broadcastable array).

    ``constant`` marks a state-independent matrix, which lets bundles store the
    per-step samples as a broadcast view instead of a full array.
    """

    sigma_fn: Callable[[float, np.ndarray], np.ndarray]
    sigma_bound: float
    d: int = 1
    m: int = 1
    constant: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        if self.d > self.m:
            raise ValueError(f"need d <= m, got d={self.d}, m={self.m}")
        if not (self.sigma_bound >= 0 and math.isfinite(self.sigma_bound)):
            raise ValueError(f"sigma_bound must be finite and nonnegative, got {self.sigma_bound}")

    @classmethod
    def from_constant(cls, sigma, label: str | None = None) -> "VolatilitySpec":
        mat = np.atleast_2d(np.asarray(sigma, dtype=float))
        d, m = mat.shape
        bound = float(np.linalg.norm(mat, 2))
        mat.setflags(write=False)
        return cls(
            sigma_fn=lambda t, x, _m=mat: _m,
            sigma_bound=bound,
            d=d,
            m=m,
            constant=mat,
            label=label if label is not None else f"sigma={_fmt_matrix(mat)}",
        )

    def evaluate(self, t: float, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        out = np.broadcast_to(np.asarray(self.sigma_fn(t, x), dtype=float), (n, self.d, self.m))
        norms = np.linalg.norm(out, ord=2, axis=(1, 2)) if n else np.zeros(0)
        if n and norms.max() > self.sigma_bound * (1 + 1e-12) + 1e-300:
            raise ValueError(
                f"volatility bound violated: |sigma|={norms.max():.6g} > {self.sigma_bound:.6g}"
            )
        return out


def _fmt_matrix(mat: np.ndarray) -> str:
    if mat.size == 1:
        return f"{mat.item():g}"
    return np.array2string(mat, separator=",").replace("\n", "")


# ---------------------------------------------------------------------------
# Stopping rules


class StoppingRule:
    """Nonanticipative stopping rule evaluated on the state at grid times."""

    def fires(self, grid: TimeGrid, k: int, state: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def validate(self, d: int) -> None:
        pass

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Deterministic(StoppingRule):
    T: float

    def fires(self, grid, k, state):
        hit = k * grid.step_h >= self.T - 1e-9 * max(1.0, self.T)
        return np.full(state.shape[0], hit)

    def validate(self, d):
        if not self.T >= 0:
            raise ValueError(f"deterministic horizon must be >= 0, got {self.T}")

    def to_dict(self):
        return {"kind": "deterministic", "T": self.T}


@dataclass(frozen=True)
class ExitOfBox(StoppingRule):
    """First time the state leaves the open box ``(lower, upper)``."""

    lower: tuple
    upper: tuple

    def __init__(self, lower, upper):
        object.__setattr__(self, "lower", tuple(float(v) for v in np.atleast_1d(lower)))
        object.__setattr__(self, "upper", tuple(float(v) for v in np.atleast_1d(upper)))

    def fires(self, grid, k, state):
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return np.any((state <= lo) | (state >= hi), axis=1)

    def validate(self, d):
        if len(self.lower) != d or len(self.upper) != d:
            raise ValueError(f"box dimension {len(self.lower)} does not match state dimension {d}")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("box must satisfy lower < upper componentwise")

    def to_dict(self):
        return {"kind": "exit_of_box", "lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class HittingLevel(StoppingRule):
    """First time ``state[component] >= level``."""

    component: int
    level: float

    def fires(self, grid, k, state):
        return state[:, self.component] >= self.level

    def validate(self, d):
        if not 0 <= self.component < d:
            raise ValueError(f"component {self.component} out of range for state dimension {d}")

    def to_dict(self):
        return {"kind": "hitting_level", "component": self.component, "level": self.level}


@dataclass(frozen=True)
class MinOf(StoppingRule):
    rules: tuple

    def __init__(self, rules: Sequence[StoppingRule]):
        if not rules:
            raise ValueError("min_of needs at least one rule")
        object.__setattr__(self, "rules", tuple(rules))

    def fires(self, grid, k, state):
        out = np.zeros(state.shape[0], dtype=bool)
        for rule in self.rules:
            out |= rule.fires(grid, k, state)
        return out

    def validate(self, d):
        for rule in self.rules:
            rule.validate(d)

    def to_dict(self):
        return {"kind": "min_of", "rules": [r.to_dict() for r in self.rules]}


def rule_from_dict(spec: dict) -> StoppingRule:
    kind = spec["kind"]
    if kind == "deterministic":
        return Deterministic(float(spec["T"]))
    if kind == "exit_of_box":
        return ExitOfBox(spec["lower"], spec["upper"])
    if kind == "hitting_level":
        return HittingLevel(int(spec.get("component", 0)), float(spec["level"]))
    if kind == "min_of":
        return MinOf([rule_from_dict(r) for r in spec["rules"]])
    raise ValueError(f"unknown stopping rule kind {kind!r}")


# ---------------------------------------------------------------------------
# Bundles


@dataclass(frozen=True)
class PathBundle:
    grid: TimeGrid
    X: np.ndarray  # [n, N+1, d], starts at 0
    W: np.ndarray  # [n, N+1, m], starts at 0
    stop_index: np.ndarray  # [n]
    sigma_samples: np.ndarray  # [n, N, d, m] (possibly a broadcast view)
    seed: int
    initial_offset: np.ndarray = field(default_factory=lambda: np.zeros(1))
    censored: np.ndarray | None = None  # rule had not fired when the cap was reached
    label: str = ""

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[2]

    @property
    def m(self) -> int:
        return self.W.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def state_at(self, k: int) -> np.ndarray:
        return self.X[:, k, :] + self.initial_offset

    @property
    def state(self) -> np.ndarray:
        return self.X + self.initial_offset

    def stopped_state(self) -> np.ndarray:
        idx = np.arange(self.n_paths)
        return self.X[idx, self.stop_index, :] + self.initial_offset

    @property
    def stop_times(self) -> np.ndarray:
        return self.stop_index * self.grid.step_h

    @property
    def alive_at_cap_fraction(self) -> float:
        if self.censored is None:
            return 0.0
        return float(np.mean(self.censored))

    def is_constant_sigma(self) -> bool:
        s = self.sigma_samples.strides
        return s[0] == 0 and s[1] == 0

    def alive_mask(self, k: int) -> np.ndarray:
        return self.stop_index > k


def _block_normals(seed: int, block: int, count: int, n_steps: int, m: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=int(seed) % 2**64, spawn_key=(_STREAM_BROWNIAN, block))
    gen = np.random.Generator(np.random.Philox(ss))
    return gen.standard_normal((count, n_steps, m))


def brownian_increments(seed: int, n_paths: int, n_steps: int, m: int, step_h: float,
                        threads: int | None = None) -> np.ndarray:
    """Increments ``dW`` of shape [n_paths, n_steps, m], shard-count independent."""
    n_blocks = -(-n_paths // BLOCK_SIZE)
    out = np.empty((n_paths, n_steps, m))
    scale = math.sqrt(step_h)

    def fill(b):
        lo = b * BLOCK_SIZE
        hi = min(n_paths, lo + BLOCK_SIZE)
        out[lo:hi] = _block_normals(seed, b, hi - lo, n_steps, m) * scale

    threads = _resolve_threads(threads)
    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fill, range(n_blocks)))
    else:
        for b in range(n_blocks):
            fill(b)
    return out


def _resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("RHBSDE_THREADS", "1"))
    return max(1, int(threads))


def simulate_paths(spec: VolatilitySpec, rule: StoppingRule, grid: TimeGrid, n_paths: int,
                   seed: int, initial_offset=None, threads: int | None = None) -> PathBundle:
    """Euler-Maruyama simulation of X = int sigma dW with per-path stopping.

    The stopping index is the first grid index at which ``rule`` fires on the
    state, capped at ``grid.n_steps``. Increments are zeroed once a path has
    stopped, so X and W are constant afterwards.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    d, m = spec.d, spec.m
    rule.validate(d)
    offset = np.zeros(d) if initial_offset is None else np.asarray(initial_offset, dtype=float).reshape(d)
    N, h = grid.n_steps, grid.step_h

    dW = brownian_increments(seed, n_paths, N, m, h, threads)
    X = np.zeros((n_paths, N + 1, d))
    W = np.zeros((n_paths, N + 1, m))
    stop = np.full(n_paths, N, dtype=np.int64)
    alive = np.ones(n_paths, dtype=bool)
    if spec.constant is not None:
        spec.evaluate(0.0, offset[None, :])  # bound check once
        sig_samples = np.broadcast_to(spec.constant, (n_paths, N, d, m))
    else:
        sig_samples = np.zeros((n_paths, N, d, m))

    x = np.tile(offset, (n_paths, 1))
    fired = rule.fires(grid, 0, x)
    stop[fired] = 0
    alive &= ~fired
    for k in range(N):
        if spec.constant is None:
            sig = spec.evaluate(k * h, x)
            sig_samples[:, k] = sig
        else:
            sig = spec.constant[None]
        inc = dW[:, k, :] * alive[:, None]
        dx = np.einsum("nij,nj->ni", np.broadcast_to(sig, (n_paths, d, m)), inc)
        x = x + dx
        X[:, k + 1] = X[:, k] + dx
        W[:, k + 1] = W[:, k] + inc
        if k + 1 <= N:
            fired = alive & rule.fires(grid, k + 1, x)
            stop[fired] = k + 1
            alive &= ~fired
    if spec.constant is None:
        # increments after the stop were zeroed; record zero volatility there too
        after = np.arange(N)[None, :] >= stop[:, None]
        sig_samples[after] = 0.0
    censored = alive.copy()
    for arr in (X, W, stop, censored):
        arr.setflags(write=False)
    return PathBundle(grid=grid, X=X, W=W, stop_index=stop, sigma_samples=sig_samples,
                      seed=int(seed), initial_offset=offset, censored=censored,
                      label=spec.label)


def truncate_horizon(bundle: PathBundle, n: float) -> PathBundle:
    """Cap every stopping index at the grid index of time ``n`` (tau ^ n)."""
    grid = bundle.grid
    if n < 0:
        raise ValueError(f"truncation time must be nonnegative, got {n}")
    k = int(math.floor(n / grid.step_h + 1e-9))
    if k > grid.n_steps:
        raise ValueError(f"truncation time {n} beyond horizon cap {grid.horizon_cap}")
    new_stop = np.minimum(bundle.stop_index, k)
    if np.array_equal(new_stop, bundle.stop_index):
        return bundle
    idx = np.minimum(np.arange(grid.n_steps + 1)[None, :], new_stop[:, None])
    X = np.take_along_axis(bundle.X, idx[:, :, None], axis=1)
    W = np.take_along_axis(bundle.W, idx[:, :, None], axis=1)
    censored = None if bundle.censored is None else bundle.censored & (bundle.stop_index <= k)
    for arr in (X, W, new_stop):
        arr.setflags(write=False)
    return replace(bundle, X=X, W=W, stop_index=new_stop, censored=censored)


# ---------------------------------------------------------------------------
# Quadratic-variation densities


@dataclass(frozen=True)
class QvDensity:
    a_hat: np.ndarray  # [n, N, d, d]
    a_hat_pinv: np.ndarray  # [n, N, d, d]
    eig_cutoff: float | None


def _spectral_pinv(a: np.ndarray, eig_cutoff: float | None) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    if eig_cutoff is None:
        cut = 1e-10 * np.max(w, axis=-1, keepdims=True)
    else:
        cut = eig_cutoff
    keep = (w > cut) & (w > 0)
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return np.einsum("...ij,...j,...kj->...ik", v, inv, v)


def quadratic_variation_density(bundle: PathBundle, eig_cutoff: float | None = None) -> QvDensity:
    """a_hat = sigma sigma^T per (path, step) and its spectral generalized inverse.

    ``eig_cutoff=None`` uses a relative cutoff of 1e-10 times the largest
    eigenvalue of each matrix; eigenvalues at or below the cutoff invert to 0.
    """
    sig = bundle.sigma_samples
    n, N = sig.shape[:2]
    d = sig.shape[2]
    if bundle.is_constant_sigma():
        s0 = np.asarray(sig[0, 0])
        a = s0 @ s0.T
        a_inv = _spectral_pinv(a, eig_cutoff)
        return QvDensity(np.broadcast_to(a, (n, N, d, d)), np.broadcast_to(a_inv, (n, N, d, d)), eig_cutoff)
    a = np.einsum("...ij,...kj->...ik", sig, sig)
    return QvDensity(a, _spectral_pinv(a, eig_cutoff), eig_cutoff)


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings shared by every member of a measure family."""

    grid: TimeGrid
    rule: StoppingRule
    n_paths: int
    seed: int
    initial_offset: tuple | None = None
    common_random_numbers: bool = True
    threads: int | None = None

    def member_seed(self, index: int) -> int:
        if self.common_random_numbers:
            return int(self.seed)
        ss = np.random.SeedSequence(entropy=int(self.seed) % 2**64, spawn_key=(1, int(index)))
        return int(ss.generate_state(1, dtype=np.uint64)[0])

    def simulate(self, spec: VolatilitySpec, index: int = 0) -> PathBundle:
        return simulate_paths(spec, self.rule, self.grid, self.n_paths, self.member_seed(index),
                              initial_offset=self.initial_offset, threads=self.threads)
