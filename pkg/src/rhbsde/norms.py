"""Exponentially weighted norms of sampled processes and the Doob-type inequality.

Every norm is an expectation of a per-path functional, read up to the path's
stopping index. With ``densities`` the expectation is replaced by the sup of
density-weighted means over a finite tilt set; without, the plain mean is used
(the zero-control special case).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .measures import DensityProcess, sup_expectation


class WindowError(ValueError):
    """A weight or moment parameter outside its admissible window."""


@dataclass(frozen=True)
class NormParams:
    p: float
    alpha: float = 0.0
    horizon: np.ndarray | None = None

    def __post_init__(self):
        if not self.p > 1:
            raise WindowError(f"norm exponent p must exceed 1, got {self.p}")
        if not math.isfinite(self.alpha):
            raise WindowError("alpha must be finite")

    def check_window(self, gen) -> None:
        mu, rho = gen.monotone_mu, gen.weight_rho
        if not (-mu <= self.alpha < rho):
            raise WindowError(
                f"weight alpha={self.alpha} outside the admissible window [-mu, rho) = [{-mu}, {rho})"
            )
        if not self.p < gen.moment_q:
            raise WindowError(f"p={self.p} must lie in (1, q) with q={gen.moment_q}")


@dataclass(frozen=True)
class NormEstimate:
    norm_kind: str
    p: float
    alpha: float
    value: float
    std_error: float
    moment: float
    argmax: int = 0

    def __float__(self):
        return float(self.value)

    def to_record(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k in ("norm_kind", "p", "alpha", "value", "std_error")}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def _stops(n: int, N1: int, stop_index, params: NormParams) -> np.ndarray:
    if stop_index is None:
        stop_index = params.horizon
    if stop_index is None:
        return np.full(n, N1 - 1, dtype=np.int64)
    return np.asarray(stop_index, dtype=np.int64)


def _expect(per_path: np.ndarray, stop: np.ndarray, densities: Sequence[DensityProcess] | None):
    if per_path.shape[0] == 0:
        raise ValueError("empty bundle")
    if not densities:
        return sup_expectation(per_path, [None])
    return sup_expectation(per_path, [D.at_stop(stop) for D in densities])


def _root(kind: str, params: NormParams, per_path, stop, densities, power: float | None = None) -> NormEstimate:
    power = params.p if power is None else power
    est = _expect(per_path, stop, densities)
    m = max(est.value, 0.0)
    value = m ** (1.0 / power)
    se = (1.0 / power) * m ** (1.0 / power - 1.0) * est.std_error if m > 0 else 0.0
    return NormEstimate(kind, params.p, params.alpha, value, se, m, est.argmax)


def _upto_stop_mask(n: int, length: int, stop: np.ndarray, inclusive: bool) -> np.ndarray:
    k = np.arange(length)[None, :]
    return k <= stop[:, None] if inclusive else k < stop[:, None]


def norm_L(xi: np.ndarray, params: NormParams, times: np.ndarray, stop_index=None,
           densities=None) -> NormEstimate:
    """(E[|e^{alpha tau} xi|^p])^{1/p} for a terminal variable."""
    xi = np.asarray(xi, dtype=float)
    stop = _stops(xi.shape[0], len(times), stop_index, params)
    per_path = np.abs(np.exp(params.alpha * times[stop]) * xi) ** params.p
    return _root("L", params, per_path, stop, densities)


def norm_D(Y: np.ndarray, params: NormParams, times: np.ndarray, stop_index=None,
           densities=None) -> NormEstimate:
    """(E[sup_{k <= stop} |e^{alpha t_k} Y_k|^p])^{1/p}."""
    Y = np.asarray(Y, dtype=float)
    n, N1 = Y.shape
    stop = _stops(n, N1, stop_index, params)
    mask = _upto_stop_mask(n, N1, stop, inclusive=True)
    weighted = np.abs(np.exp(params.alpha * times)[None, :] * Y)
    per_path = np.where(mask, weighted, 0.0).max(axis=1) ** params.p
    return _root("D", params, per_path, stop, densities)


def norm_H(Z: np.ndarray, sigma_samples: np.ndarray, params: NormParams, times: np.ndarray,
           stop_index=None, densities=None) -> NormEstimate:
    """(E[(sum_{k < stop} |e^{alpha t_k} sigma_k^T Z_k|^2 h)^{p/2}])^{1/p}."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 2:
        Z = Z[:, :, None]
    n, N1, d = Z.shape
    N = N1 - 1
    if sigma_samples.shape[:3] != (n, N, d) and np.broadcast_shapes(sigma_samples.shape[:3], (n, N, d)) != (n, N, d):
        raise ValueError(f"shape mismatch: Z {Z.shape} vs sigma {sigma_samples.shape}")
    h = times[1] - times[0]
    stop = _stops(n, N1, stop_index, params)
    sz = np.einsum("nkij,nki->nkj", np.broadcast_to(sigma_samples, (n, N) + sigma_samples.shape[2:]), Z[:, :N])
    sq = np.exp(2 * params.alpha * times[:N])[None, :] * np.sum(sz * sz, axis=2)
    mask = _upto_stop_mask(n, N, stop, inclusive=False)
    integral = np.sum(np.where(mask, sq, 0.0), axis=1) * h
    return _root("H", params, integral ** (params.p / 2), stop, densities)


def norm_K(K: np.ndarray, params: NormParams, times: np.ndarray, stop_index=None,
           densities=None, tol: float = 1e-12) -> NormEstimate:
    """(E[(sum e^{alpha t_{k+1}} (K_{k+1} - K_k))^p])^{1/p} for nondecreasing K."""
    K = np.asarray(K, dtype=float)
    n, N1 = K.shape
    dK = np.diff(K, axis=1)
    scale = max(1.0, float(np.abs(K).max(initial=0.0)))
    if np.any(dK < -tol * scale):
        raise ValueError("K must be nondecreasing along every path")
    stop = _stops(n, N1, stop_index, params)
    mask = _upto_stop_mask(n, N1 - 1, stop, inclusive=False)
    stieltjes = np.sum(np.where(mask, np.exp(params.alpha * times[1:])[None, :] * dK, 0.0), axis=1)
    return _root("K", params, stieltjes ** params.p, stop, densities)


def norm_N(dN: np.ndarray, params: NormParams, times: np.ndarray, stop_index=None,
           densities=None) -> NormEstimate:
    """Martingale-residual diagnostic: (E[(sum e^{2 alpha t_k} dN_k^2)^{p/2}])^{1/p}."""
    dN = np.asarray(dN, dtype=float)
    n, N = dN.shape
    stop = _stops(n, N + 1, stop_index, params)
    mask = _upto_stop_mask(n, N, stop, inclusive=False)
    qv = np.sum(np.where(mask, np.exp(2 * params.alpha * times[:N])[None, :] * dN ** 2, 0.0), axis=1)
    return _root("N", params, qv ** (params.p / 2), stop, densities)


@dataclass(frozen=True)
class DoobReport:
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float
    combined_se: float
    passed: bool
    p: float
    q: float

    def to_record(self) -> dict:
        return asdict(self)


def doob_check(M: np.ndarray, p: float, q: float, stop_index=None,
               densities: Sequence[DensityProcess] | None = None, n_se: float = 3.0) -> DoobReport:
    """Compare E[sup |M|^p] with q/(q-p) * E[|M_tau|^q]^{p/q}, both under the tilt sup."""
    if not 0 < p < q:
        raise ValueError(f"need 0 < p < q, got p={p}, q={q}")
    M = np.asarray(M, dtype=float)
    n, N1 = M.shape
    stop = np.full(n, N1 - 1) if stop_index is None else np.asarray(stop_index)
    mask = _upto_stop_mask(n, N1, stop, inclusive=True)
    sup_p = np.where(mask, np.abs(M), 0.0).max(axis=1) ** p
    term_q = np.abs(M[np.arange(n), stop]) ** q
    lhs = _expect(sup_p, stop, densities)
    mq = _expect(term_q, stop, densities)
    c = q / (q - p)
    rhs = c * max(mq.value, 0.0) ** (p / q)
    rhs_se = c * (p / q) * mq.value ** (p / q - 1) * mq.std_error if mq.value > 0 else 0.0
    comb = math.hypot(lhs.std_error, rhs_se)
    return DoobReport(lhs.value, rhs, lhs.std_error, rhs_se, comb, bool(lhs.value <= rhs + n_se * comb), p, q)
