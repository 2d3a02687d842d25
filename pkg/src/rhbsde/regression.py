"""Least-squares conditional expectations on a state basis."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular


class SingularRegressionError(RuntimeError):
    def __init__(self, condition: float, step: int | None = None):
        self.condition = condition
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"regression design is singular{where} (condition number {condition:.3g})")


@dataclass(frozen=True)
class RegressionBasis:
    """Basis for E[. | state].

    kind is one of ``polynomial`` (total degree ``degree`` in the standardized
    state), ``piecewise_linear`` (hat functions on ``bins`` cells, d = 1) or
    ``indicator_bins`` (``bins`` cells per axis; the regression is a bin
    average, hence order preserving).  Indicator cells span ``domain_box``
    when given, the empirical range of the fitted sample otherwise; hat
    function knots sit at sample quantiles clipped to the box.
    """

    kind: str = "polynomial"
    degree: int = 3
    bins: int = 20
    domain_box: tuple | None = None
    max_condition: float = 1e10
    min_per_function: int = 4

    def __post_init__(self):
        if self.kind not in ("polynomial", "piecewise_linear", "indicator_bins"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 0:
            raise ValueError("polynomial degree must be >= 0")
        if self.kind != "polynomial" and self.bins < 1:
            raise ValueError("bins must be >= 1")

    def describe(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "polynomial":
            out["degree"] = self.degree
        else:
            out["bins"] = self.bins
        if self.domain_box is not None:
            out["domain_box"] = [list(map(float, np.atleast_1d(b))) for b in self.domain_box]
        return out

    def fit(self, x: np.ndarray, step: int | None = None) -> "FittedBasis":
        """Build the design on sample ``x`` [n, d] and factor it."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n, d = x.shape
        spread = np.ptp(x, axis=0) if n else np.zeros(d)
        fb = FittedBasis(self, d)
        if self.kind == "polynomial":
            fb.exponents = _exponents(d, self.degree)
            fb.center = x.mean(axis=0)
            sd = x.std(axis=0)
            fb.scale = np.where(sd > 0, sd, 1.0)
            size = len(fb.exponents)
        else:
            if self.kind == "piecewise_linear" and d != 1:
                raise ValueError("piecewise_linear basis supports a one-dimensional state only")
            if self.domain_box is not None:
                lo = np.atleast_1d(np.asarray(self.domain_box[0], dtype=float))
                hi = np.atleast_1d(np.asarray(self.domain_box[1], dtype=float))
            else:
                lo, hi = x.min(axis=0), x.max(axis=0)
                hi = np.where(hi > lo, hi, lo + 1.0)
            if self.kind == "piecewise_linear":
                # knots at sample quantiles (inside the box) so every hat function sees data
                knots = np.quantile(np.clip(x[:, 0], lo[0], hi[0]), np.linspace(0, 1, self.bins + 1)) if n else lo
                knots = np.unique(knots)
                if knots.size < 2:
                    knots = np.array([lo[0], hi[0]])
                    fb.constant_only = True
                fb.edges = [knots]
                size = knots.size
            else:
                fb.edges = [np.linspace(lo[j], hi[j], self.bins + 1) for j in range(d)]
                size = self.bins ** d
        if n < self.min_per_function * size or np.all(spread <= 1e-12 * (1 + np.abs(x).max(initial=0))):
            fb.constant_only = True
        fb._factor(x, step)
        return fb


_CHOLESKY_LIMIT = 1e5


def _exponents(d: int, degree: int) -> list[tuple]:
    exps = [e for e in itertools.product(range(degree + 1), repeat=d) if sum(e) <= degree]
    return sorted(exps, key=lambda e: (sum(e), tuple(-v for v in e)))


class FittedBasis:
    """A factored design matrix: solves least-squares for any number of targets."""

    def __init__(self, basis: RegressionBasis, d: int):
        self.basis = basis
        self.d = d
        self.constant_only = False
        self.exponents = None
        self.center = None
        self.scale = None
        self.edges = None
        self.active = None  # indicator columns with data
        self.condition = 1.0
        self._q = None
        self._r = None
        self._A = None
        self._chol = None
        self._n = 0

    @property
    def n_functions(self) -> int:
        if self._chol is not None:
            return self._chol[0].shape[0]
        return self._r.shape[0] if self._r is not None else 1

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = x.shape[0]
        if self.constant_only:
            return np.ones((n, 1))
        kind = self.basis.kind
        if kind == "polynomial":
            z = (x - self.center) / self.scale
            deg = self.basis.degree
            powers = np.ones((deg + 1, n, self.d))
            for j in range(1, deg + 1):
                powers[j] = powers[j - 1] * z
            A = np.empty((n, len(self.exponents)))
            for c, e in enumerate(self.exponents):
                col = powers[e[0], :, 0].copy()
                for j in range(1, self.d):
                    if e[j]:
                        col *= powers[e[j], :, j]
                A[:, c] = col
            return A
        if kind == "piecewise_linear":
            edges = self.edges[0]
            nb = len(edges) - 1
            i = np.clip(np.searchsorted(edges, x[:, 0], side="right") - 1, 0, nb - 1)
            frac = np.clip((x[:, 0] - edges[i]) / (edges[i + 1] - edges[i]), 0.0, 1.0)
            A = np.zeros((n, nb + 1))
            A[np.arange(n), i] = 1.0 - frac
            A[np.arange(n), i + 1] += frac
            return A
        cells = self.cell_index(x)
        A = np.zeros((n, self.basis.bins ** self.d))
        A[np.arange(n), cells] = 1.0
        return A

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        idx = []
        for j, edges in enumerate(self.edges):
            nb = len(edges) - 1
            idx.append(np.clip(np.searchsorted(edges, x[:, j], side="right") - 1, 0, nb - 1))
        return np.ravel_multi_index(tuple(idx), (self.basis.bins,) * self.d)

    def _factor(self, x: np.ndarray, step: int | None) -> None:
        A = self.design(x)
        self._n = A.shape[0]
        if self.basis.kind == "indicator_bins" and not self.constant_only:
            self.active = np.flatnonzero(A.sum(axis=0) > 0)
            A = A[:, self.active]
        G = A.T @ A
        w = np.linalg.eigvalsh(G)
        cond = float(np.sqrt(w[-1] / w[0])) if w[0] > 0 else float("inf")
        if cond < _CHOLESKY_LIMIT:
            # semi-normal equations with one correction step; accurate at this conditioning
            self._chol = cho_factor(G)
            self._A = A
        else:
            q, r = np.linalg.qr(A)
            sv = np.linalg.svd(r, compute_uv=False)
            cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
            self._q, self._r = q, r
        self.condition = cond
        if cond > self.basis.max_condition:
            raise SingularRegressionError(cond, step)

    def solve(self, targets: np.ndarray) -> np.ndarray:
        """Coefficients for ``targets`` of shape [n] or [n, r]."""
        t = np.asarray(targets, dtype=float)
        vec = t.ndim == 1
        if vec:
            t = t[:, None]
        if self._chol is not None:
            A = self._A
            coef = cho_solve(self._chol, A.T @ t)
            coef += cho_solve(self._chol, A.T @ (t - A @ coef))
        else:
            coef = solve_triangular(self._r, self._q.T @ t)
        return coef[:, 0] if vec else coef

    def fitted(self, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(coefficients, in-sample fitted values)."""
        coef = self.solve(targets)
        if self._chol is not None:
            return coef, self._A @ coef
        return coef, self._q @ (self._r @ coef)

    def release(self) -> "FittedBasis":
        """Drop the sample-sized factors; prediction still works afterwards."""
        self._A = self._q = None
        return self

    def predict(self, x: np.ndarray, coef: np.ndarray) -> np.ndarray:
        A = self.design(x)
        if self.active is not None:
            A = self._remap_empty(A, x)
        return A @ coef

    def _remap_empty(self, A: np.ndarray, x: np.ndarray) -> np.ndarray:
        # cells without training data borrow the nearest populated cell
        cells = self.cell_index(x)
        pos = np.searchsorted(self.active, cells)
        pos = np.clip(pos, 0, len(self.active) - 1)
        left = np.clip(pos - 1, 0, len(self.active) - 1)
        nearest = np.where(np.abs(self.active[left] - cells) < np.abs(self.active[pos] - cells), left, pos)
        out = np.zeros((A.shape[0], len(self.active)))
        out[np.arange(A.shape[0]), nearest] = 1.0
        return out


@dataclass
class StepFit:
    """Fitted regression function at one grid step: ``predict(x)``."""

    basis: FittedBasis
    coef: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.basis.predict(x, self.coef)


def conditional_expectation(x: np.ndarray, targets: np.ndarray, basis: RegressionBasis) -> np.ndarray:
    """In-sample regression estimate of E[targets | x]."""
    fb = basis.fit(x)
    return fb.fitted(targets)[1]
