import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rhbsde.bsde import GeneratorSpec
from rhbsde.measures import ConstantControl, DriftControlSet, control_densities, girsanov_density
from rhbsde.norms import NormParams, WindowError, doob_check, norm_D, norm_H, norm_K
from rhbsde.paths import Deterministic, TimeGrid, VolatilitySpec, simulate_paths

T1 = np.linspace(0.0, 1.0, 11)


def test_norm_D_constants():
    Y = np.full((5, 11), 2.0)
    assert norm_D(Y, NormParams(2.0), T1).value == pytest.approx(2.0)
    assert norm_D(Y, NormParams(2.0, 0.7), T1).value == pytest.approx(2.0 * math.exp(0.7))


def test_norm_D_of_brownian_motion_under_doob_bound():
    b = simulate_paths(VolatilitySpec.from_constant(1.0), Deterministic(1.0), TimeGrid(0.01, 100), 20000, 3)
    est = norm_D(b.W[:, :, 0], NormParams(2.0), b.times)
    assert est.value ** 2 <= 2 * math.sqrt(3) + 3 * est.std_error
    assert est.value > 1.0


def test_norm_H_examples():
    sig1 = np.ones((4, 10, 1, 1))
    assert norm_H(np.zeros((4, 11, 1)), sig1, NormParams(2.0), T1).value == 0.0
    assert norm_H(np.ones((4, 11, 1)), sig1, NormParams(2.0), T1).value == pytest.approx(1.0)
    assert norm_H(np.ones((4, 11, 1)), 2 * sig1, NormParams(2.0), T1).value == pytest.approx(2.0)
    T2 = np.linspace(0, 2.0, 11)
    assert norm_H(np.ones((4, 11, 1)), sig1, NormParams(2.0), T2).value == pytest.approx(math.sqrt(2.0))
    with pytest.raises(ValueError):
        norm_H(np.ones((4, 11, 1)), np.ones((3, 10, 1, 1)), NormParams(2.0), T1)


def test_norm_K_examples():
    t = np.linspace(0, 1, 101)
    assert norm_K(np.zeros((3, 101)), NormParams(1.5), t).value == 0.0
    K = np.tile(t, (3, 1))
    assert norm_K(K, NormParams(1.0001), t).value == pytest.approx(1.0, rel=1e-3)
    jump = np.where(t >= 0.5 - 1e-12, 1.0, 0.0)[None, :]
    assert norm_K(jump, NormParams(1.0001, 1.0), t).value == pytest.approx(math.exp(0.5), rel=1e-3)
    with pytest.raises(ValueError):
        norm_K(-K, NormParams(2.0), t)


def test_params_window():
    with pytest.raises(WindowError):
        NormParams(1.0)
    gen = GeneratorSpec.discounting(0.5)  # mu = 0.5, rho = 1
    NormParams(2.0, -0.5).check_window(gen)
    for bad in (NormParams(2.0, -0.6), NormParams(2.0, 1.0), NormParams(5.0, 0.0)):
        with pytest.raises(WindowError):
            bad.check_window(gen)


def test_json_record():
    rec = json.loads(norm_D(np.ones((3, 11)), NormParams(2.0), T1).to_json())
    assert set(rec) == {"norm_kind", "p", "alpha", "value", "std_error"}


def test_tilted_norm_matches_sup_over_controls():
    b = simulate_paths(VolatilitySpec.from_constant(1.0), Deterministic(1.0), TimeGrid(0.1, 10), 4000, 1)
    ctl = DriftControlSet.constants(1.0, [-1.0, 1.0])
    dens = control_densities(b, ctl)
    W = b.W[:, :, 0]
    tilted = norm_D(W, NormParams(2.0), b.times, densities=dens).value
    plain = norm_D(W, NormParams(2.0), b.times).value
    assert tilted >= plain


# --- doob ------------------------------------------------------------------


def test_doob_constant():
    r = doob_check(np.full((10, 5), 3.0), 2.0, 4.0)
    assert r.lhs == pytest.approx(9.0) and r.rhs == pytest.approx(18.0) and r.passed


def test_doob_brownian_and_tilted():
    b = simulate_paths(VolatilitySpec.from_constant(1.0), Deterministic(1.0), TimeGrid(0.01, 100), 20000, 2)
    W = b.W[:, :, 0]
    r = doob_check(W, 2.0, 4.0)
    assert r.passed and r.rhs == pytest.approx(2 * math.sqrt(3), rel=0.05)
    # W_t - t is a martingale under the tilt lambda = 1
    D = girsanov_density(b, ConstantControl(1.0))
    M = W - b.times[None, :]
    assert abs(np.mean(D.D[:, -1] * M[:, -1])) <= 3 * np.std(D.D[:, -1] * M[:, -1]) / math.sqrt(b.n_paths)
    assert doob_check(M, 2.0, 4.0, densities=[D]).passed


def test_doob_rejects_p_ge_q():
    with pytest.raises(ValueError):
        doob_check(np.zeros((2, 3)), 4.0, 2.0)


# --- invariants ------------------------------------------------------------

_paths = arrays(np.float64, (6, 11), elements=st.floats(-5, 5))
_p = st.floats(1.1, 4.0)


@settings(max_examples=50, deadline=None)
@given(Y=_paths, c=st.floats(0.01, 50), p=_p, alpha=st.floats(-2, 2))
def test_homogeneity(Y, c, p, alpha):
    prm = NormParams(p, alpha)
    sig = np.full((6, 10, 1, 1), 0.7)
    assert norm_D(c * Y, prm, T1).value == pytest.approx(c * norm_D(Y, prm, T1).value, rel=1e-9, abs=1e-12)
    assert norm_H(c * Y, sig, prm, T1).value == pytest.approx(c * norm_H(Y, sig, prm, T1).value, rel=1e-9, abs=1e-12)
    K = np.cumsum(np.abs(Y), axis=1)
    assert norm_K(c * K, prm, T1).value == pytest.approx(c * norm_K(K, prm, T1).value, rel=1e-9, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(Y=_paths, p=_p, a1=st.floats(-2, 2), da=st.floats(0, 2))
def test_monotone_in_alpha(Y, p, a1, da):
    sig = np.ones((6, 10, 1, 1))
    K = np.cumsum(np.abs(Y), axis=1)
    lo, hi = NormParams(p, a1), NormParams(p, a1 + da)
    for f in (lambda prm: norm_D(Y, prm, T1), lambda prm: norm_H(Y, sig, prm, T1), lambda prm: norm_K(K, prm, T1)):
        assert f(lo).value <= f(hi).value * (1 + 1e-12) + 1e-300


@settings(max_examples=50, deadline=None)
@given(Y1=_paths, Y2=_paths, p=_p, alpha=st.floats(-1, 1))
def test_triangle_inequality(Y1, Y2, p, alpha):
    prm = NormParams(p, alpha)
    sig = np.full((6, 10, 1, 1), 1.3)
    d = lambda Y: norm_D(Y, prm, T1).value  # noqa: E731
    h = lambda Y: norm_H(Y, sig, prm, T1).value  # noqa: E731
    assert d(Y1 + Y2) <= d(Y1) + d(Y2) + 1e-9
    assert h(Y1 + Y2) <= h(Y1) + h(Y2) + 1e-9


def test_stop_index_respected():
    Y = np.zeros((2, 11))
    Y[:, 8:] = 100.0
    assert norm_D(Y, NormParams(2.0), T1, stop_index=np.array([5, 7])).value == 0.0
