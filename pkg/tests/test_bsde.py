import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rhbsde.bsde import (
    AssumptionViolation,
    GeneratorSpec,
    OrderPreconditionError,
    PicardConfig,
    PicardDivergenceError,
    StateBins,
    TerminalSpec,
    apriori_check,
    bin_surface,
    comparison_check,
    estimate_z,
    hitting_time_divergence,
    horizon_truncation_study,
    solve_bsde,
    stability_check,
    tanaka_check,
)
from rhbsde.norms import NormParams, WindowError
from rhbsde.oracles import exit_time_mean, linear_bsde_closed_form
from rhbsde.paths import Deterministic, ExitOfBox, TimeGrid, VolatilitySpec, simulate_paths
from rhbsde.regression import RegressionBasis

ONE = VolatilitySpec.from_constant(1.0)
P1 = RegressionBasis(degree=1)
P3 = RegressionBasis(degree=3)


def _bundle(n=4000, steps=20, T=1.0, seed=0, spec=ONE, offset=None):
    return simulate_paths(spec, Deterministic(T), TimeGrid(T / steps, steps), n, seed, initial_offset=offset)


@pytest.fixture(scope="module")
def bundle():
    return _bundle()


@pytest.fixture(scope="module")
def small():
    return _bundle(n=1500, steps=10, seed=4)


# --- solve_bsde -------------------------------------------------------------


def test_constants_are_fixed_points(bundle):
    sol = solve_bsde(bundle, GeneratorSpec.zero(), TerminalSpec.constant(1.7), P3)
    np.testing.assert_allclose(sol.Y, 1.7, atol=1e-12)
    np.testing.assert_allclose(sol.Z, 0.0, atol=1e-12)


def test_discounting_matches_closed_form(bundle):
    sol = solve_bsde(bundle, GeneratorSpec.discounting(0.5), TerminalSpec.constant(1.0), P3)
    # explicit Euler in y; the grid error is O(h)
    assert sol.y0 == pytest.approx(linear_bsde_closed_form(0.5, 1.0, 1.0), rel=0.01)
    implicit = solve_bsde(bundle, GeneratorSpec.discounting(0.5), TerminalSpec.constant(1.0), P3,
                          PicardConfig(implicit=True))
    assert implicit.y0 == pytest.approx(math.exp(-0.5), rel=0.01)


def test_exit_time_value_against_elliptic_oracle():
    h = 1 / 2048
    b = simulate_paths(ONE, ExitOfBox([0], [1]), TimeGrid(h, 3072), 4000, 3, initial_offset=[0.5])
    sol = solve_bsde(b, GeneratorSpec.constant(1.0), TerminalSpec.constant(0.0), P3)
    assert abs(sol.y0 - exit_time_mean(0.5, 0, 1)) <= 0.02


def test_terminal_is_measurable_w_r_t_stopped_path():
    h = 0.01
    b = simulate_paths(ONE, ExitOfBox([-0.5], [0.5]), TimeGrid(h, 200), 200, 1)
    term = TerminalSpec.of_state(lambda x: x[:, 0] ** 2)
    xi = term.values(b)
    X = b.X.copy()
    after = np.arange(201)[None, :] > b.stop_index[:, None]
    X[after] += 5.0
    assert np.array_equal(term.values(replace(b, X=X)), xi)


# --- estimate_z -------------------------------------------------------------


def test_z_of_identity_representation():
    b = _bundle(n=20000, steps=20, seed=6)
    sol = solve_bsde(b, GeneratorSpec.zero(), TerminalSpec.of_state(lambda x: x[:, 0]), P1)
    zs, counts = bin_surface(sol.Z, b, StateBins(-1.0, 1.0, 4), only_alive=True)
    occupied = counts[:20] >= 100
    assert occupied.sum() > 40
    assert np.all(np.abs(zs[:20, :, 0][occupied] - 1.0) <= 0.05)


def test_z_of_constant_is_zero(bundle):
    Y = np.full((bundle.n_paths, 21), 3.0)
    np.testing.assert_allclose(estimate_z(bundle, Y, basis=P3), 0.0, atol=1e-12)


@pytest.mark.parametrize("mode", ["covariation", "markov"])
def test_z_of_square_payoff_matches_heat_gradient(mode):
    b = _bundle(n=50000, steps=20, seed=6)
    sol = solve_bsde(b, GeneratorSpec.zero(), TerminalSpec.of_state(lambda x: x[:, 0] ** 2), P3, z_mode=mode)
    x = np.array([[0.5], [-0.5]])
    for k in (5, 10, 15):
        np.testing.assert_allclose(sol.z_at(k, x)[:, 0], 2 * x[:, 0], rtol=0.05)


# --- a priori estimate ------------------------------------------------------


def test_apriori_zero_data(small):
    sol = solve_bsde(small, GeneratorSpec.zero(), TerminalSpec.constant(0.0), P3)
    r = apriori_check(sol, NormParams(2.0))
    assert r.lhs == 0 and r.rhs == 0 and r.passed


def test_apriori_doubling_discounting(small):
    gen = GeneratorSpec.discounting(0.5)
    sol = solve_bsde(small, gen, TerminalSpec.of_state(lambda x: 1 + np.cos(x[:, 0])), P3)
    r = apriori_check(sol, NormParams(2.0))
    assert r.passed and r.lhs_scaling == pytest.approx(2.0, rel=0.05)
    for eta in (-0.5, 0.0, (gen.weight_rho - 0.5) / 2):
        rep = apriori_check(sol, NormParams(2.0, eta))
        assert math.isfinite(rep.ratio)
    with pytest.raises(WindowError):
        apriori_check(sol, NormParams(2.0, -0.6))


# --- comparison and stability ----------------------------------------------


def test_comparison_examples(small):
    lin = GeneratorSpec.linear(a=-0.3, b=0.2)
    xi = TerminalSpec.of_state(lambda x: np.sin(x[:, 0]))
    same = comparison_check(small, (lin, xi), (lin, xi), P3)
    assert same.violation == 0 and same.passed
    shifted = comparison_check(small, (GeneratorSpec.zero(), xi), (GeneratorSpec.constant(0.1), xi), P3)
    assert shifted.passed and shifted.y0_gap == pytest.approx(0.1 * 1.0, rel=0.01)
    mu = 0.5
    gen = GeneratorSpec.discounting(mu)
    fine = _bundle(n=1500, steps=50, seed=4)
    r = comparison_check(fine, (gen, xi), (gen, xi.shifted(1.0)), P3)
    assert r.passed and r.y0_gap == pytest.approx(math.exp(-mu), rel=0.01)


def test_comparison_precondition(small):
    xi = TerminalSpec.constant(1.0)
    with pytest.raises(OrderPreconditionError):
        comparison_check(small, (GeneratorSpec.zero(), xi.shifted(0.5)), (GeneratorSpec.zero(), xi), P3)
    with pytest.raises(OrderPreconditionError):
        comparison_check(small, (GeneratorSpec.constant(0.2), xi), (GeneratorSpec.zero(), xi), P3)


def test_stability_examples(small):
    gen = GeneratorSpec.discounting(0.5)
    xi = TerminalSpec.of_state(lambda x: np.cos(x[:, 0]))
    zero = stability_check(small, (gen, xi), (gen, xi), P3)
    assert zero.dY == 0 and zero.delta_xi == 0 and zero.delta_f == 0
    consts = []
    for eps in (0.1, 0.01):
        r = stability_check(small, (gen, xi), (gen, xi.shifted(eps)), P3)
        consts.append(r.dY / eps)
    assert consts[0] == pytest.approx(consts[1], rel=0.05)


def test_horizon_truncation_decreases_on_exit_problem():
    h = 1 / 64
    b = simulate_paths(ONE, ExitOfBox([-1], [1]), TimeGrid(h, 8 * 64), 3000, 2)
    st_ = horizon_truncation_study(b, GeneratorSpec.linear(a=-0.2, c=1.0), TerminalSpec.constant(0.0),
                                   [1, 2, 4], P3, reference_n=8)
    e = st_["errors"]
    assert e[0] > e[1] > e[2]


# --- worked example and Tanaka -------------------------------------------------


def test_divergence_example():
    r = hitting_time_divergence(L=1.0, n_list=(1, 2, 4), n_paths=4000, step_h=1 / 32, cap=4.0)
    assert r.passed and all(g >= 2 for g in r.growth_factors)
    assert all(v <= cs * (1 + 1e-12) for v, cs in zip(np.square(r.xi_norms), r.cauchy_schwarz_bounds))
    flat = hitting_time_divergence(L=0.0, n_list=(1, 2, 4), n_paths=4000, step_h=1 / 32, cap=4.0)
    assert flat.weighted_moments[0] == pytest.approx(flat.weighted_moments[-1], rel=1e-12)


def test_tanaka_examples():
    assert tanaka_check(np.full((1, 10), 2.0)).max_gap == 0.0
    t = np.linspace(-0.5, 0.5, 101)
    r = tanaka_check(t[None, :])
    assert r.passed and r.max_gap > 0
    gap_after = (np.abs(t) - 0.5) - np.concatenate([[0], np.cumsum(np.sign(t[:-1]) * np.diff(t))])
    assert gap_after[-1] > 0
    fractions = []
    for steps in (16, 256):
        b = _bundle(n=500, steps=steps, seed=2)
        rep = tanaka_check(b.X)
        fractions.append(rep.violation_fraction)
        assert rep.passed
    assert fractions[1] <= fractions[0]


# --- error classes -------------------------------------------------------------


def test_picard_divergence_error():
    b = _bundle(n=500, steps=100, T=2.0, seed=1)
    with pytest.raises(PicardDivergenceError) as exc:
        solve_bsde(b, GeneratorSpec.linear(a=10.0, weight_rho=11.0), TerminalSpec.constant(1.0), P1,
                   PicardConfig(max_iters=30))
    assert exc.value.ratio >= 1


def test_assumption_violation_and_window(small):
    liar = GeneratorSpec(lambda t, x, y, z, s: 3 * y, lipschitz_L=1.0, monotone_mu=-3.0, weight_rho=4.0)
    with pytest.raises(AssumptionViolation):
        liar.check_assumptions(small)
    mono_liar = GeneratorSpec(lambda t, x, y, z, s: 3 * y, lipschitz_L=3.0, monotone_mu=0.0)
    with pytest.raises(AssumptionViolation):
        mono_liar.check_assumptions(small)
    GeneratorSpec.linear(a=-0.5, b=0.3).check_assumptions(small)
    with pytest.raises(WindowError):
        solve_bsde(small, GeneratorSpec.discounting(0.5, weight_rho=-1.0), TerminalSpec.constant(1.0), P1)


# --- invariants ----------------------------------------------------------------


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), lo=st.floats(-1.0, -0.3), hi=st.floats(0.3, 1.0), c=st.floats(-1, 1))
def test_terminal_pinning(seed, lo, hi, c):
    b = simulate_paths(ONE, ExitOfBox([lo], [hi]), TimeGrid(0.05, 30), 400, seed)
    term = TerminalSpec.of_state(lambda x: np.exp(x[:, 0]) + c)
    sol = solve_bsde(b, GeneratorSpec.linear(a=-0.2, c=1.0), term, P3)
    rows = np.arange(b.n_paths)
    assert np.array_equal(sol.Y[rows, b.stop_index], term.values(b))
    after = np.arange(31)[None, :] >= b.stop_index[:, None]
    assert np.all(sol.Y[after] == np.broadcast_to(term.values(b)[:, None], sol.Y.shape)[after])


@settings(max_examples=10, deadline=None)
@given(a=st.floats(-2, 2), b=st.floats(-1, 1), seed=st.integers(0, 10**6))
def test_picard_contracts_under_step_guard(a, b, seed):
    steps = 20
    assert (1 / steps) * (max(abs(a), abs(b)) + abs(a)) < 0.5
    bun = _bundle(n=500, steps=steps, seed=seed)
    sol = solve_bsde(bun, GeneratorSpec.linear(a=a, b=b, weight_rho=abs(a) + 1), TerminalSpec.of_state(
        lambda x: np.tanh(x[:, 0])), P3, PicardConfig(min_sweeps=4))
    assert sol.converged and sol.median_picard_ratio < 1


def _regression_noise(b, Y, basis):
    """sqrt of sum_k Var(Y_{k+1} - Y_k) * max leverage_k: the accumulated fitted-value noise."""
    total = 0.0
    for k in range(b.grid.n_steps - 1, -1, -1):
        x = b.state_at(k)
        A = basis.fit(x).design(x)
        leverage = np.einsum("ij,ji->i", A, np.linalg.pinv(A))
        total += np.var(Y[:, k + 1] - Y[:, k]) * leverage.max()
    return math.sqrt(total)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), degree=st.integers(1, 4))
def test_zero_generator_reduction(seed, degree):
    b = _bundle(n=600, steps=10, seed=seed)
    basis = RegressionBasis(degree=degree)
    sol = solve_bsde(b, GeneratorSpec.zero(), TerminalSpec.of_state(lambda x: x[:, 0]), basis)
    assert np.max(np.abs(sol.Y - b.state[:, :, 0])) <= 10 * _regression_noise(b, sol.Y, basis)


@settings(max_examples=10, deadline=None)
@given(a=st.floats(-1, 1), bz=st.floats(-1, 1), u=st.floats(-3, 3), v=st.floats(-3, 3))
def test_linearity_of_terminal_to_initial_value(small, a, bz, u, v):
    gen = GeneratorSpec.linear(a=a, b=bz, weight_rho=abs(a) + 1)
    g1 = TerminalSpec.of_state(lambda x: np.sin(x[:, 0]))
    g2 = TerminalSpec.of_state(lambda x: x[:, 0] ** 2)
    both = TerminalSpec.of_state(lambda x: u * np.sin(x[:, 0]) + v * x[:, 0] ** 2)
    y1, y2, y12 = (solve_bsde(small, gen, t, P3, PicardConfig(tol=1e-13)).y0 for t in (g1, g2, both))
    assert y12 == pytest.approx(u * y1 + v * y2, rel=1e-8, abs=1e-10)


@settings(max_examples=10, deadline=None)
@given(a=st.floats(-0.5, 0.5), d0=st.floats(0, 0.3), e0=st.floats(0, 0.5), seed=st.integers(0, 10**6))
def test_comparison_on_random_ordered_pairs(a, d0, e0, seed):
    b = _bundle(n=800, steps=10, seed=seed)
    f = GeneratorSpec.linear(a=a, c=lambda t, x: np.cos(x[:, 0]), weight_rho=abs(a) + 1)
    xi = TerminalSpec.of_state(lambda x: x[:, 0] ** 2)
    r = comparison_check(b, (f, xi), (f.shifted(d0), xi.shifted(e0)), P3)
    assert r.passed
