import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rhbsde.bsde import GeneratorSpec, StateBins, TerminalSpec, solve_bsde
from rhbsde.measures import MeasureFamily
from rhbsde.paths import Deterministic, SimConfig, TimeGrid
from rhbsde.regression import RegressionBasis
from rhbsde.twobsde import (
    NonMarkovError,
    TwoBsdeProblem,
    dpp_check,
    minimality_check,
    solve_2bsde_hjb,
    solve_2bsde_sweep,
    supermartingale_check,
    twobsde_comparison_check,
)

P2 = RegressionBasis(degree=2)
CFG = SimConfig(TimeGrid(1 / 16, 16), Deterministic(1.0), 10000, 11)
MENU = MeasureFamily.constant_volatilities([1.0, 1.5, 2.0])
SQUARE = TerminalSpec.of_state(lambda x: x[:, 0] ** 2)


def _problem(sigmas, term, gen=None):
    return TwoBsdeProblem(MeasureFamily.constant_volatilities(sigmas), gen or GeneratorSpec.zero(), term)


@pytest.fixture(scope="module")
def convex():
    return solve_2bsde_sweep(TwoBsdeProblem(MENU, GeneratorSpec.zero(), SQUARE), CFG, P2)


# --- solve_2bsde_sweep ------------------------------------------------------------


def test_singleton_family_equals_member_bsde():
    prob = _problem([1.0], SQUARE, GeneratorSpec.discounting(0.2))
    sol = solve_2bsde_sweep(prob, CFG, P2)
    plain = solve_bsde(CFG.simulate(prob.family.members[0], 0), prob.gen, SQUARE, P2)
    assert sol.V0 == plain.y0
    np.testing.assert_array_equal(sol.V, sol.member_values[0])


def test_convex_payoff_picks_widest_member(convex):
    assert convex.V0 == pytest.approx(4.0, rel=0.05)
    assert convex.argmax0 == 2
    occupied = convex.occupancy.max(axis=0) > 0.01
    assert np.all(convex.argmax_member[:-1][occupied[:-1]] == 2)


def test_concave_payoff_picks_narrowest_member():
    sol = solve_2bsde_sweep(TwoBsdeProblem(MENU, GeneratorSpec.zero(), SQUARE.scaled(-1.0)), CFG, P2)
    assert sol.V0 == pytest.approx(-1.0, rel=0.05)
    assert sol.argmax0 == 0


def test_summary_fields(convex):
    s = convex.summary()
    assert s["method"] == "sweep" and len(s["member_Y0"]) == 3 and s["V0"] == convex.V0


# --- solve_2bsde_hjb --------------------------------------------------------------


def test_hjb_matches_sweep_on_convex_payoff(convex):
    hjb = solve_2bsde_hjb(TwoBsdeProblem(MENU, GeneratorSpec.zero(), SQUARE), CFG, P2)
    assert hjb.V0 == pytest.approx(4.0, rel=0.03)
    assert hjb.V0 == pytest.approx(convex.V0, rel=0.02)


def test_hjb_dominates_sweep_on_mixed_payoff():
    term = TerminalSpec.of_state(lambda x: np.maximum(x[:, 0] ** 2 - 1.0, 0.0))
    prob = _problem([0.5, 1.0], term)
    basis = RegressionBasis("piecewise_linear", bins=16)
    sweep = solve_2bsde_sweep(prob, CFG, basis)
    hjb = solve_2bsde_hjb(prob, CFG, basis)
    assert hjb.V0 >= sweep.V0 - 3 * max(sweep.V0_se, hjb.V0_se)


def test_hjb_needs_markov_terminal():
    path_term = TerminalSpec(xi_fn=lambda b: b.state[:, :, 0].max(axis=1))
    with pytest.raises(NonMarkovError):
        solve_2bsde_hjb(_problem([1.0], path_term), CFG, P2)


# --- checks -----------------------------------------------------------------------


def test_minimality_singleton_and_affine():
    single = solve_2bsde_sweep(_problem([1.0], SQUARE), CFG, P2)
    assert minimality_check(single, 0, 8).passed
    affine = solve_2bsde_sweep(_problem([1.0, 2.0], TerminalSpec.of_state(lambda x: x[:, 0])), CFG, P2)
    r = minimality_check(affine, 0, 16)
    assert r.passed
    for inc, se in zip(r.member_increments, r.member_se):
        assert abs(inc) <= 3 * se + r.slack + 1e-9


def test_minimality_convex_dominated_members_accumulate_K(convex):
    r = minimality_check(convex, 0, 16)
    assert r.passed and r.argmax_member == 2
    assert r.member_increments[0] > 5 * r.eps_stat
    with pytest.raises(ValueError):
        minimality_check(convex, 4, 4)


def test_dpp_singleton_and_convex():
    # per-bin comparisons in the tails need more paths than the other tests
    cfg = SimConfig(TimeGrid(1 / 16, 16), Deterministic(1.0), 50000, 11)
    single = dpp_check(_problem([1.0], SQUARE), 0.5, cfg, P2)
    assert single.passed
    r = dpp_check(TwoBsdeProblem(MENU, GeneratorSpec.zero(), SQUARE), 0.5, cfg, P2)
    assert r.passed and r.rel_gap <= 0.03 and r.per_bin
    with pytest.raises(ValueError):
        dpp_check(_problem([1.0], SQUARE), 1.0, CFG, P2)


def test_comparison_examples():
    cfg = SimConfig(TimeGrid(1 / 16, 16), Deterministic(1.0), 3000, 4)
    base = _problem([0.5, 1.0], SQUARE)
    same = twobsde_comparison_check(base, base, cfg, P2)
    assert same.violation == 0 and same.y0_gap == 0
    up = twobsde_comparison_check(base, _problem([0.5, 1.0], SQUARE.shifted(1.0)), cfg, P2)
    assert up.passed and up.y0_gap == pytest.approx(1.0, abs=1e-9)
    drift = twobsde_comparison_check(base, _problem([0.5, 1.0], SQUARE, GeneratorSpec.constant(0.1)), cfg, P2)
    assert drift.passed and drift.y0_gap == pytest.approx(0.1, abs=1e-9)


def test_supermartingale_check_on_convex(convex):
    r = supermartingale_check(convex)
    assert r.passed and r.blocks == 4


# --- invariants ---------------------------------------------------------------------

_small = SimConfig(TimeGrid(1 / 8, 8), Deterministic(1.0), 1500, 0)
_payoffs = {
    "square": SQUARE,
    "cos": TerminalSpec.of_state(lambda x: np.cos(x[:, 0])),
    "call": TerminalSpec.of_state(lambda x: np.maximum(x[:, 0] - 0.2, 0.0)),
}


@settings(max_examples=8, deadline=None)
@given(name=st.sampled_from(sorted(_payoffs)), s1=st.floats(0.3, 1.0), s2=st.floats(1.0, 2.0),
       seed=st.integers(0, 10**6))
def test_envelope_terminal_and_member_monotonicity(name, s1, s2, seed):
    cfg = SimConfig(_small.grid, _small.rule, _small.n_paths, seed)
    term = _payoffs[name]
    bins = StateBins(-3.0, 3.0, 12)
    small = solve_2bsde_sweep(_problem([s1], term), cfg, P2, bins=bins)
    big = solve_2bsde_sweep(_problem([s1, s2], term), cfg, P2, bins=bins)
    # V dominates every member value
    finite = np.isfinite(big.member_values)
    assert np.all((big.V[None] >= big.member_values)[finite])
    # adding a member never lowers V
    assert np.all(big.V >= small.V)
    assert big.V0 >= small.V0
    # terminal consistency
    np.testing.assert_allclose(big.V[-1], term.g(bins.centers[:, None]), rtol=0, atol=1e-12)
