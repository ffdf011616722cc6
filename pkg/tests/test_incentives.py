import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from propdyn import incentives
from propdyn.equilibrium import solve_market_ce, solve_submarket, solve_submarket_boosted, verify_pacing
from propdyn.errors import EpsilonFloorViolated, InfeasibleTarget, TooLarge
from propdyn.incentives import (
    bang_per_buck_spread,
    buyer_audit,
    buyer_best_response_grid,
    buyer_best_response_one_item,
    buyer_equalized_split,
    buyer_seller_utilities,
    frank_wolfe_revenue,
    incentive_ratio,
    seller_best_response,
    seller_linear_oracle,
    seller_revenue,
    synthesize_boosts,
    two_by_two_curve,
)
from propdyn.market import MarketSpec, generate

CROSSED = np.array([[2.0, 1.0], [1.0, 2.0]])


# -- buyer side ------------------------------------------------------------------------

def test_equalized_split_single_option():
    spec = MarketSpec([1.0, 1.5], [[1.0, 0.0], [1.0, 1.0]], [0, 1])
    others = np.array([[1.0, 0.0], [0.75, 0.75]])
    np.testing.assert_array_equal(buyer_equalized_split(spec, 0, others), [1.0, 0.0])


def test_equalized_split_identical_sellers(crossed_twice):
    others = np.array([[2.0, 2.0], [1.0, 1.0]])
    row = buyer_equalized_split(crossed_twice, 1, others)
    np.testing.assert_allclose(row, [1.0, 1.0], atol=1e-12)


def test_equalized_split_seed7_against_ce(seed7):
    ce = solve_market_ce(seed7)
    row = buyer_equalized_split(seed7, 0, ce.split, tol=1e-7)
    assert row.sum() == pytest.approx(seed7.budgets[0])
    # independent check: one sub-market solve per seller
    bpb = []
    for k, items in enumerate(seed7.groups):
        if row[k] > 0:
            budgets = ce.split[:, k].copy()
            budgets[0] = row[k]
            bpb.append(solve_submarket(seed7.values[:, items], budgets).utilities[0] / row[k])
    assert max(bpb) - min(bpb) < 1e-6


def test_grid_best_response_crossed_twice(crossed_twice):
    others = np.array([[2.0, 2.0], [1.0, 1.0]])
    res = buyer_best_response_grid(crossed_twice, 1, others, 200)
    np.testing.assert_allclose(res.row, [1.0, 1.0])
    assert res.utility == pytest.approx(2 * two_by_two_curve(1.0), abs=1e-9)


def test_grid_best_response_single_option():
    spec = MarketSpec([1.0, 1.5], [[1.0, 0.0], [1.0, 1.0]], [0, 1])
    others = np.array([[1.0, 0.0], [0.75, 0.75]])
    res = buyer_best_response_grid(spec, 0, others, 20)
    np.testing.assert_array_equal(res.row, [1.0, 0.0])


def test_grid_guards(seed7):
    with pytest.raises(ValueError):
        buyer_best_response_grid(seed7, 0, solve_market_ce(seed7).split, 5)
    big = generate(2, 2, 4, 4)
    with pytest.raises(TooLarge):
        buyer_best_response_grid(big, 0, np.full((2, 4), 0.25), 10)


def test_buyer_two_approximation_seed7(seed7):
    ce = solve_market_ce(seed7)
    for i in range(seed7.n_buyers):
        rep = buyer_audit(seed7, i, ce.split, resolution=60)
        assert rep.passed
        assert 1 - 1e-6 <= rep.ratio <= 2 + rep.slack / rep.proportional_utility


def test_grid_is_never_far_above_equalized_on_crossed(crossed_twice):
    # non-concave utility curve: the equalized split is still within factor 2
    others = np.array([[2.0, 2.0], [1.0, 1.0]])
    rep = buyer_audit(crossed_twice, 1, others, resolution=40)
    assert rep.ratio == pytest.approx(1.0, abs=1e-9)


def test_one_item_single_seller():
    spec = MarketSpec([1.0, 1.0], [[1.0], [1.0]], [0])
    np.testing.assert_array_equal(buyer_best_response_one_item(spec, 0, np.array([[1.0], [1.0]])), [1.0])


def test_one_item_symmetric():
    spec = MarketSpec([2.0, 2.0], [[1.0, 1.0], [1.0, 1.0]], [0, 1])
    others = np.array([[0.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(buyer_best_response_one_item(spec, 0, others), [1.0, 1.0], atol=1e-8)


def test_one_item_matches_golden_section():
    spec = MarketSpec([1.0, 2.0], [[4.0, 1.0], [1.0, 1.0]], [0, 1])
    others = np.array([[0.0, 0.0], [1.0, 1.0]])
    row = buyer_best_response_one_item(spec, 0, others)

    def neg(b):
        return -(4 * b / (b + 1) + (1 - b) / (1 - b + 1))

    best = minimize_scalar(neg, bounds=(0, 1), method="bounded", options={"xatol": 1e-12})
    assert row[0] == pytest.approx(best.x, abs=1e-6)
    assert row.sum() == pytest.approx(1.0)


def test_one_item_matches_exact_pacing_utilities():
    # with one item per seller, the pacing utility is v * b / (b + o)
    spec = MarketSpec([1.0, 0.8, 1.2], [[3.0, 1.0, 2.0], [1.0, 1.0, 1.0], [2.0, 2.0, 1.0]], [0, 1, 2])
    others = np.array([[0.0, 0.0, 0.0], [0.3, 0.3, 0.2], [0.5, 0.2, 0.5]])
    row = buyer_best_response_one_item(spec, 0, others)
    u, _ = buyer_seller_utilities(spec, 0, row, others)
    o = others.sum(axis=0)
    np.testing.assert_allclose(u, spec.values[0] * row / (row + o), atol=1e-9)


def test_curve_continuity_points():
    assert two_by_two_curve(1.0) == 2.0
    assert two_by_two_curve(4.0) == 2.0
    assert two_by_two_curve(0.5) == pytest.approx(1.2)
    with pytest.raises(ValueError):
        two_by_two_curve(-1.0)


def test_curve_matches_solver_at_100_points():
    rng = np.random.default_rng(0)
    for b in np.concatenate([rng.uniform(0.001, 12, 97), [1.0, 4.0, 0.5]]):
        u = solve_submarket(CROSSED, np.array([2.0, b])).utilities[1]
        assert u == pytest.approx(two_by_two_curve(b), abs=1e-6)


def test_spread_helper():
    assert bang_per_buck_spread([1.0, 0.0], [3.0, 0.0]) == 0.0
    assert bang_per_buck_spread([1.0, 2.0], [3.0, 2.0]) == pytest.approx(2.0)


# -- boost synthesis ------------------------------------------------------------------

def test_synthesized_boosts_for_plain_equilibrium_vanish():
    v = generate(4, 3, 3, 1).values
    B = np.array([1.0, 0.6, 1.4])
    o = solve_submarket(v, B)
    alphas, c = synthesize_boosts(v, B, o.allocation)
    np.testing.assert_allclose(alphas, o.alphas, rtol=1e-8)
    winners = o.allocation > 1e-7
    # boosts on winners only encode the strict margin; no other manipulation
    assert np.all(c[winners] <= 1e-5 * np.max(o.prices) + 1e-12)


def test_synthesized_crossed_example():
    B = np.array([2.0, 2.0])
    target = np.array([[1.0, 0.5], [0.0, 0.5]])
    alphas, c = synthesize_boosts(CROSSED, B, target)
    np.testing.assert_allclose(alphas, [0.8, 2.0])
    assert c[0, 1] - c[1, 1] == pytest.approx(3.2)
    assert 0.4 < c[0, 0] - c[1, 0] <= 0.5          # hand-built boosts use a 0.1 margin here
    assert np.all(c.min(axis=0) == 0)
    assert incentives.verify_synthesized(CROSSED, B, target, alphas, c).passed
    o = solve_submarket_boosted(CROSSED, B, c)
    np.testing.assert_allclose(o.allocation, target, atol=1e-7)
    hand = solve_submarket_boosted(CROSSED, B, np.array([[0.5, 3.2], [0.0, 0.0]]))
    np.testing.assert_allclose(o.utilities, hand.utilities, atol=1e-8)


def test_synthesis_rejects_zero_utility_target():
    with pytest.raises(InfeasibleTarget):
        synthesize_boosts(CROSSED, [2.0, 2.0], [[1.0, 1.0], [0.0, 0.0]])


def test_synthesis_rejects_non_clearing_target():
    with pytest.raises(InfeasibleTarget):
        synthesize_boosts(CROSSED, [2.0, 2.0], [[0.5, 0.0], [0.0, 0.5]])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 4), m=st.integers(1, 4))
def test_synthesized_boosts_implement_any_target(seed, n, m):
    rng = np.random.default_rng(seed)
    v = rng.random((n, m)) + 1e-3
    B = rng.uniform(0.5, 1.5, n)
    x = rng.dirichlet(np.ones(n), size=m).T
    alphas, c = synthesize_boosts(v, B, x)
    assert np.all(c >= 0)
    out = incentives.boosted_outcome(v, x, alphas, c)
    assert verify_pacing(out, v, B, c, tol=1e-9).passed
    np.testing.assert_allclose(out.utilities, (v * x).sum(axis=1), atol=1e-9)


# -- seller side -----------------------------------------------------------------------

def test_linear_oracle_examples():
    v = np.array([[3.0, 1.0], [1.0, 4.0]])
    np.testing.assert_array_equal(seller_linear_oracle(v, [1.0, 2.0]), [3.0, 4.0])
    np.testing.assert_array_equal(seller_linear_oracle(v, [0.0, 0.0]), [4.0, 0.0])


def test_linear_oracle_dominates_random_allocations():
    rng = np.random.default_rng(5)
    v = rng.random((4, 5))
    g = rng.random(4)
    best = g @ seller_linear_oracle(v, g)
    for _ in range(1000):
        x = rng.dirichlet(np.ones(4), size=5).T
        assert g @ (v * x).sum(axis=1) <= best + 1e-12


def test_best_response_single_buyer():
    spec = MarketSpec([1.0], [[2.0, 3.0]], [0, 1])
    eps = incentives.default_epsilon(spec)
    br = seller_best_response(spec, 0, np.array([eps]))
    assert br.utilities[0] == pytest.approx(2.0)
    assert br.revenue == pytest.approx(2.0 / (2.0 + eps))


def test_best_response_floor_violation():
    spec = MarketSpec([1.0, 1.0], [[1.0, 1.0], [1.0, 1.0]], [0, 1])
    with pytest.raises(EpsilonFloorViolated):
        seller_best_response(spec, 0, np.array([0.0, 1.0]))


def _grid_revenue(v, B, w, points=801):
    # brute force over allocations of two items between two buyers
    t = np.linspace(0, 1, points)
    a, b = np.meshgrid(t, t, indexing="ij")
    u0 = v[0, 0] * a + v[0, 1] * b
    u1 = v[1, 0] * (1 - a) + v[1, 1] * (1 - b)
    return float(np.max(B[0] * u0 / (u0 + w[0]) + B[1] * u1 / (u1 + w[1])))


def test_best_response_matches_dense_grid_symmetric_market():
    spec = MarketSpec([1.0, 1.0], [[1.0, 2.0, 2.0, 1.0], [2.0, 1.0, 1.0, 2.0]], [0, 0, 1, 1])
    ce = solve_market_ce(spec)
    br = seller_best_response(spec, 0, ce.utility_matrix)
    w = ce.utility_matrix[:, 1]
    assert br.revenue == pytest.approx(_grid_revenue(spec.values[:, :2], spec.budgets, w), abs=1e-4)
    assert br.revenue >= ce.split[:, 0].sum() - 1e-12


@pytest.mark.parametrize("seed", range(8))
def test_frank_wolfe_matches_dense_grid(seed):
    rng = np.random.default_rng(seed)
    v = rng.random((2, 2)) + 0.01
    B = rng.uniform(0.5, 1.5, 2)
    w = rng.uniform(0.05, 1.0, 2)
    fw = frank_wolfe_revenue(v, B, w)
    assert fw.gap < 1e-7
    assert fw.revenue == pytest.approx(_grid_revenue(v, B, w), abs=1e-4)
    assert fw.revenue >= _grid_revenue(v, B, w) - 1e-12


def test_frank_wolfe_history_is_monotone_and_witnessed():
    rng = np.random.default_rng(9)
    v = rng.random((4, 6))
    B = rng.uniform(0.5, 1.5, 4)
    w = rng.uniform(0.01, 1.0, 4)
    fw = frank_wolfe_revenue(v, B, w)
    assert np.all(np.diff(fw.revenue_history) >= -1e-13)
    assert fw.converged
    np.testing.assert_allclose(fw.allocation.sum(axis=0), 1.0)
    np.testing.assert_allclose((v * fw.allocation).sum(axis=1), fw.utilities, atol=1e-12)
    assert seller_revenue(B, fw.utilities, w) == pytest.approx(fw.revenue)


def test_warm_start_reaches_same_point():
    rng = np.random.default_rng(2)
    v = rng.random((3, 4))
    B = rng.uniform(0.5, 1.5, 3)
    w = rng.uniform(0.1, 1.0, 3)
    cold = frank_wolfe_revenue(v, B, w, tol_fw=1e-12)
    warm = frank_wolfe_revenue(v, B, w * 1.01, tol_fw=1e-12)
    again = frank_wolfe_revenue(v, B, w, tol_fw=1e-12, warm=warm)
    assert again.revenue == pytest.approx(cold.revenue, abs=1e-11)


def test_incentive_ratio_symmetric():
    spec = MarketSpec([1.0, 1.0], [[1.0, 2.0, 2.0, 1.0], [2.0, 1.0, 1.0, 2.0]], [0, 0, 1, 1])
    rep = incentive_ratio(spec, 0)
    assert rep.passed
    assert 1 - 1e-6 <= rep.ratio < 1.5


def test_incentive_ratio_uncontested_seller():
    # seller 0's items are worth much more to everybody than seller 1's
    spec = MarketSpec([1.0, 1.0, 1.0], [[5.0, 4.0, 0.1], [4.0, 5.0, 0.1], [4.5, 4.5, 0.2]], [0, 0, 1])
    for k in range(2):
        rep = incentive_ratio(spec, k)
        assert rep.passed
        assert rep.gap < 1e-7


@pytest.mark.parametrize("seed", range(1, 6))
def test_incentive_ratio_random(seed):
    spec = generate(seed, 3, 5, 2)
    for k in range(2):
        rep = incentive_ratio(spec, k)
        assert 1 - 1e-6 <= rep.ratio <= 5
        assert rep.gap < 1e-7


def test_incentive_ratio_needs_two_sellers(crossed):
    with pytest.raises(ValueError):
        incentive_ratio(crossed, 0)
