import numpy as np
import pytest

from propdyn import dynamics
from propdyn.equilibrium import solve_market_boosted, solve_market_ce
from propdyn.errors import BuyerValuesNothing, DomainError
from propdyn.incentives import two_by_two_curve
from propdyn.market import MarketSpec, generate


def test_init_split_uniform(symmetric):
    np.testing.assert_allclose(dynamics.init_split(symmetric), np.full((2, 2), 0.5))


def test_init_split_single_option():
    spec = MarketSpec([1.0, 2.0], [[1.0, 0.0], [1.0, 1.0]], [0, 1])
    np.testing.assert_allclose(dynamics.init_split(spec), [[1.0, 0.0], [1.0, 1.0]])


def test_init_split_buyer_values_nothing():
    spec = MarketSpec([1.0, 2.0], [[0.0, 0.0], [1.0, 1.0]], [0, 1])
    with pytest.raises(BuyerValuesNothing):
        dynamics.init_split(spec)


def test_ce_split_is_fixed_point(seed7):
    ce = solve_market_ce(seed7)
    _, nxt = dynamics.step(seed7, ce.split)
    assert np.max(np.abs(nxt - ce.split)) <= 10 * dynamics.DEFAULT_TOL_INNER


def test_symmetric_split_preserved(symmetric):
    split = dynamics.init_split(symmetric)
    _, nxt = dynamics.step(symmetric, split)
    np.testing.assert_allclose(nxt, split, atol=1e-12)


def test_crossed_twice_utilities_follow_curve(crossed_twice):
    u, _ = dynamics.step(crossed_twice, dynamics.init_split(crossed_twice))
    expected = two_by_two_curve(crossed_twice.budgets[1] / 2)
    np.testing.assert_allclose(u[1], [expected, expected], atol=1e-9)


def test_step_conserves_budgets(seed7):
    split = dynamics.init_split(seed7)
    for _ in range(5):
        _, split = dynamics.step(seed7, split)
        np.testing.assert_allclose(split.sum(axis=1), seed7.budgets, rtol=1e-14)


def test_symmetric_run_reaches_ce():
    spec = MarketSpec(np.ones(2), [[2.0, 1.0], [1.0, 2.0]], [0, 1])
    trace = dynamics.run(spec, 50)
    np.testing.assert_allclose(trace.final_utilities, [2, 2], atol=1e-8)


def test_seed7_converges_to_ce(seed7):
    trace = dynamics.run(seed7, 500)
    ce = solve_market_ce(seed7)
    assert np.max(np.abs(trace.final_utilities - ce.utilities) / ce.utilities) < 1e-4
    assert trace.phi_monotone()
    assert dynamics.rate_report(trace).passed


def test_seed7_with_boosts_reaches_boosted_equilibrium(seed7):
    c = np.random.default_rng(7).uniform(0, 0.5, seed7.values.shape)
    trace = dynamics.run(seed7, 500, boosts=c)
    assert trace.error is None
    assert dynamics.verify_market(seed7, trace.final_outcomes, c, tol=1e-6).passed
    ref = solve_market_boosted(seed7, c)
    np.testing.assert_allclose(trace.final_utilities, ref.utilities, rtol=1e-4)


def test_boosted_equilibrium_is_fixed_point(seed7):
    c = np.random.default_rng(3).uniform(0, 0.5, seed7.values.shape)
    ref = solve_market_boosted(seed7, c)
    _, nxt = dynamics.step(seed7, ref.split, boosts=c)
    assert np.max(np.abs(nxt - ref.split)) < 1e-7


def test_potential_zero_at_ce_and_row_nonnegative(seed7):
    ce = solve_market_ce(seed7)
    assert dynamics.potential(ce.split, ce.split) == 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        other = rng.random(ce.split.shape) + 1e-3
        other *= (seed7.budgets / other.sum(axis=1))[:, None]
        assert dynamics.potential(other, ce.split) >= -1e-12


def test_potential_domain_error():
    with pytest.raises(DomainError):
        dynamics.potential(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]))


def test_potential_skips_zero_ce_entries():
    assert dynamics.potential(np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]])) == 0.0


def test_rate_from_ce_split_is_flat(seed7):
    ce = solve_market_ce(seed7)
    trace = dynamics.run(seed7, 20, split0=ce.split, stop_early=0.0)
    rep = dynamics.rate_report(trace)
    assert np.all(rep.avg_gap <= 1e-8)


def test_trace_rows_and_metadata(seed7):
    trace = dynamics.run(seed7, 3, stop_early=0.0)
    rows = list(trace.rows(0))
    assert len(rows) == seed7.n_buyers * seed7.n_sellers
    assert rows[0][0] == 1
    assert trace.metadata["reference"] == "ce"
    assert trace.rounds == 3 and len(trace.wall) == 3


def test_on_round_callback_sees_every_round(seed7):
    seen = []
    dynamics.run(seed7, 4, stop_early=0.0, on_round=lambda tr, t: seen.append(t))
    assert seen == [0, 1, 2, 3]


def test_run_rejects_zero_rounds(seed7):
    with pytest.raises(ValueError):
        dynamics.run(seed7, 0)


@pytest.mark.parametrize("seed", range(1, 6))
def test_random_instances_converge(seed):
    spec = generate(seed, 3, 5, 2)
    trace = dynamics.run(spec)
    ce = solve_market_ce(spec)
    assert np.max(np.abs(trace.final_utilities - ce.utilities) / ce.utilities) < 1e-4
    assert trace.phi_monotone(1e-8)
