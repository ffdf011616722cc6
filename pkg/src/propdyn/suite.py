"""Acceptance battery: every checkable guarantee, run over a range of seeds.

Each check turns one seed into a list of :class:`Record` rows (one per
measured quantity). Records are merged in sorted key order, so a battery's
output does not depend on the number of workers.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import dynamics, incentives, seller_game
from .equilibrium import (
    GRID_MAX_CELLS,
    eg_discretization_bound,
    eg_objective,
    grid_resolution,
    grid_search_eg,
    solve_market_boosted,
    solve_market_ce,
    solve_submarket,
    verify_pacing,
)
from .market import MarketSpec, generate

# Instance counts per check for a full 50-seed battery.
COUNTS = {2: 50, 3: 50, 4: 50, 5: 20, 6: 30, 9: 30, 10: 30, 11: 30, 12: 50}
LADDERS_TOTAL = 1_000
TARGETS_TOTAL = 100
CURVE_POINTS = (0.25, 0.5, 1.0, 2.0, 4.0, 10.0)
ORACLE_GRID_POINTS = 500_000
PNE_RESTARTS = 5


@dataclass(frozen=True)
class Record:
    criterion: int
    metric: str
    seed: int
    key: str            # agent or sample identifier within the seed
    value: float
    bound: float
    sense: str          # "<=" or ">="
    passed: bool


def _rec(criterion, metric, seed, key, value, bound, sense="<=", passed=None):
    value = float(value)
    if passed is None:
        passed = value <= bound if sense == "<=" else value >= bound
    return Record(criterion, metric, seed, str(key), value, float(bound), sense, bool(passed))


# -- instance families ----------------------------------------------------------------

def dynamics_instance(seed: int) -> MarketSpec:
    """n <= 5, m <= 8, K <= 3 with the shape drawn from the seed."""
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 4))
    n = int(rng.integers(2, 6))
    m = int(rng.integers(K, 9))
    return generate(seed, n, m, K)


def random_boosts(spec: MarketSpec, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 5]).uniform(0.0, 0.5, size=spec.values.shape)


def game_instance(seed: int) -> MarketSpec:
    """At least two sellers, every buyer valuing at least two of them."""
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 4))
    n = int(rng.integers(2, 5))
    m = int(rng.integers(K, 7))
    return generate(seed, n, m, K)


ORACLE_SHAPES = ((2, 1), (2, 2), (2, 3), (3, 1), (3, 2), (4, 1), (5, 1), (6, 1), (1, 3), (1, 6))


def oracle_instance(seed: int) -> MarketSpec:
    """Tiny market with ``n * m <= 6``; the shape cycles with the seed."""
    n, m = ORACLE_SHAPES[(seed - 1) % len(ORACLE_SHAPES)]
    K = 1 + seed % m
    return generate(seed, n, m, K)


# -- checks ------------------------------------------------------------------------------

def check_curve(seed: int):
    out = []
    for b in CURVE_POINTS:
        o = solve_submarket(incentives.TWO_BY_TWO_VALUES, np.array([incentives.TWO_BY_TWO_OPPONENT_BUDGET, b]))
        out.append(_rec(1, "abs error of f(b)", seed, f"b={b}", abs(o.utilities[1] - incentives.two_by_two_curve(b)), 1e-6))
    return out


def check_dynamics(seed: int):
    """Convergence, potential monotonicity, ergodic rate and CE fixed point on one instance."""
    spec = dynamics_instance(seed)
    ce = solve_market_ce(spec)
    trace = dynamics.run(spec, reference=ce)
    out = []
    if trace.error is not None:
        out.append(_rec(2, "solver failure", seed, "-", 1.0, 0.0))
    rel = np.max(np.abs(trace.final_utilities - ce.utilities) / ce.utilities)
    out.append(_rec(2, "relative utility error", seed, "-", rel, 1e-4))
    out.append(_rec(2, "largest phi increase", seed, "-", float(np.max(np.diff(trace.phi), initial=0.0)), 1e-8))
    rate = dynamics.rate_report(trace)
    out.append(_rec(3, "max_T T*g(T) - phi(1)", seed, "-", rate.constant - rate.phi1, 1e-6))
    tol_inner = dynamics.DEFAULT_TOL_INNER
    _, nxt = dynamics.step(spec, ce.split, tol_inner=tol_inner)
    out.append(_rec(4, "budget move from CE split", seed, "-", np.max(np.abs(nxt - ce.split)), 10 * tol_inner))
    return out


def check_boosted(seed: int):
    spec = dynamics_instance(seed)
    c = random_boosts(spec, seed)
    ref = solve_market_boosted(spec, c)
    trace = dynamics.run(spec, boosts=c, reference=ref)
    out = []
    if trace.error is not None or trace.final_outcomes is None:
        return [_rec(5, "solver failure", seed, "-", 1.0, 0.0)]
    rel = np.max(np.abs(trace.final_utilities - ref.utilities) / ref.utilities)
    out.append(_rec(5, "relative distance to limit", seed, "-", rel, 1e-4))
    limit = verify_pacing(ref.outcome, spec.values, spec.budgets, c, tol=1e-6)
    out.append(_rec(5, "limit pacing residual", seed, "-", limit.max_residual, 1e-6))
    last = dynamics.verify_market(spec, trace.final_outcomes, c, tol=1e-6)
    out.append(_rec(5, "final iterate pacing residual (info)", seed, "-", last.max_residual, math.inf))
    return out


def check_buyers(seed: int, resolution: int = incentives.DEFAULT_RESOLUTION):
    spec = dynamics_instance(seed)
    ce = solve_market_ce(spec)
    out = []
    for i in range(spec.n_buyers):
        r = incentives.buyer_audit(spec, i, ce.split, resolution)
        allowance = 2 + r.slack / r.proportional_utility
        out.append(_rec(6, "best / equalized utility", seed, i, r.ratio, 2.0,
                        passed=r.ratio <= allowance + 1e-12))
        out.append(_rec(6, "best / equalized (lower)", seed, i, r.ratio, 1 - 1e-6, ">="))
    return out


def check_monotone(seed: int, ladders: int):
    """Budget ladders on random sub-markets with fixed opponents."""
    rng = np.random.default_rng([seed, 7])
    worst_u, worst_bpb = 0.0, 0.0
    for _ in range(ladders):
        n, m = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        v = rng.random((n, m))
        v[:, ~np.any(v > 0, axis=0)] = 1.0
        budgets = rng.uniform(0.5, 1.5, n)
        i = int(rng.integers(n))
        if v[i].sum() <= 0:
            continue
        ladder = np.sort(rng.uniform(0.01, 5.0, 6))
        u = np.empty(ladder.size)
        warm = None
        for l, b in enumerate(ladder):
            budgets[i] = b
            warm = solve_submarket(v, budgets, warm=warm)
            u[l] = warm.utilities[i]
        worst_u = max(worst_u, float(np.max(u[:-1] - u[1:])))
        bpb = u / ladder
        worst_bpb = max(worst_bpb, float(np.max(bpb[1:] - bpb[:-1])))
    return [_rec(7, "largest utility decrease", seed, f"{ladders} ladders", worst_u, 1e-8),
            _rec(7, "largest bang-per-buck increase", seed, f"{ladders} ladders", worst_bpb, 1e-8)]


def check_boost_synthesis(seed: int, targets: int):
    rng = np.random.default_rng([seed, 8])
    worst_u, worst_res = 0.0, 0.0
    for _ in range(targets):
        n, m = int(rng.integers(2, 5)), int(rng.integers(1, 5))
        v = rng.random((n, m)) + 1e-3
        B = rng.uniform(0.5, 1.5, n)
        x = rng.dirichlet(np.ones(n), size=m).T
        x[rng.random((n, m)) < 0.3] = 0.0          # some zero entries
        dead = x.sum(axis=0) == 0
        x[0, dead] = 1.0
        x /= x.sum(axis=0)
        if np.any((v * x).sum(axis=1) <= 0):
            x[:, 0] = 1.0 / n                         # give everyone a slice of item 0
            x /= x.sum(axis=0)
        alphas, c = incentives.synthesize_boosts(v, B, x)
        outcome = incentives.boosted_outcome(v, x, alphas, c)
        rep = verify_pacing(outcome, v, B, c, tol=1e-9)
        worst_res = max(worst_res, rep.max_residual)
        worst_u = max(worst_u, float(np.max(np.abs(outcome.utilities - (v * x).sum(axis=1)))))
    return [_rec(8, "pacing residual", seed, f"{targets} targets", worst_res, 1e-9),
            _rec(8, "target utility error", seed, f"{targets} targets", worst_u, 1e-9)]


def check_sellers(seed: int):
    spec = game_instance(seed)
    ce = solve_market_ce(spec)
    out = []
    for k in range(spec.n_sellers):
        r = incentives.incentive_ratio(spec, k, ce=ce)
        out.append(_rec(9, "incentive ratio", seed, k, r.ratio, incentives.SELLER_RATIO_BOUND + 1e-6))
        out.append(_rec(9, "incentive ratio (lower)", seed, k, r.ratio, 1 - 1e-6, ">="))
        out.append(_rec(9, "Frank-Wolfe duality gap", seed, k, r.gap, 1e-7, passed=r.gap < 1e-7))
    return out


def check_game(seed: int, restarts: int = PNE_RESTARTS):
    spec = game_instance(seed)
    tol = 1e-7 * spec.total_budget
    ce = solve_market_ce(spec)
    pne = seller_game.solve_pne(spec, tol, init=seller_game.ce_profile(spec, ce))
    rng = np.random.default_rng([seed, 10])
    spread = 0.0
    for _ in range(restarts):
        other = seller_game.solve_pne(spec, tol, init=seller_game.random_profile(spec, rng))
        spread = max(spread, float(np.max(np.abs(other.utilities - pne.utilities))))
    rep = seller_game.verify_pne(spec, pne, tol)
    fair = seller_game.fairness(spec, pne, ce=ce)
    return [
        _rec(10, "multi-start spread / tol", seed, "-", spread / tol, 10.0),
        _rec(10, "best-response gain / tol", seed, "-", rep.max_improvement / tol, 1.0, passed=rep.passed),
        _rec(11, "NSW ratio - (1 - delta)", seed, "-", fair.ratio - fair.bound, -1e-6, ">="),
        _rec(11, "NSW ratio", seed, "-", fair.ratio, 1 + 1e-6),
    ]


def dense_frontier_revenue(values, budgets, w, points_per_segment: int = 2_000) -> float:
    """Best revenue on the Pareto frontier of a 2-buyer utility polytope, sampled densely.

    Revenue increases in both utilities, so the optimum lies on the frontier,
    traced by giving buyer 0 the items with the highest ``v0 / v1`` first.
    """
    v = np.asarray(values, dtype=float)
    order = np.argsort(-(v[0] / np.maximum(v[1], 1e-300)), kind="stable")
    u0, u1 = 0.0, float(v[1].sum())
    best = -np.inf
    t = np.linspace(0.0, 1.0, points_per_segment + 1)
    for j in order:
        a = u0 + t * v[0, j]
        b = u1 - t * v[1, j]
        best = max(best, float(np.max(budgets[0] * a / (a + w[0]) + budgets[1] * b / (b + w[1]))))
        u0, u1 = u0 + v[0, j], u1 - v[1, j]
    return best


def check_oracles(seed: int):
    spec = oracle_instance(seed)
    ce = solve_market_ce(spec)
    n, m = spec.values.shape
    out = []
    if n * m <= GRID_MAX_CELLS:
        r = grid_resolution(n, m, ORACLE_GRID_POINTS, cap=200)
        _, grid_obj = grid_search_eg(spec, r)
        solver_obj = eg_objective(spec, ce.utilities)
        bound = eg_discretization_bound(spec, ce.utilities, r)
        out.append(_rec(12, "|EG solver - grid| - discretization bound", seed, f"r={r}",
                        abs(solver_obj - grid_obj) - bound, 1e-3))
    rng = np.random.default_rng([seed, 12])
    v = rng.random((2, int(rng.integers(1, 5)))) + 1e-3
    B = rng.uniform(0.5, 1.5, 2)
    w = rng.uniform(0.05, 1.0, 2)
    fw = incentives.frank_wolfe_revenue(v, B, w)
    dense = dense_frontier_revenue(v, B, w)
    out.append(_rec(12, "|Frank-Wolfe - dense grid| revenue", seed, "2-buyer", abs(fw.revenue - dense), 1e-4))
    return out


# -- orchestration --------------------------------------------------------------------------

def _jobs(seeds):
    seeds = list(seeds)
    count = len(seeds)
    jobs = [(1, seeds[0], check_curve, ())]
    ladders = math.ceil(LADDERS_TOTAL / count)
    targets = math.ceil(TARGETS_TOTAL / count)
    for s in seeds[:COUNTS[2]]:
        jobs.append((2, s, check_dynamics, ()))
    for s in seeds[:COUNTS[5]]:
        jobs.append((5, s, check_boosted, ()))
    for s in seeds[:COUNTS[6]]:
        jobs.append((6, s, check_buyers, ()))
    for s in seeds:
        jobs.append((7, s, check_monotone, (ladders,)))
        jobs.append((8, s, check_boost_synthesis, (targets,)))
    for s in seeds[:COUNTS[9]]:
        jobs.append((9, s, check_sellers, ()))
    for s in seeds[:COUNTS[10]]:
        jobs.append((10, s, check_game, ()))
    for s in seeds[:COUNTS[12]]:
        jobs.append((12, s, check_oracles, ()))
    return jobs


def _call(job):
    _, seed, fn, args = job
    try:
        return fn(seed, *args)
    except Exception as e:      # a crash is a failed record, not a dead battery
        return [_rec(job[0], f"error: {type(e).__name__}", seed, "-", 1.0, 0.0)]


# criteria whose records come out of another criterion's job
PRODUCED_BY = {3: 2, 4: 2, 11: 10}


def run_battery(seeds, workers: int = 1, criteria=None) -> list[Record]:
    """All records for ``seeds``, sorted by (criterion, metric, seed, key)."""
    wanted = None if criteria is None else {PRODUCED_BY.get(c, c) for c in criteria}
    jobs = [j for j in _jobs(seeds) if wanted is None or j[0] in wanted]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_call, jobs))
    else:
        results = [_call(j) for j in jobs]
    records = [r for rs in results for r in rs]
    if criteria is not None:
        records = [r for r in records if r.criterion in criteria]
    return sorted(records, key=lambda r: (r.criterion, r.metric, r.seed, r.key))


@dataclass(frozen=True)
class SummaryRow:
    criterion: int
    metric: str
    instances: int
    worst: float
    bound: float
    sense: str
    passed: bool


def summarize(records) -> list[SummaryRow]:
    groups: dict = {}
    for r in records:
        groups.setdefault((r.criterion, r.metric), []).append(r)
    rows = []
    for (crit, metric), rs in sorted(groups.items()):
        vals = [r.value for r in rs]
        worst = max(vals) if rs[0].sense == "<=" else min(vals)
        bound = max(r.bound for r in rs) if rs[0].sense == "<=" else min(r.bound for r in rs)
        rows.append(SummaryRow(crit, metric, len({r.seed for r in rs}), worst, bound, rs[0].sense,
                               all(r.passed for r in rs)))
    return rows


def record_dict(r: Record) -> dict:
    return asdict(r)
