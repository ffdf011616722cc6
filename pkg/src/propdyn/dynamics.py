"""Generalized proportional dynamics over sellers, with convergence diagnostics.

Each round every seller clears its items at the first-price pacing
equilibrium of the budgets it received, and every buyer then re-splits its
budget in proportion to the utility each seller delivered::

    B_i(k, t+1) = B_i * u_i(k, t) / u_i(K, t)

The potential ``Phi(t) = sum_ik B_i(k,*) ln(B_i(k,*) / B_i(k,t))`` against a
fixed CE split is non-increasing along the trajectory, and
``sum_{t<=T} (EG* - EG(t)) <= Phi(1)`` bounds the ergodic EG gap.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import (
    DEFAULT_MAX_INNER,
    PacingOutcome,
    eg_objective,
    solve_market_boosted,
    solve_market_ce,
    solve_submarket,
    solve_submarket_boosted,
    verify_pacing,
)
from .errors import BuyerValuesNothing, DomainError, PropdynError
from .market import MarketSpec

DEFAULT_TOL_INNER = 1e-9
DEFAULT_STOP_EARLY = 1e-10
DEFAULT_T_MAX = 10_000
PHI_SLACK = 1e-8
# split entries below this fraction of the buyer's budget are set to zero
SPLIT_FLOOR = 1e-200


def init_split(spec: MarketSpec) -> np.ndarray:
    """Uniform split of each budget over the sellers the buyer values."""
    mask = spec.interested
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        bad = np.flatnonzero(counts == 0).tolist()
        raise BuyerValuesNothing(f"buyers {bad} value no seller's items")
    return np.where(mask, (spec.budgets / counts)[:, None], 0.0)


def _check_split(spec, split):
    split = np.asarray(split, dtype=float)
    if split.shape != (spec.n_buyers, spec.n_sellers):
        raise ValueError(f"split has shape {split.shape}, expected {(spec.n_buyers, spec.n_sellers)}")
    if np.any(split < 0):
        raise ValueError("split entries must be non-negative")
    return split


def solve_round(spec: MarketSpec, split, boosts=None, tol_inner=DEFAULT_TOL_INNER,
                warm=None, max_inner=DEFAULT_MAX_INNER) -> list[PacingOutcome]:
    """Per-seller pacing equilibria for the budgets in ``split``."""
    split = _check_split(spec, split)
    c = spec.boosts if boosts is None else np.asarray(boosts, dtype=float)
    outs = []
    for k, items in enumerate(spec.groups):
        v = spec.values[:, items]
        w = None if warm is None else warm[k]
        if c is None:
            outs.append(solve_submarket(v, split[:, k], tol_inner, max_inner, warm=w))
        else:
            outs.append(solve_submarket_boosted(v, split[:, k], c[:, items], tol_inner, max_inner, warm=w))
    return outs


def utility_matrix(outcomes) -> np.ndarray:
    return np.column_stack([o.utilities for o in outcomes])


def proportional_update(spec: MarketSpec, utilities) -> np.ndarray:
    """``B_i * u_i(k) / u_i(K)``, with entries that have decayed below
    ``SPLIT_FLOOR * B_i`` dropped to zero and their row renormalized."""
    u = np.asarray(utilities, dtype=float)
    share = u / u.sum(axis=1, keepdims=True)
    if np.any((share > 0) & (share < SPLIT_FLOOR)):
        share = np.where(share < SPLIT_FLOOR, 0.0, share)
        share /= share.sum(axis=1, keepdims=True)
    return spec.budgets[:, None] * share


def step(spec: MarketSpec, split, boosts=None, tol_inner=DEFAULT_TOL_INNER, warm=None):
    """One round: returns ``(u(t), split(t+1))``."""
    outs = solve_round(spec, split, boosts, tol_inner, warm)
    u = utility_matrix(outs)
    return u, proportional_update(spec, u)


def potential(split, ce_split) -> float:
    """KL-style divergence of the current split from the CE split; zero CE entries are skipped."""
    b = np.asarray(split, dtype=float)
    star = np.asarray(ce_split, dtype=float)
    on = star > 0
    if np.any(b[on] <= 0):
        raise DomainError("split is zero where the CE split is positive")
    return float(np.sum(star[on] * np.log(star[on] / b[on])))


def market_outcome(spec: MarketSpec, outcomes, boosts=None) -> PacingOutcome:
    """Stitch per-seller outcomes into one market-wide outcome.

    Pacing multipliers are the market-wide ``B_i / u_i(K)``; at a fixed point
    of the dynamics they coincide with every seller's local multiplier.
    """
    n, m = spec.values.shape
    x = np.zeros((n, m))
    p = np.zeros(m)
    for o, items in zip(outcomes, spec.groups):
        x[:, items] = o.allocation
        p[items] = o.prices
    u = (spec.values * x).sum(axis=1)
    alphas = np.where(u > 0, spec.budgets / np.where(u > 0, u, 1.0), 0.0)
    spend = (alphas[:, None] * spec.values * x).sum(axis=1)
    c = spec.boosts if boosts is None else boosts
    return PacingOutcome(alphas, p, x, u, spend, None if c is None else np.asarray(c, dtype=float))


def verify_market(spec: MarketSpec, outcomes, boosts=None, tol=1e-6):
    c = spec.boosts if boosts is None else boosts
    out = market_outcome(spec, outcomes, c)
    return verify_pacing(out, spec.values, spec.budgets, c, tol)


@dataclass
class DynamicsTrace:
    """Per-round record of a proportional-dynamics run.

    Arrays are indexed by round ``t = 1..T`` (stored 0-based). ``phi`` is
    measured against ``ce_split``, one fixed equilibrium split; when the
    equilibrium split is not unique the limit may differ from it and ``phi``
    then settles at a positive value.
    """

    splits: list = field(default_factory=list)
    utilities: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    eg: list = field(default_factory=list)
    avg_gap: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    ce_split: np.ndarray | None = None
    ce_objective: float = float("nan")
    ce_utilities: np.ndarray | None = None
    final_split: np.ndarray | None = None
    final_outcomes: list | None = None
    stopped_early: bool = False
    error: Exception | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def rounds(self) -> int:
        return len(self.phi)

    @property
    def final_utilities(self) -> np.ndarray:
        return self.utilities[-1].sum(axis=1)

    def phi_monotone(self, slack=PHI_SLACK) -> bool:
        phi = np.asarray(self.phi)
        return bool(np.all(np.diff(phi) <= slack))

    def rows(self, t_index: int):
        """CSV rows ``(t, buyer, seller, budget, utility, phi, eg_objective, avg_gap)`` for one round."""
        b, u = self.splits[t_index], self.utilities[t_index]
        for i in range(b.shape[0]):
            for k in range(b.shape[1]):
                yield (t_index + 1, i, k, b[i, k], u[i, k], self.phi[t_index],
                       self.eg[t_index], self.avg_gap[t_index])


def run(spec: MarketSpec, T: int = DEFAULT_T_MAX, boosts=None, tol_inner=DEFAULT_TOL_INNER,
        stop_early: float = DEFAULT_STOP_EARLY, split0=None, reference=None,
        on_round=None) -> DynamicsTrace:
    """Run the dynamics for up to ``T`` rounds.

    ``reference`` is the equilibrium used for ``phi`` and the EG gap: the
    CE from :func:`solve_market_ce` by default, or the market-wide boosted
    equilibrium when boosts are in force. ``on_round(trace, t_index)`` is
    called after every round so callers can persist rows incrementally.
    Solver failures stop the run and are stored in ``trace.error``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    c = spec.boosts if boosts is None else np.asarray(boosts, dtype=float)
    if reference is None:
        reference = solve_market_ce(spec) if c is None else solve_market_boosted(spec, c)
    trace = DynamicsTrace(ce_split=reference.split, ce_utilities=reference.utilities,
                          ce_objective=eg_objective(spec, reference.utilities))
    trace.metadata["reference"] = "ce" if c is None else "boosted-equilibrium"
    trace.metadata["note"] = "phi measured against one fixed equilibrium split"
    split = init_split(spec) if split0 is None else _check_split(spec, split0)
    warm = None
    gap_sum = 0.0
    prev_total = None
    for t in range(T):
        t0 = time.perf_counter()
        try:
            outs = solve_round(spec, split, c, tol_inner, warm)
        except PropdynError as e:
            trace.error = e
            break
        u = utility_matrix(outs)
        total = u.sum(axis=1)
        eg = eg_objective(spec, total)
        gap_sum += trace.ce_objective - eg
        trace.splits.append(split)
        trace.utilities.append(u)
        trace.phi.append(potential(split, trace.ce_split))
        trace.eg.append(eg)
        trace.avg_gap.append(gap_sum / (t + 1))
        trace.wall.append(time.perf_counter() - t0)
        trace.final_outcomes = outs
        if on_round is not None:
            on_round(trace, t)
        split = proportional_update(spec, u)
        warm = outs
        if prev_total is not None and np.max(np.abs(total - prev_total) / total) < stop_early:
            trace.stopped_early = True
            break
        prev_total = total
    trace.final_split = split
    return trace


@dataclass
class RateReport:
    avg_gap: np.ndarray        # g(T) for every prefix T
    scaled_gap: np.ndarray     # T * g(T)
    phi1: float
    constant: float            # sup_T T * g(T)
    passed: bool
    gap_monotone_tail: bool    # observational only

    @property
    def margin(self) -> float:
        return self.phi1 - self.constant


def rate_report(trace: DynamicsTrace, ce_objective: float | None = None, slack: float = 1e-6) -> RateReport:
    """Ergodic EG-gap series and the check ``T * g(T) <= Phi(1) + slack``."""
    if not trace.eg:
        raise ValueError("empty trace")
    star = trace.ce_objective if ce_objective is None else ce_objective
    gaps = star - np.asarray(trace.eg)
    T = np.arange(1, gaps.size + 1)
    cum = np.cumsum(gaps)
    g = cum / T
    const = float(cum.max())
    phi1 = float(trace.phi[0])
    eg = np.asarray(trace.eg)
    inc = np.flatnonzero(np.diff(eg) < 0)
    start = int(inc[-1]) + 1 if inc.size else 0
    tail = bool(np.all(np.diff(g[start:]) <= 1e-12))
    return RateReport(g, cum, phi1, const, const <= phi1 + slack, tail)
