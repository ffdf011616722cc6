"""Seller competition game: pure Nash equilibrium, fairness and saddle diagnostics.

Each seller picks a feasible utility column ``u(k)`` for its items (any
market-clearing allocation is implementable with boosts) and earns
``R_k = sum_i B_i u_i(k) / u_i(K)``. Revenues always sum to the total budget.
The equilibrium is found by cyclic best response, every best response being
an exactly solvable concave problem (see :func:`incentives.seller_best_response`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .equilibrium import MarketEquilibrium, nsw, solve_market_ce
from .errors import DomainError, EpsilonFloorViolated, NoConvergence
from .incentives import (
    SellerBestResponse,
    default_epsilon,
    frank_wolfe_revenue,
    seller_linear_oracle,
    seller_revenue,
)
from .market import MarketSpec

DEFAULT_MAX_ROUNDS = 1_000
PNE_FW_TOL = 1e-14
PNE_FW_ITERS = 20_000
STALL_ROUNDS = 8
MIN_STEP = 1 / 64


@dataclass
class UtilityProfile:
    """``n x K`` utilities with one witness allocation per seller."""

    utilities: np.ndarray
    allocations: list
    eps: float
    improvements: np.ndarray | None = None     # best-response gains at the final round
    rounds: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def totals(self) -> np.ndarray:
        return self.utilities.sum(axis=1)

    def floor_slack(self) -> np.ndarray:
        """``sum_{k' != k} u_i(k') - eps`` for every buyer and seller."""
        return self.totals[:, None] - self.utilities - self.eps


def profile_from_allocations(spec: MarketSpec, allocations, eps: float | None = None) -> UtilityProfile:
    """Utility profile induced by one allocation per seller."""
    eps = default_epsilon(spec) if eps is None else eps
    cols = []
    for k, x in enumerate(allocations):
        x = np.asarray(x, dtype=float)
        v, _ = spec.submarket(k)
        if x.shape != v.shape or np.any(x < -1e-12) or np.any(x.sum(axis=0) > 1 + 1e-9):
            raise DomainError(f"allocation for seller {k} is infeasible")
        cols.append((v * x).sum(axis=1))
    return UtilityProfile(np.column_stack(cols), [np.asarray(x, dtype=float) for x in allocations], eps)


def ce_profile(spec: MarketSpec, ce: MarketEquilibrium | None = None, eps: float | None = None) -> UtilityProfile:
    ce = solve_market_ce(spec) if ce is None else ce
    return profile_from_allocations(spec, [ce.allocation[:, g] for g in spec.groups], eps)


def random_profile(spec: MarketSpec, rng, eps: float | None = None) -> UtilityProfile:
    """Feasible profile with each item split by a flat Dirichlet draw."""
    allocs = []
    for k in range(spec.n_sellers):
        v, _ = spec.submarket(k)
        allocs.append(rng.dirichlet(np.ones(spec.n_buyers), size=v.shape[1]).T)
    return profile_from_allocations(spec, allocs, eps)


def _check_floor(profile: UtilityProfile):
    slack = profile.floor_slack()
    if np.any(slack < -1e-12 * max(profile.eps, 1e-300)):
        i, k = np.unravel_index(np.argmin(slack), slack.shape)
        raise EpsilonFloorViolated(
            f"buyer {i} gets {profile.totals[i] - profile.utilities[i, k]:.3g} outside seller {k}, "
            f"below the floor {profile.eps:.3g}")


def revenue_profile(spec: MarketSpec, profile: UtilityProfile) -> np.ndarray:
    """Per-seller revenue ``R_k = sum_i B_i u_i(k) / u_i(K)``."""
    _check_floor(profile)
    U = profile.utilities
    share = U / U.sum(axis=1, keepdims=True)
    return spec.budgets @ share


def _opponents(U, k, eps):
    return np.maximum(U.sum(axis=1) - U[:, k], eps)


def _check_standing(spec: MarketSpec):
    few = np.flatnonzero(spec.interested.sum(axis=1) < 2)
    if few.size:
        raise DomainError(f"buyers {few.tolist()} value fewer than two sellers")


def _best_response(spec, k, U, eps, warm=None, iters=PNE_FW_ITERS, tol_fw=PNE_FW_TOL) -> SellerBestResponse:
    v, _ = spec.submarket(k)
    return frank_wolfe_revenue(v, spec.budgets, _opponents(U, k, eps), iters, tol_fw, warm=warm)


def solve_pne(spec: MarketSpec, tol: float | None = None, max_rounds: int = DEFAULT_MAX_ROUNDS,
              init: UtilityProfile | None = None, eps: float | None = None) -> UtilityProfile:
    """Pure Nash equilibrium of the seller game by cyclic best response.

    Sellers best respond in index order against the freshest profile and move
    a fraction ``step`` of the way to their best response. ``step`` starts
    at 1 (plain cyclic best response) and is halved whenever the largest
    best-response distance has not shrunk for ``STALL_ROUNDS`` rounds, which
    breaks the cycling seen when some buyer is nearly abandoned. The loop
    ends once no best response is farther than ``tol`` in utility and no
    seller can gain more than ``tol``; ``tol`` defaults to ``1e-7 * B``.
    Opponent masses are floored at ``eps`` inside each best response.
    """
    _check_standing(spec)
    eps = default_epsilon(spec) if eps is None else eps
    tol = 1e-7 * spec.total_budget if tol is None else tol
    if init is None:
        init = ce_profile(spec, eps=eps)
    U = np.array(init.utilities, dtype=float)
    allocs = [np.array(x, dtype=float) for x in init.allocations]
    warm = [None] * spec.n_sellers
    gains = np.full(spec.n_sellers, np.inf)
    step, best, stall = 1.0, np.inf, 0
    dist = np.inf
    for r in range(1, max_rounds + 1):
        dist = 0.0
        for k in range(spec.n_sellers):
            w = _opponents(U, k, eps)
            before = seller_revenue(spec.budgets, U[:, k], w)
            br = _best_response(spec, k, U, eps, warm[k])
            gains[k] = br.revenue - before
            dist = max(dist, float(np.max(np.abs(br.utilities - U[:, k]))))
            U[:, k] += step * (br.utilities - U[:, k])
            allocs[k] += step * (br.allocation - allocs[k])
            warm[k] = br
        if dist < tol and np.all(gains < tol):
            out = UtilityProfile(U, allocs, eps, gains.copy(), r)
            out.metadata.update(final_distance=dist, step=step)
            return out
        if dist < 0.95 * best:
            best, stall = dist, 0
        else:
            stall += 1
            if stall >= STALL_ROUNDS and step > MIN_STEP:
                step, best, stall = step / 2, dist, 0
    partial = UtilityProfile(U, allocs, eps, gains.copy(), max_rounds)
    raise NoConvergence("cyclic best response", max_rounds, float(max(dist, gains.max())), partial)


@dataclass
class PNEReport:
    revenues: np.ndarray
    best_revenues: np.ndarray
    improvements: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.improvements < self.tol))

    @property
    def max_improvement(self) -> float:
        return float(self.improvements.max())


def verify_pne(spec: MarketSpec, profile: UtilityProfile, tol: float | None = None) -> PNEReport:
    """Best-response gain available to every seller at ``profile``."""
    tol = 1e-7 * spec.total_budget if tol is None else tol
    U = profile.utilities
    rev, best = np.zeros(spec.n_sellers), np.zeros(spec.n_sellers)
    for k in range(spec.n_sellers):
        w = _opponents(U, k, profile.eps)
        rev[k] = seller_revenue(spec.budgets, U[:, k], w)
        best[k] = _best_response(spec, k, U, profile.eps).revenue
    return PNEReport(rev, best, best - rev, tol)


def first_order_gaps(spec: MarketSpec, profile: UtilityProfile) -> np.ndarray:
    """Linear-oracle improvement ``g . (s - u(k))`` of each seller's revenue at the profile."""
    U = profile.utilities
    out = np.zeros(spec.n_sellers)
    for k in range(spec.n_sellers):
        w = _opponents(U, k, profile.eps)
        g = spec.budgets * w / (U[:, k] + w) ** 2
        v, _ = spec.submarket(k)
        out[k] = float(g @ (seller_linear_oracle(v, g) - U[:, k]))
    return out


@dataclass
class FairnessReport:
    delta: float
    nsw_pne: float
    nsw_ce: float
    ratio: float
    tol: float = 1e-6

    @property
    def bound(self) -> float:
        return 1.0 - self.delta

    @property
    def passed(self) -> bool:
        return self.bound - self.tol <= self.ratio <= 1.0 + self.tol


def monopolization(spec: MarketSpec, ce: MarketEquilibrium) -> float:
    """Largest fraction of a buyer's budget spent on a single seller at the CE."""
    return float(np.max(ce.split / spec.budgets[:, None]))


def fairness(spec: MarketSpec, pne: UtilityProfile, tol: float = 1e-6,
             ce: MarketEquilibrium | None = None) -> FairnessReport:
    ce = solve_market_ce(spec) if ce is None else ce
    a, b = nsw(spec, pne.totals), nsw(spec, ce.utilities)
    return FairnessReport(monopolization(spec, ce), a, b, a / b, tol)


def saddle_value(spec: MarketSpec, u, w) -> float:
    """``f(u, w) = sum_{i,k} B_i u_i(k) / (u_i(k) + sum_{k' != k} w_i(k'))``."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    rest = w.sum(axis=1, keepdims=True) - w
    return float(np.sum(spec.budgets[:, None] * u / (u + rest)))


def minimax_residual(spec: MarketSpec, profile: UtilityProfile, samples: int = 100, seed: int = 0) -> float:
    """Largest violation of the saddle conditions ``f(u, u*) <= B <= f(u*, w)`` at ``u*``.

    The maximizing side is checked exactly through per-seller best responses
    (``f`` separates over sellers in its first argument); both sides are also
    probed at ``samples`` random feasible profiles.
    """
    B = spec.total_budget
    U = profile.utilities
    rng = np.random.default_rng(seed)
    worst = abs(saddle_value(spec, U, U) - B)
    br = np.column_stack([_best_response(spec, k, U, profile.eps).utilities for k in range(spec.n_sellers)])
    worst = max(worst, saddle_value(spec, br, U) - B)
    for _ in range(samples):
        R = random_profile(spec, rng, profile.eps).utilities
        worst = max(worst, saddle_value(spec, R, U) - B, B - saddle_value(spec, U, R))
    return float(worst)
