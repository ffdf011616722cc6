"""Deviation analysis for buyers and sellers.

Buyer side: with opponents' splits frozen, compare the split that equalizes
the buyer's bang-per-buck ``u_i(k) / B_i(k)`` across sellers against a brute
force best response over the budget simplex (the equalized split is
guaranteed at least half the optimum).

Seller side: additive boosts let a seller implement any market-clearing
allocation of its items as a boosted pacing equilibrium, so its choice is
effectively a point of its feasible utility polytope. Against fixed
opponents the revenue ``sum_i B_i u_i / (u_i + w_i)`` is concave in that
point and is maximized by Frank-Wolfe with an exact linear oracle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .equilibrium import (
    DELTA_ACTIVE,
    PacingOutcome,
    simplex_grid,
    solve_market_ce,
    solve_submarket,
    verify_pacing,
)
from .errors import DomainError, EpsilonFloorViolated, InfeasibleTarget, NoConvergence, TooLarge
from .market import MarketSpec

BUYER_APPROX_BOUND = 2.0
SELLER_RATIO_BOUND = 5.0
DEFAULT_RESOLUTION = 200
DEFAULT_FW_ITERS = 5_000
DEFAULT_TOL_FW = 1e-7
DROP_SHARE = 1e-12


def default_epsilon(spec_or_budgets) -> float:
    B = spec_or_budgets.budgets if isinstance(spec_or_budgets, MarketSpec) else np.asarray(spec_or_budgets)
    return 1e-6 * float(np.min(B))


# -- buyer side --------------------------------------------------------------------

def _column_budgets(others, buyer, k, amount):
    b = np.array(others[:, k], dtype=float)
    b[buyer] = amount
    return b


def buyer_seller_utilities(spec: MarketSpec, buyer: int, row, others, warm=None):
    """Utility the buyer gets from each seller when it submits ``row``; opponents submit ``others``.

    Returns ``(utilities, outcomes)``; sellers the buyer does not value yield 0 and ``None``.
    """
    others = np.asarray(others, dtype=float)
    u = np.zeros(spec.n_sellers)
    outs = [None] * spec.n_sellers
    for k in range(spec.n_sellers):
        if not spec.interested[buyer, k] or row[k] <= 0:
            continue
        v, _ = spec.submarket(k)
        w = None if warm is None else warm[k]
        o = solve_submarket(v, _column_budgets(others, buyer, k, row[k]), warm=w)
        u[k] = o.utilities[buyer]
        outs[k] = o
    return u, outs


def bang_per_buck_spread(row, utilities) -> float:
    row = np.asarray(row, dtype=float)
    on = row > 0
    if on.sum() <= 1:
        return 0.0
    bpb = np.asarray(utilities)[on] / row[on]
    return float(bpb.max() - bpb.min())


def buyer_equalized_split(spec: MarketSpec, buyer: int, others, tol: float = 1e-9,
                          max_iter: int = 100_000) -> np.ndarray:
    """Buyer's split with bang-per-buck equalized across sellers, opponents fixed.

    Iterates the single-buyer proportional update ``B_i(k) <- B_i u_i(k) / u_i(K)``
    until the spread of ``u_i(k) / B_i(k)`` over used sellers drops below ``tol``.
    Sellers whose share decays below ``DROP_SHARE`` are dropped, since their
    equalized amount is zero and the update only approaches it slowly.
    """
    mask = spec.interested[buyer]
    if not mask.any():
        raise DomainError(f"buyer {buyer} values nothing")
    Bi = float(spec.budgets[buyer])
    row = np.where(mask, Bi / mask.sum(), 0.0)
    if mask.sum() == 1:
        return row
    warm = None
    spread = np.inf
    for t in range(max_iter):
        u, outs = buyer_seller_utilities(spec, buyer, row, others, warm)
        spread = bang_per_buck_spread(row, u)
        if spread < tol:
            return row
        warm = outs
        share = u / u.sum()
        share[share < DROP_SHARE] = 0.0
        row = Bi * share / share.sum()
    raise NoConvergence("bang-per-buck equalization", max_iter, spread)


def utility_curve(spec: MarketSpec, buyer: int, seller: int, others, grid) -> np.ndarray:
    """``u_i(k)`` as a function of the buyer's budget on one seller, along ``grid``."""
    v, _ = spec.submarket(seller)
    out = np.zeros(len(grid))
    warm = None
    for l, b in enumerate(grid):
        if b <= 0:
            continue
        o = solve_submarket(v, _column_budgets(np.asarray(others, dtype=float), buyer, seller, b), warm=warm)
        out[l] = o.utilities[buyer]
        warm = o
    return out


@dataclass
class GridResponse:
    row: np.ndarray
    utility: float
    slack: float        # largest utility change across one grid cell, summed over sellers


def buyer_best_response_grid(spec: MarketSpec, buyer: int, others,
                             resolution: int = DEFAULT_RESOLUTION) -> GridResponse:
    """Exhaustive best response over the budget simplex at the given resolution (K <= 3)."""
    if resolution < 10:
        raise ValueError("resolution must be >= 10")
    sellers = np.flatnonzero(spec.interested[buyer])
    if sellers.size > 3:
        raise TooLarge(f"{sellers.size} sellers; exhaustive grid supports at most 3")
    Bi = float(spec.budgets[buyer])
    row = np.zeros(spec.n_sellers)
    if sellers.size == 1:
        row[sellers[0]] = Bi
        u, _ = buyer_seller_utilities(spec, buyer, row, others)
        return GridResponse(row, float(u.sum()), 0.0)
    levels = Bi * np.arange(resolution + 1) / resolution
    curves = np.array([utility_curve(spec, buyer, k, others, levels) for k in sellers])
    pts = np.rint(simplex_grid(sellers.size, resolution) * resolution).astype(np.int64)
    total = curves[np.arange(sellers.size)[None, :], pts].sum(axis=1)
    best = int(np.argmax(total))
    row[sellers] = levels[pts[best]]
    slack = float(np.diff(curves, axis=1).max(axis=1).clip(min=0).sum())
    return GridResponse(row, float(total[best]), slack)


@dataclass
class BuyerDeviationReport:
    buyer: int
    proportional_split: np.ndarray
    proportional_utility: float
    best_split: np.ndarray
    best_utility: float
    ratio: float
    spread: float
    slack: float
    bound: float = BUYER_APPROX_BOUND

    @property
    def passed(self) -> bool:
        return (self.best_utility <= self.bound * self.proportional_utility + self.slack + 1e-9
                and self.ratio >= 1 - 1e-6)


def buyer_audit(spec: MarketSpec, buyer: int, others, resolution: int = DEFAULT_RESOLUTION,
                tol: float = 1e-9) -> BuyerDeviationReport:
    """Equalized split versus grid best response for one buyer.

    The best response is the better of the grid maximizer and the equalized
    split itself, so ``ratio >= 1`` up to solver accuracy.
    """
    others = np.asarray(others, dtype=float)
    prop = buyer_equalized_split(spec, buyer, others, tol)
    u_prop, _ = buyer_seller_utilities(spec, buyer, prop, others)
    grid = buyer_best_response_grid(spec, buyer, others, resolution)
    best_row, best_u = grid.row, grid.utility
    if u_prop.sum() > best_u:
        best_row, best_u = prop, float(u_prop.sum())
    up = float(u_prop.sum())
    return BuyerDeviationReport(buyer, prop, up, best_row, best_u, best_u / up,
                                bang_per_buck_spread(prop, u_prop), grid.slack)


def _project_simplex(y, total):
    """Euclidean projection of ``y`` onto ``{b >= 0, sum b = total}``."""
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, y.size + 1)
    rho = np.count_nonzero(u - css / idx > 0)
    theta = css[rho - 1] / rho
    return np.maximum(y - theta, 0.0)


def buyer_best_response_one_item(spec: MarketSpec, buyer: int, others, tol: float = 1e-10,
                                 max_iter: int = 200_000) -> np.ndarray:
    """Optimal split when every seller owns a single item (concave problem).

    With ``o_k`` the opponents' money on seller ``k`` the buyer maximizes
    ``sum_k v_k b_k / (b_k + o_k)`` over its budget simplex; solved by
    projected gradient ascent until the KKT gradient spread is below ``tol``.
    """
    if any(len(g) != 1 for g in spec.groups):
        raise ValueError("every seller must own exactly one item")
    order = np.array([g[0] for g in spec.groups])
    v = spec.values[buyer, order]
    others = np.asarray(others, dtype=float)
    o = others.sum(axis=0) - others[buyer]
    Bi = float(spec.budgets[buyer])
    live = v > 0
    if np.any(o[live] <= 0):
        raise DomainError("every valued seller needs positive opponent money")
    b = np.zeros(spec.n_sellers)
    if live.sum() == 1:
        b[live] = Bi
        return b
    vl, ol = v[live], o[live]
    x = np.full(vl.size, Bi / vl.size)
    step = 1.0 / np.max(2 * vl / ol**2)
    for _ in range(max_iter):
        g = vl * ol / (x + ol) ** 2
        on = x > 1e-15 * Bi
        top = g[on].max()
        if top - g[on].min() < tol and np.all(g[~on] <= top + tol):
            break
        x = _project_simplex(x + step * g, Bi)
    else:
        raise NoConvergence("one-item best response", max_iter, top - g[on].min())
    b[live] = x
    return b


def two_by_two_curve(b: float) -> float:
    """Closed-form utility of buyer 2 in the 2x2 sub-market ``v = [[2, 1], [1, 2]]``, buyer 1 budget 2."""
    if b < 0:
        raise ValueError("budget must be non-negative")
    if b <= 1:
        return 6 * b / (b + 2)
    if b <= 4:
        return 2.0
    return 3 - 6 / (b + 2)


TWO_BY_TWO_VALUES = np.array([[2.0, 1.0], [1.0, 2.0]])
TWO_BY_TWO_OPPONENT_BUDGET = 2.0


# -- seller side ------------------------------------------------------------------------

def synthesize_boosts(values, budgets, target, margin: float = 1e-6):
    """Pacing multipliers and boosts that make ``target`` the boosted pacing equilibrium.

    ``alpha_i = B_i / u_i(target)``; on each item every target winner gets the
    same boosted bid, which beats every loser by ``margin * max bid``. Columns
    are shifted so the smallest boost is 0.
    """
    v = np.asarray(values, dtype=float)
    B = np.asarray(budgets, dtype=float)
    x = np.asarray(target, dtype=float)
    if x.shape != v.shape or np.any(x < -1e-12):
        raise InfeasibleTarget("target must be a non-negative allocation of the same shape")
    if np.any(np.abs(x.sum(axis=0) - 1.0) > 1e-9):
        raise InfeasibleTarget("target does not clear the market")
    part = B > 0
    if np.any(x[~part] > DELTA_ACTIVE):
        raise InfeasibleTarget("target gives items to a buyer with zero budget")
    u = (v * x).sum(axis=1)
    if np.any(u[part] <= 0):
        raise InfeasibleTarget("target gives zero value to a buyer with positive budget")
    alphas = np.zeros_like(B)
    alphas[part] = B[part] / u[part]
    bids = alphas[:, None] * v
    win = (x > DELTA_ACTIVE) & part[:, None]
    top = bids[part].max(axis=0)
    mu = margin * max(float(top.max()), 1e-300)
    level = top + mu
    c = np.where(win, level[None, :] - bids, 0.0)
    c[~part] = 0.0
    c -= np.where(part[:, None], c, np.inf).min(axis=0)
    c[~part] = 0.0
    return alphas, np.maximum(c, 0.0)


def boosted_outcome(values, target, alphas, boosts) -> PacingOutcome:
    """The pacing outcome induced by a target allocation and synthesized boosts."""
    v = np.asarray(values, dtype=float)
    x = np.asarray(target, dtype=float)
    part = alphas > 0
    prices = (alphas[part, None] * v[part] + boosts[part]).max(axis=0)
    u = (v * x).sum(axis=1)
    spend = (alphas[:, None] * v * x).sum(axis=1)
    return PacingOutcome(alphas, prices, x, u, spend, boosts)


def seller_linear_oracle(values, weights, return_assignment: bool = False):
    """Exact maximizer of ``sum_i g_i u_i`` over a seller's feasible utilities.

    Each item goes wholly to ``argmax_i g_i v_ij`` (lowest index on ties).
    """
    v = np.asarray(values, dtype=float)
    g = np.asarray(weights, dtype=float)
    if np.any(g < 0):
        raise ValueError("weights must be non-negative")
    owner = np.argmax(g[:, None] * v, axis=0)
    u = np.bincount(owner, weights=v[owner, np.arange(v.shape[1])], minlength=v.shape[0])
    if return_assignment:
        return u, owner
    return u


def seller_revenue(budgets, u, w) -> float:
    B = np.asarray(budgets, dtype=float)
    return float(np.sum(B * u / (u + w)))


@dataclass
class SellerBestResponse:
    utilities: np.ndarray
    revenue: float
    gap: float
    iterations: int
    allocation: np.ndarray          # witness allocation, n x m_k
    revenue_history: np.ndarray
    active: dict                    # vertex (item -> owner tuple) -> convex weight
    tol_fw: float = DEFAULT_TOL_FW

    @property
    def converged(self) -> bool:
        return self.gap < self.tol_fw


def frank_wolfe_revenue(values, budgets, w, iters: int = DEFAULT_FW_ITERS, tol_fw: float = DEFAULT_TOL_FW,
                        init_owner=None, away_steps: bool = True, warm=None) -> SellerBestResponse:
    """Maximize ``sum_i B_i u_i / (u_i + w_i)`` over a seller's utility polytope.

    Frank-Wolfe with exact line search along each direction; away steps
    (on by default) give linear convergence on the polytope. Stops when the
    Frank-Wolfe duality gap is below ``tol_fw``. ``warm`` is an earlier
    result whose active vertex set seeds the iteration.
    """
    v = np.asarray(values, dtype=float)
    B = np.asarray(budgets, dtype=float)
    w = np.asarray(w, dtype=float)
    n, m = v.shape
    cols = np.arange(m)

    def vertex(owner):
        return np.bincount(owner, weights=v[owner, cols], minlength=n)

    def grad(u):
        return B * w / (u + w) ** 2

    if warm is not None:
        active = {key: [vertex(np.array(key)), lam] for key, lam in warm.active.items()}
    else:
        if init_owner is None:
            _, owner = seller_linear_oracle(v, grad(np.zeros(n)), return_assignment=True)
        else:
            owner = np.asarray(init_owner, dtype=np.int64)
        active = {tuple(owner.tolist()): [vertex(owner), 1.0]}
    u = sum(entry[1] * entry[0] for entry in active.values())
    history = [seller_revenue(B, u, w)]
    gap = np.inf
    it = 0
    for it in range(1, iters + 1):
        g = grad(u)
        s_u, s_owner = seller_linear_oracle(v, g, return_assignment=True)
        gap = float(g @ (s_u - u))
        if gap < tol_fw:
            break
        d, gmax, away_key = s_u - u, 1.0, None
        if away_steps and len(active) > 1:
            key_a = min(active, key=lambda k: float(g @ active[k][0]))
            a_u, lam = active[key_a]
            if float(g @ (u - a_u)) > gap and lam < 1.0:
                d, gmax, away_key = u - a_u, lam / (1.0 - lam), key_a

        def dphi(gamma):
            return float(np.sum(B * w * d / (u + gamma * d + w) ** 2))

        if dphi(gmax) >= 0:
            gamma = gmax
        elif dphi(0.0) <= 0:
            gamma = 0.0
        else:
            gamma = brentq(dphi, 0.0, gmax, xtol=1e-16, rtol=4 * np.finfo(float).eps)
        if gamma <= 0:
            break
        if away_key is None:
            for k in active:
                active[k][1] *= 1 - gamma
            key_s = tuple(s_owner.tolist())
            if key_s in active:
                active[key_s][1] += gamma
            else:
                active[key_s] = [s_u, gamma]
            if gamma >= 1.0:
                active = {key_s: [s_u, 1.0]}
        else:
            for k in active:
                active[k][1] *= 1 + gamma
            active[away_key][1] -= gamma
            if gamma >= gmax or active[away_key][1] <= 1e-15:
                del active[away_key]
        total = sum(entry[1] for entry in active.values())
        for k in active:
            active[k][1] /= total
        u = sum(entry[1] * entry[0] for entry in active.values())
        history.append(seller_revenue(B, u, w))
    x = np.zeros((n, m))
    for key, (_, lam) in active.items():
        x[np.array(key), cols] += lam
    weights = {key: entry[1] for key, entry in active.items()}
    return SellerBestResponse(u, seller_revenue(B, u, w), gap, it, x, np.array(history), weights, tol_fw)


def opponent_mass(utility_matrix, seller: int) -> np.ndarray:
    U = np.asarray(utility_matrix, dtype=float)
    return U.sum(axis=1) - U[:, seller]


def seller_best_response(spec: MarketSpec, seller: int, opponent_utilities, iters: int = DEFAULT_FW_ITERS,
                         tol_fw: float = DEFAULT_TOL_FW, eps: float | None = None,
                         init_owner=None, warm=None) -> SellerBestResponse:
    """Best response of ``seller`` against the other sellers' utility columns.

    ``opponent_utilities`` is an ``n x K`` utility matrix (column ``seller``
    is ignored) or directly the per-buyer opponent mass ``w``.
    """
    eps = default_epsilon(spec) if eps is None else eps
    U = np.asarray(opponent_utilities, dtype=float)
    w = opponent_mass(U, seller) if U.ndim == 2 else U
    if np.any(w < eps * (1 - 1e-12)):
        raise EpsilonFloorViolated(f"opponent utilities {w.tolist()} fall below the floor {eps}")
    v, _ = spec.submarket(seller)
    return frank_wolfe_revenue(v, spec.budgets, w, iters, tol_fw, init_owner, warm=warm)


@dataclass
class SellerDeviationReport:
    seller: int
    ce_revenue: float
    best_revenue: float
    ratio: float
    best_utilities: np.ndarray
    gap: float
    bound: float = SELLER_RATIO_BOUND
    tol: float = 1e-6

    @property
    def passed(self) -> bool:
        return 1 - self.tol <= self.ratio <= self.bound + self.tol


def incentive_ratio(spec: MarketSpec, seller: int, tol: float = 1e-6, ce=None,
                    iters: int = DEFAULT_FW_ITERS, tol_fw: float = DEFAULT_TOL_FW,
                    eps: float | None = None) -> SellerDeviationReport:
    """Revenue gain available to one seller by deviating from the CE allocation.

    Opponent masses ``w_i`` below the epsilon floor are raised to it.
    """
    if spec.n_sellers < 2:
        raise ValueError("need at least two sellers")
    ce = solve_market_ce(spec) if ce is None else ce
    eps = default_epsilon(spec) if eps is None else eps
    w = np.maximum(opponent_mass(ce.utility_matrix, seller), eps)
    r_star = float(ce.split[:, seller].sum())
    br = seller_best_response(spec, seller, w, iters, tol_fw, eps)
    return SellerDeviationReport(seller, r_star, br.revenue, br.revenue / r_star, br.utilities, br.gap,
                                 tol=tol)


def verify_synthesized(values, budgets, target, alphas, boosts, tol=1e-9):
    return verify_pacing(boosted_outcome(values, target, alphas, boosts), values, budgets, boosts, tol)
