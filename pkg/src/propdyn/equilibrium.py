"""Pacing equilibria of first-price auto-bidding sub-markets, and market-wide CE.

Given budgets submitted to one seller, the first-price pacing equilibrium of
that seller's items is the competitive equilibrium of the sub-market seen as a
linear Fisher market. With additive boosts ``c`` the equilibrium solves a
modified Eisenberg-Gale program, ``max sum_i B_i ln u_i + sum_ij c_ij x_ij``.

Both solvers run a cheap first-order iteration (per-item proportional
response for the plain case, entropic mirror ascent for the boosted case)
and, periodically, guess the active edge set and solve the equilibrium
equations on that support with Newton's method. A candidate is returned
only after :func:`verify_pacing` accepts it, so the first-order iterations
decide *which* support is active and Newton supplies the digits.
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, NonPositiveUtility, TooLarge
from .market import MarketSpec

DELTA_ACTIVE = 1e-7
DEFAULT_TOL = 1e-9
DEFAULT_MAX_INNER = 100_000

def _quiet(fn):
    """Silence floating-point warnings from near-zero budgets; results are still verified."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", divide="ignore", invalid="ignore", under="ignore"):
            return fn(*args, **kwargs)
    return wrapper


_CHECKPOINTS = (0, 2, 5, 10, 20, 40, 80, 150, 300, 600, 1000)


@dataclass(frozen=True)
class PacingOutcome:
    """Pacing equilibrium of one sub-market.

    ``alphas`` is 0 for buyers that did not participate (zero budget or no
    positive value in the sub-market).
    """

    alphas: np.ndarray
    prices: np.ndarray
    allocation: np.ndarray
    utilities: np.ndarray
    spend: np.ndarray
    boosts: np.ndarray | None = None
    iterations: int = 0

    @property
    def participants(self) -> np.ndarray:
        return self.alphas > 0


@dataclass
class PacingReport:
    price_consistency: float
    winner_maximality: float
    market_clearing: float
    budget_depletion: float
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_residual <= self.tol

    @property
    def residuals(self) -> dict:
        return {
            "price_consistency": self.price_consistency,
            "winner_maximality": self.winner_maximality,
            "market_clearing": self.market_clearing,
            "budget_depletion": self.budget_depletion,
        }

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values())


def _participants(values, budgets):
    return (budgets > 0) & np.any(values > 0, axis=1)


@_quiet
def verify_pacing(outcome: PacingOutcome, values, budgets, boosts=None, tol=DEFAULT_TOL) -> PacingReport:
    """Residuals of the four (boosted) first-price pacing-equilibrium conditions.

    Prices are checked against ``max_i alpha_i v_ij + c_ij`` over participating
    buyers, winners must hold a maximal boosted bid, every item must be fully
    sold, and each participant's payment ``sum_j alpha_i v_ij x_ij`` must
    equal its budget (relative residual). Never raises.
    """
    v = np.asarray(values, dtype=float)
    B = np.asarray(budgets, dtype=float)
    c = np.zeros_like(v) if boosts is None else np.asarray(boosts, dtype=float)
    a = np.asarray(outcome.alphas, dtype=float)
    p = np.asarray(outcome.prices, dtype=float)
    x = np.asarray(outcome.allocation, dtype=float)
    part = a > 0
    if not part.any():
        clear = float(np.abs(x).max(initial=0.0))
        return PacingReport(float(np.abs(p).max(initial=0.0)), 0.0, clear, 0.0, tol)

    bids = a[:, None] * v
    boosted = bids + c
    top = boosted[part].max(axis=0)
    price_res = float(np.abs(p - top).max(initial=0.0))

    gap = np.where(part[:, None], p[None, :] - boosted, np.inf)
    active = x > DELTA_ACTIVE
    winner_res = float(np.where(active, np.maximum(gap, 0.0), 0.0).max(initial=0.0))

    clear_res = float(np.abs(x.sum(axis=0) - 1.0).max(initial=0.0))
    clear_res = max(clear_res, float(-x.min(initial=0.0)))

    pay = (bids * x).sum(axis=1)
    budget_res = float((np.abs(pay[part] - B[part]) / B[part]).max(initial=0.0))
    return PacingReport(price_res, winner_res, clear_res, budget_res, tol)


# -- Newton polish on a guessed support ---------------------------------------

def _newton_on_support(v, c, B, support, x0, a0, p0, max_iter=30, allow_lstsq=False):
    """Solve tightness, clearing and budget equations restricted to ``support``.

    Returns ``(x, alpha, p)`` on the reduced problem or ``None``. Singular
    systems (cyclic supports) fall back to least squares only when
    ``allow_lstsq`` is set, since that path is slow and rarely needed.
    """
    n, m = v.shape
    ei, ej = np.nonzero(support)
    s = ei.size
    if s == 0:
        return None
    ve, ce = v[ei, ej], c[ei, ej]
    z = np.concatenate([x0[ei, ej], a0, p0])
    J = np.zeros((s + m + n, s + n + m))
    rows = np.arange(s)
    J[rows, s + ei] = ve
    J[rows, s + n + ej] = -1.0
    J[s + ej, rows] = 1.0
    scale = max(float(B.max()), 1e-300)
    prev = np.inf
    for it in range(max_iter):
        xe, a, p = z[:s], z[s:s + n], z[s + n:]
        u = np.bincount(ei, weights=ve * xe, minlength=n)
        r = np.concatenate([
            a[ei] * ve + ce - p[ej],
            np.bincount(ej, weights=xe, minlength=m) - 1.0,
            (a * u - B) / B,
        ])
        res = np.abs(r).max()
        if res <= 1e-14 * max(1.0, scale):
            break
        if it >= 3 and res > 0.25 * prev:
            return None
        prev = res
        J[s + m + ei, rows] = a[ei] * ve / B[ei]
        J[s + m + np.arange(n), s + np.arange(n)] = u / B
        try:
            step = np.linalg.solve(J, -r)
            if not np.all(np.isfinite(step)) or np.abs(step).max() > 1e8 * (1.0 + np.abs(z).max()):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            if not allow_lstsq:
                return None
            try:
                step = np.linalg.lstsq(J, -r, rcond=None)[0]
            except np.linalg.LinAlgError:
                return None
        z = z + step
        if not np.all(np.isfinite(z)):
            return None
    else:
        return None
    xe, a, p = z[:s], z[s:s + n], z[s + n:]
    if np.any(a <= 0) or np.any(xe < -1e-10):
        return None
    x = np.zeros((n, m))
    x[ei, ej] = np.maximum(xe, 0.0)
    x /= x.sum(axis=0, keepdims=True)
    return x, a, p


def _support_candidates(x, a, v, c):
    """Plausible active sets, from allocation mass and from near-maximal boosted bids."""
    n, m = x.shape
    base = np.zeros_like(x, dtype=bool)
    base[np.argmax(x, axis=0), np.arange(m)] = True
    base[np.arange(n), np.argmax(x, axis=1)] = True
    bid = a[:, None] * v + c
    top = bid.max(axis=0)
    out = []
    for thr in (1e-2, 1e-4, 1e-6, 1e-9):
        out.append(base | (x > thr))
    for eta in (1e-3, 1e-5, 1e-7, 1e-10):
        tight = bid >= top - eta * np.maximum(np.abs(top), 1e-300)
        out.append(base | tight)
        out.append((x > 1e-9) & tight | base)
    uniq = []
    for sup in out:
        if not any(np.array_equal(sup, u) for u in uniq):
            uniq.append(sup)
    return uniq


def _try_polish(v, c, B, x, supports, tol, assemble, failed=None, t=0):
    u = (v * x).sum(axis=1)
    if np.any(u <= 0):
        return None
    a = B / u
    p = (a[:, None] * v + c).max(axis=0)
    for sup in supports:
        if failed is not None:
            # a support that failed from far away is retried once iterates are much closer
            key = np.packbits(sup).tobytes()
            if t < 4 * failed.get(key, -1) + 10:
                continue
            failed[key] = t
        sol = _newton_on_support(v, c, B, sup, x, a, p, allow_lstsq=t >= 300)
        if sol is None:
            continue
        out = assemble(*sol)
        if out is not None and out[1].passed:
            return out[0]
    return None


def _warm_polish(warm, P, L, v, c, B, tol, assemble):
    """Try supports adjacent to a previous solution's support."""
    xw = warm.allocation[np.ix_(P, L)]
    if not (np.all(np.any(xw > 0, axis=0)) and np.all((v * xw).sum(axis=1) > 0)):
        return None
    on = xw > 1e-12
    aw = warm.alphas[P]
    bid = aw[:, None] * v + c
    top = bid.max(axis=0)
    tight = bid >= top - 1e-9 * np.maximum(np.abs(top), 1e-300)
    base = np.zeros_like(on)
    base[np.argmax(xw, axis=0), np.arange(xw.shape[1])] = True
    supports = [on, on | tight, (on & tight) | base, xw > 1e-6]
    uniq = []
    for sup in supports:
        if not any(np.array_equal(sup, u) for u in uniq):
            uniq.append(sup)
    return _try_polish(v, c, B, xw, uniq, tol, assemble)


# -- sub-market solvers --------------------------------------------------------

def _split_problem(values, budgets, boosts):
    v = np.asarray(values, dtype=float)
    B = np.asarray(budgets, dtype=float)
    if v.ndim != 2 or B.shape != (v.shape[0],):
        raise ValueError(f"shape mismatch: values {v.shape}, budgets {B.shape}")
    if np.any(B < 0):
        raise ValueError("budgets must be non-negative")
    c = np.zeros_like(v) if boosts is None else np.asarray(boosts, dtype=float)
    if c.shape != v.shape:
        raise ValueError(f"boosts shape {c.shape} != values shape {v.shape}")
    if np.any(c < 0):
        raise ValueError("boosts must be non-negative")
    part = _participants(v, B)
    live = np.any(v[part] > 0, axis=0) if part.any() else np.zeros(v.shape[1], dtype=bool)
    return v, B, c, part, live


def _assembler(v, B, c, part, live, boosts, tol, iterations_ref):
    """Build a full-size outcome from a reduced solution and verify it."""
    n, m = v.shape
    P, L = np.flatnonzero(part), np.flatnonzero(live)
    dead = np.flatnonzero(~live)

    def assemble(xr, ar, pr=None):
        # prices are always recomputed from the multipliers
        x = np.zeros((n, m))
        alphas = np.zeros(n)
        alphas[P] = ar
        x[np.ix_(P, L)] = xr
        if dead.size and P.size:
            winners = P[np.argmax(c[np.ix_(P, dead)], axis=0)]
            x[winners, dead] = 1.0
        prices = np.zeros(m)
        if P.size:
            prices = (alphas[P, None] * v[P] + c[P]).max(axis=0)
        util = (v * x).sum(axis=1)
        spend = (alphas[:, None] * v * x).sum(axis=1)
        out = PacingOutcome(alphas, prices, x, util, spend,
                            None if boosts is None else c.copy(), iterations_ref[0])
        return out, verify_pacing(out, v, B, None if boosts is None else c, tol)

    return assemble


def _trivial(v, B, c, part, live, boosts, tol):
    assemble = _assembler(v, B, c, part, live, boosts, tol, [0])
    return assemble(np.zeros((0, 0)), np.zeros(0), np.zeros(0))[0]


@_quiet
def solve_submarket(values, budgets, tol=DEFAULT_TOL, max_inner=DEFAULT_MAX_INNER,
                    init_bids=None, warm: PacingOutcome | None = None) -> PacingOutcome:
    """First-price pacing equilibrium of one sub-market.

    ``init_bids`` (n x m, positive where values are positive) seeds the
    proportional-response iteration; ``warm`` is a previous outcome on a
    nearby budget vector whose support is tried first.
    """
    v, B, c, part, live = _split_problem(values, budgets, None)
    if not part.any() or not live.any():
        return _trivial(v, B, c, part, live, None, tol)
    P, L = np.flatnonzero(part), np.flatnonzero(live)
    vr, Br, cr = v[np.ix_(P, L)], B[P], c[np.ix_(P, L)]
    iters = [0]
    assemble_full = _assembler(v, B, c, part, live, None, tol, iters)

    if warm is not None:
        got = _warm_polish(warm, P, L, vr, cr, Br, tol, assemble_full)
        if got is not None:
            return got

    if init_bids is not None:
        bids = np.asarray(init_bids, dtype=float)[np.ix_(P, L)] * (vr > 0)
        if np.any(bids.sum(axis=1) <= 0):
            raise ValueError("init_bids must be positive on some positive-value item of every buyer")
        bids = bids * (Br / bids.sum(axis=1))[:, None]
    else:
        bids = Br[:, None] * vr / vr.sum(axis=1, keepdims=True)
    if warm is not None:
        xw = warm.allocation[np.ix_(P, L)] * (vr > 0)
        uw = (vr * xw).sum(axis=1)
        if np.all(uw > 0):
            warm_bids = Br[:, None] * vr * xw / uw[:, None]
            bids = 0.999 * warm_bids + 0.001 * bids

    t = 0
    failed = {}
    checkpoints = iter(itertools.chain(_CHECKPOINTS, itertools.count(2000, 1000)))
    next_check = next(checkpoints)
    while True:
        price = bids.sum(axis=0)
        x = bids / price
        if t >= next_check:
            iters[0] = t
            a = Br / (vr * x).sum(axis=1)
            raw, rep = assemble_full(x, a, None)
            if rep.passed:
                return raw
            got = _try_polish(vr, cr, Br, x, _support_candidates(x, a, vr, cr), tol, assemble_full,
                              failed, t)
            if got is not None:
                return got
            while next_check <= t:
                next_check = next(checkpoints)
        if t >= max_inner:
            break
        u = (vr * x).sum(axis=1)
        bids = (Br / u)[:, None] * vr * x
        t += 1
    a = Br / (vr * x).sum(axis=1)
    out, rep = assemble_full(x, a, None)
    raise NoConvergence("sub-market pacing equilibrium not reached", t, rep.max_residual, partial=out)


def _modified_eg(v, c, B, x):
    u = (v * x).sum(axis=1)
    if np.any(u <= 0):
        return -np.inf
    return float(B @ np.log(u) + (c * x).sum())


@_quiet
def solve_submarket_boosted(values, budgets, boosts, tol=DEFAULT_TOL, max_inner=DEFAULT_MAX_INNER,
                            init_alloc=None, warm: PacingOutcome | None = None) -> PacingOutcome:
    """Pacing equilibrium with additive boosts via the modified EG program.

    Maximizes ``sum_i B_i ln u_i + sum_ij c_ij x_ij`` over column-stochastic
    allocations with backtracked exponentiated-gradient steps; pacing
    multipliers follow from KKT as ``alpha_i = B_i / u_i``.
    """
    v, B, c, part, live = _split_problem(values, budgets, boosts)
    if not part.any() or not live.any():
        return _trivial(v, B, c, part, live, boosts, tol)
    P, L = np.flatnonzero(part), np.flatnonzero(live)
    vr, Br, cr = v[np.ix_(P, L)], B[P], c[np.ix_(P, L)]
    iters = [0]
    assemble_full = _assembler(v, B, c, part, live, c, tol, iters)

    if warm is not None:
        got = _warm_polish(warm, P, L, vr, cr, Br, tol, assemble_full)
        if got is not None:
            return got

    if init_alloc is not None:
        x = np.asarray(init_alloc, dtype=float)[np.ix_(P, L)]
        if np.any(x < 0) or np.any(x.sum(axis=0) <= 0):
            raise ValueError("init_alloc must be non-negative with positive column sums")
    else:
        x = np.ones_like(vr)
    if warm is not None:
        x = 0.999 * warm.allocation[np.ix_(P, L)] + 0.001 * x / x.sum(axis=0)
    x = x / x.sum(axis=0)
    if np.any((vr * x).sum(axis=1) <= 0):
        x = 0.5 * x + 0.5 / x.shape[0]

    F = _modified_eg(vr, cr, Br, x)
    eta = None
    t = 0
    failed = {}
    checkpoints = iter(itertools.chain(_CHECKPOINTS, itertools.count(2000, 1000)))
    next_check = next(checkpoints)
    while True:
        u = (vr * x).sum(axis=1)
        if t >= next_check:
            iters[0] = t
            a = Br / u
            raw, rep = assemble_full(x, a, None)
            if rep.passed:
                return raw
            got = _try_polish(vr, cr, Br, x, _support_candidates(x, a, vr, cr), tol, assemble_full,
                              failed, t)
            if got is not None:
                return got
            while next_check <= t:
                next_check = next(checkpoints)
        if t >= max_inner:
            break
        g = (Br / u)[:, None] * vr + cr
        if eta is None:
            eta = 1.0 / max(float(np.abs(g).max()), 1e-300)
        g = g - g.max(axis=0)
        for _ in range(60):
            y = x * np.exp(eta * g)
            y /= y.sum(axis=0)
            Fy = _modified_eg(vr, cr, Br, y)
            if Fy >= F - 1e-15 * max(1.0, abs(F)):
                break
            eta *= 0.5
        x, F = y, Fy
        eta *= 1.5
        t += 1
    a = Br / (vr * x).sum(axis=1)
    out, rep = assemble_full(x, a, None)
    raise NoConvergence("boosted pacing equilibrium not reached", t, rep.max_residual, partial=out)


# -- market-wide CE and welfare --------------------------------------------------

@dataclass(frozen=True)
class MarketEquilibrium:
    """Market-wide (boosted or plain) equilibrium, with per-seller aggregates."""

    prices: np.ndarray
    allocation: np.ndarray
    utility_matrix: np.ndarray   # n x K, u_i(k)
    split: np.ndarray            # n x K, B_i(k, *)
    outcome: PacingOutcome

    @property
    def utilities(self) -> np.ndarray:
        return self.utility_matrix.sum(axis=1)


def _per_seller(spec: MarketSpec, outcome: PacingOutcome, boosts=None) -> MarketEquilibrium:
    x = outcome.allocation
    c = np.zeros_like(spec.values) if boosts is None else np.asarray(boosts, dtype=float)
    pay = (outcome.prices[None, :] - c) * x
    util = spec.values * x
    K = spec.n_sellers
    U = np.zeros((spec.n_buyers, K))
    S = np.zeros((spec.n_buyers, K))
    for k, items in enumerate(spec.groups):
        U[:, k] = util[:, items].sum(axis=1)
        S[:, k] = pay[:, items].sum(axis=1)
    return MarketEquilibrium(outcome.prices, x, U, S, outcome)


def solve_market_ce(spec: MarketSpec, tol=DEFAULT_TOL, max_inner=DEFAULT_MAX_INNER) -> MarketEquilibrium:
    """Competitive equilibrium of the whole market (the EG optimum).

    The whole market is itself one linear Fisher market, so this is the
    sub-market solver applied to all items with the full budgets.
    ``split[i, k]`` is ``B_i(k, *)``, the money buyer ``i`` spends on seller ``k``.
    """
    out = solve_submarket(spec.values, spec.budgets, tol, max_inner)
    return _per_seller(spec, out)


def solve_market_boosted(spec: MarketSpec, boosts=None, tol=DEFAULT_TOL,
                         max_inner=DEFAULT_MAX_INNER) -> MarketEquilibrium:
    """Market-wide pacing equilibrium with additive boosts (modified EG on all items)."""
    c = spec.boosts if boosts is None else boosts
    if c is None:
        raise ValueError("no boosts given")
    out = solve_submarket_boosted(spec.values, spec.budgets, c, tol, max_inner)
    return _per_seller(spec, out, c)


def _budgets(spec_or_budgets):
    if isinstance(spec_or_budgets, MarketSpec):
        return spec_or_budgets.budgets
    return np.asarray(spec_or_budgets, dtype=float)


def eg_objective(spec, utilities) -> float:
    """``sum_i B_i ln u_i``; ``spec`` may be a MarketSpec or a budget vector."""
    B = _budgets(spec)
    u = np.asarray(utilities, dtype=float)
    if u.ndim == 2:
        u = u.sum(axis=1)
    if np.any(~(u > 0)):
        raise NonPositiveUtility(f"utilities must be positive, got {u.tolist()}")
    return float(B @ np.log(u))


def nsw(spec, utilities) -> float:
    """Budget-weighted geometric mean of utilities, computed in log space."""
    B = _budgets(spec)
    return float(np.exp(eg_objective(B, utilities) / B.sum()))


# -- brute-force oracle -------------------------------------------------------------

def simplex_grid(n: int, resolution: int) -> np.ndarray:
    """All points of the ``n``-simplex with coordinates in ``{0, 1/r, ..., 1}``."""
    pts = []
    for bars in itertools.combinations(range(resolution + n - 1), n - 1):
        prev, row = -1, []
        for b in bars:
            row.append(b - prev - 1)
            prev = b
        row.append(resolution + n - 2 - prev)
        pts.append(row)
    return np.array(pts, dtype=float) / resolution


GRID_MAX_CELLS = 6
GRID_MAX_POINTS = 4_000_000


def grid_search_eg(spec: MarketSpec, resolution: int = 100):
    """Exhaustive EG maximization over a per-item simplex grid (desk-scale oracle).

    Returns ``(allocation, objective)``.
    """
    v, B = spec.values, spec.budgets
    n, m = v.shape
    if n * m > GRID_MAX_CELLS:
        raise TooLarge(f"n*m = {n * m} exceeds {GRID_MAX_CELLS}")
    if n == 1:
        x = np.ones((1, m))
        return x, float(B[0] * np.log(v.sum()))
    cols = simplex_grid(n, resolution)          # (P, n)
    if float(len(cols)) ** m > GRID_MAX_POINTS:
        raise TooLarge(f"{len(cols)}^{m} grid points exceed {GRID_MAX_POINTS}")
    U = np.zeros((1, n))
    idx = np.zeros((1, 0), dtype=np.int64)
    for j in range(m):
        U = (U[:, None, :] + cols[None, :, :] * v[:, j]).reshape(-1, n)
        idx = np.concatenate([np.repeat(idx, len(cols), axis=0),
                              np.tile(np.arange(len(cols)), len(idx))[:, None]], axis=1)
    with np.errstate(divide="ignore"):
        obj = np.log(U) @ B
    best = int(np.argmax(obj))
    x = cols[idx[best]].T
    return x, float(obj[best])


def eg_discretization_bound(spec: MarketSpec, utilities, resolution: int) -> float:
    """Upper bound on ``EG(opt) - EG(best grid point)`` for :func:`grid_search_eg`.

    Rounding an optimal column to the grid moves each entry by less than
    ``1/r``, so buyer ``i`` loses at most ``sum_j v_ij / r`` utility.
    """
    u = np.asarray(utilities, dtype=float)
    d = spec.values.sum(axis=1) / resolution
    if np.any(u <= d):
        return np.inf
    return float(spec.budgets @ np.log(u / (u - d)))


def grid_resolution(n: int, m: int, max_points: int = GRID_MAX_POINTS, cap: int = 400) -> int:
    """Largest resolution (at most ``cap``) whose EG grid has at most ``max_points`` points."""
    r = 1
    while r < cap and math.comb(r + n, n - 1) ** m <= max_points:
        r += 1
    return r
