"""Market data model: specs, validation, random instances and (de)serialization.

A market has ``n`` buyers with budgets ``B_i``, ``m`` unit-supply divisible
items with linear values ``v[i, j]``, and a partition of the items among ``K``
sellers given as an item -> seller map.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import InfeasibleShape, InvalidMarket, ParseError

VALUE_DISTRIBUTIONS = ("uniform01", "lognormal", "sparse")


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MarketSpec:
    budgets: np.ndarray
    values: np.ndarray
    seller_of: np.ndarray
    boosts: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "budgets", _frozen(self.budgets))
        object.__setattr__(self, "values", _frozen(np.atleast_2d(self.values)))
        object.__setattr__(self, "seller_of", _frozen(self.seller_of, dtype=np.int64))
        if self.boosts is not None:
            object.__setattr__(self, "boosts", _frozen(np.atleast_2d(self.boosts)))

    def __eq__(self, other):
        if not isinstance(other, MarketSpec):
            return NotImplemented
        if (self.boosts is None) != (other.boosts is None):
            return False
        same = (
            np.array_equal(self.budgets, other.budgets)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.seller_of, other.seller_of)
        )
        if self.boosts is not None:
            same = same and np.array_equal(self.boosts, other.boosts)
        return bool(same)

    __hash__ = None

    @property
    def n_buyers(self) -> int:
        return self.values.shape[0]

    @property
    def n_items(self) -> int:
        return self.values.shape[1]

    @property
    def n_sellers(self) -> int:
        return int(self.seller_of.max()) + 1 if self.seller_of.size else 0

    @property
    def total_budget(self) -> float:
        return float(self.budgets.sum())

    @cached_property
    def groups(self) -> tuple[np.ndarray, ...]:
        """Item indices owned by each seller, in increasing item order."""
        return tuple(
            _frozen(np.flatnonzero(self.seller_of == k), dtype=np.int64)
            for k in range(self.n_sellers)
        )

    @cached_property
    def seller_values(self) -> np.ndarray:
        """``n x K`` matrix of the total value each buyer has for each seller."""
        out = np.zeros((self.n_buyers, self.n_sellers))
        for k, items in enumerate(self.groups):
            out[:, k] = self.values[:, items].sum(axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def interested(self) -> np.ndarray:
        """Boolean ``n x K`` mask: buyer ``i`` values some item of seller ``k``."""
        out = self.seller_values > 0
        out.setflags(write=False)
        return out

    def submarket(self, k: int):
        """Values (and boosts, possibly ``None``) restricted to seller ``k``'s items."""
        items = self.groups[k]
        c = None if self.boosts is None else self.boosts[:, items]
        return self.values[:, items], c

    def with_boosts(self, boosts) -> "MarketSpec":
        return MarketSpec(self.budgets, self.values, self.seller_of, boosts)


def validate(spec: MarketSpec) -> MarketSpec:
    """Check every structural invariant, raising :class:`InvalidMarket` listing all violations."""
    problems = []
    n, m = spec.values.shape
    if spec.budgets.shape != (n,):
        problems.append(("ShapeMismatch", f"budgets has shape {spec.budgets.shape}, expected ({n},)"))
    if spec.seller_of.shape != (m,):
        problems.append(("ShapeMismatch", f"seller_of has shape {spec.seller_of.shape}, expected ({m},)"))
    if spec.boosts is not None and spec.boosts.shape != (n, m):
        problems.append(("ShapeMismatch", f"boosts has shape {spec.boosts.shape}, expected ({n}, {m})"))
    if problems:
        raise InvalidMarket(problems)

    for i in np.flatnonzero(~(spec.budgets > 0)):
        problems.append(("ZeroBudget", f"buyer {i} has budget {spec.budgets[i]!r}"))
    if not np.all(np.isfinite(spec.values)) or np.any(spec.values < 0):
        problems.append(("NegativeValue", "values must be finite and non-negative"))
    for j in np.flatnonzero(~np.any(spec.values > 0, axis=0)):
        problems.append(("OrphanItem", f"item {j} has no buyer with positive value"))
    if np.any(spec.seller_of < 0):
        problems.append(("EmptySellerGroup", "negative seller index"))
    else:
        counts = np.bincount(spec.seller_of, minlength=spec.n_sellers)
        for k in np.flatnonzero(counts == 0):
            problems.append(("EmptySellerGroup", f"seller {k} owns no items"))
    if spec.boosts is not None and (not np.all(np.isfinite(spec.boosts)) or np.any(spec.boosts < 0)):
        problems.append(("NegativeBoost", "boosts must be finite and non-negative"))
    if problems:
        raise InvalidMarket(problems)
    return spec


def _sample_values(rng, n, m, distribution, p):
    if distribution == "uniform01":
        return rng.random((n, m))
    if distribution == "lognormal":
        return rng.lognormal(0.0, 1.0, size=(n, m))
    if distribution == "sparse":
        v = rng.random((n, m))
        v[rng.random((n, m)) < p] = 0.0
        return v
    raise ValueError(f"unknown value distribution {distribution!r}")


def generate(seed: int, n: int, m: int, K: int, distribution: str = "uniform01",
             sparsity: float = 0.5) -> MarketSpec:
    """Deterministic random market.

    Budgets are uniform on [0.5, 1.5]. For ``"sparse"`` each value is zeroed
    with probability ``sparsity``; all-zero item columns (and buyer rows) are
    redrawn until they contain a positive entry.
    """
    if n < 1 or m < 1 or K < 1:
        raise InfeasibleShape(f"need n, m, K >= 1, got n={n}, m={m}, K={K}")
    if m < K:
        raise InfeasibleShape(f"{m} items cannot be split among {K} sellers")
    rng = np.random.default_rng(seed)
    budgets = rng.uniform(0.5, 1.5, size=n)
    values = _sample_values(rng, n, m, distribution, sparsity)
    for _ in range(10_000):
        dead_cols = np.flatnonzero(~np.any(values > 0, axis=0))
        dead_rows = np.flatnonzero(~np.any(values > 0, axis=1))
        if not dead_cols.size and not dead_rows.size:
            break
        for j in dead_cols:
            values[:, j] = _sample_values(rng, n, 1, distribution, sparsity)[:, 0]
        for i in dead_rows:
            values[i, :] = _sample_values(rng, 1, m, distribution, sparsity)[0]
    else:  # pragma: no cover - needs sparsity ~ 1
        raise InfeasibleShape("could not draw a value matrix without empty rows/columns")
    seller_of = rng.permutation(np.arange(m) % K)
    return MarketSpec(budgets, values, seller_of)


# -- serialization ----------------------------------------------------------

def _enc(x: float) -> str:
    return format(float(x), ".17g")


def to_dict(spec: MarketSpec) -> dict:
    d = {
        "budgets": [_enc(b) for b in spec.budgets],
        "values": [[_enc(v) for v in row] for row in spec.values],
        "seller_of": [int(k) for k in spec.seller_of],
    }
    if spec.boosts is not None:
        d["boosts"] = [[_enc(c) for c in row] for row in spec.boosts]
    return d


def _real(x, where):
    if isinstance(x, bool) or not isinstance(x, (int, float, str)):
        raise ParseError(f"expected a real number, got {x!r}", field=where)
    try:
        return float(x)
    except ValueError:
        raise ParseError(f"cannot parse {x!r} as a real number", field=where) from None


def _vector(obj, name):
    if not isinstance(obj, list):
        raise ParseError("expected a list", field=name)
    return [_real(x, f"{name}[{i}]") for i, x in enumerate(obj)]


def _matrix(obj, name):
    if not isinstance(obj, list) or not all(isinstance(r, list) for r in obj):
        raise ParseError("expected a list of lists", field=name)
    rows = [_vector(r, f"{name}[{i}]") for i, r in enumerate(obj)]
    if len({len(r) for r in rows}) > 1:
        raise ParseError("rows have different lengths", field=name)
    return rows


def from_dict(d: dict) -> MarketSpec:
    if not isinstance(d, dict):
        raise ParseError("top level must be an object")
    for key in ("budgets", "values", "seller_of"):
        if key not in d:
            raise ParseError("missing required field", field=key)
    budgets = _vector(d["budgets"], "budgets")
    values = _matrix(d["values"], "values")
    if not isinstance(d["seller_of"], list):
        raise ParseError("expected a list", field="seller_of")
    seller_of = []
    for j, k in enumerate(d["seller_of"]):
        if isinstance(k, bool) or not isinstance(k, int):
            raise ParseError(f"expected an integer, got {k!r}", field=f"seller_of[{j}]")
        seller_of.append(k)
    boosts = _matrix(d["boosts"], "boosts") if d.get("boosts") is not None else None
    if not values or len(values[0]) == 0:
        raise ParseError("empty value matrix", field="values")
    return MarketSpec(np.array(budgets), np.array(values), np.array(seller_of, dtype=np.int64),
                      None if boosts is None else np.array(boosts))


def dumps(spec: MarketSpec) -> str:
    return json.dumps(to_dict(spec), indent=1)


def loads(text: str) -> MarketSpec:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno) from None
    return from_dict(d)


def save(spec: MarketSpec, path) -> None:
    Path(path).write_text(dumps(spec) + "\n")


def load(path) -> MarketSpec:
    return loads(Path(path).read_text())


def load_boosts(path) -> np.ndarray:
    """Read a boost matrix from either a bare ``[[...]]`` list or an object with a ``boosts`` field."""
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno) from None
    if isinstance(d, dict):
        if "boosts" not in d:
            raise ParseError("missing required field", field="boosts")
        d = d["boosts"]
    return np.array(_matrix(d, "boosts"))
