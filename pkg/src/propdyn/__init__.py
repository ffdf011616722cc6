"""Pacing equilibria, proportional dynamics and incentive audits for multi-seller Fisher markets."""
from .dynamics import DynamicsTrace, init_split, potential, rate_report, run
from .equilibrium import (
    MarketEquilibrium,
    PacingOutcome,
    eg_objective,
    grid_search_eg,
    nsw,
    solve_market_boosted,
    solve_market_ce,
    solve_submarket,
    solve_submarket_boosted,
    verify_pacing,
)
from .errors import (
    InfeasibleShape,
    InfeasibleTarget,
    InvalidMarket,
    NoConvergence,
    ParseError,
    PropdynError,
)
from .market import MarketSpec, generate, load, save, validate

__all__ = [
    "DynamicsTrace", "InfeasibleShape", "InfeasibleTarget", "InvalidMarket", "MarketEquilibrium",
    "MarketSpec", "NoConvergence", "PacingOutcome", "ParseError", "PropdynError", "eg_objective",
    "generate", "grid_search_eg", "init_split", "load", "nsw", "potential", "rate_report", "run",
    "save", "solve_market_boosted", "solve_market_ce", "solve_submarket", "solve_submarket_boosted",
    "validate", "verify_pacing",
]
__version__ = "0.1.0"
