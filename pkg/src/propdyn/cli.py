"""Command-line front end.

Exit codes: 0 success, 2 an asserted bound failed, 1 operational error.
Human-readable summaries go to stdout; CSV/JSON artifacts only to ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dynamics, incentives, seller_game, suite
from .equilibrium import solve_market_boosted, solve_market_ce, verify_pacing
from .errors import NoConvergence, PropdynError
from .market import MarketSpec, generate, load, load_boosts, save, validate

EXIT_OK, EXIT_ERROR, EXIT_BOUND = 0, 1, 2

GUARANTEES = {
    1: "closed-form 2x2 curve",
    2: "dynamics convergence",
    3: "ergodic O(1/T) rate",
    4: "CE fixed point",
    5: "boosted convergence",
    6: "buyer 2-approximation",
    7: "monotone utility ladder",
    8: "boost synthesis",
    9: "seller incentive ratio 5",
    10: "PNE uniqueness",
    11: "PNE fairness 1-delta",
    12: "oracle equivalence",
}


def _num(x) -> str:
    return format(float(x), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def duplicated_two_by_two() -> MarketSpec:
    """Two sellers each owning a copy of the 2x2 sub-market ``[[2, 1], [1, 2]]``."""
    v = np.array([[2.0, 1.0, 2.0, 1.0], [1.0, 2.0, 1.0, 2.0]])
    return MarketSpec(np.array([4.0, 2.0]), v, np.array([0, 0, 1, 1]))


def _seed_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        seeds = list(range(int(lo), int(hi) + 1))
    else:
        seeds = [int(s) for s in text.split(",")]
    if not seeds:
        raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
    return seeds


def _positive(text: str) -> float:
    x = float(text)
    if not x > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return x


def _market(args) -> MarketSpec:
    return validate(load(args.market))


def _agents(arg: str, count: int) -> list[int]:
    if arg == "all":
        return list(range(count))
    i = int(arg)
    if not 0 <= i < count:
        raise PropdynError(f"agent {i} out of range 0..{count - 1}")
    return [i]


# -- subcommands ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.preset == "duplicated-2x2":
        spec = duplicated_two_by_two()
    else:
        spec = generate(args.seed, args.buyers, args.items, args.sellers, args.distribution, args.sparsity)
    save(spec, args.out)
    print(f"wrote market with {spec.n_buyers} buyers, {spec.n_items} items, {spec.n_sellers} sellers to {args.out}")
    return EXIT_OK


def cmd_ce(args) -> int:
    spec = _market(args)
    if spec.boosts is not None:
        eq = solve_market_boosted(spec, tol=args.tol, max_inner=args.max_inner)
    else:
        eq = solve_market_ce(spec, tol=args.tol, max_inner=args.max_inner)
    rep = verify_pacing(eq.outcome, spec.values, spec.budgets, spec.boosts, tol=max(args.tol, 1e-9))
    np.set_printoptions(precision=6, suppress=True)
    print("prices     ", eq.prices)
    print("alphas     ", eq.outcome.alphas)
    print("utilities  ", eq.utilities)
    print("allocation\n", eq.allocation)
    print("split (buyer x seller)\n", eq.split)
    print("residuals  ", {k: f"{v:.2e}" for k, v in rep.residuals.items()})
    if args.out:
        doc = {
            "prices": [_num(p) for p in eq.prices],
            "alphas": [_num(a) for a in eq.outcome.alphas],
            "utilities": [_num(u) for u in eq.utilities],
            "allocation": [[_num(x) for x in row] for row in eq.allocation],
            "split": [[_num(b) for b in row] for row in eq.split],
            "residuals": {k: _num(v) for k, v in rep.residuals.items()},
        }
        Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
    if not rep.passed:
        print(f"pacing conditions violated: max residual {rep.max_residual:.3e}")
        return EXIT_BOUND
    return EXIT_OK


def cmd_dynamics(args) -> int:
    spec = _market(args)
    boosts = load_boosts(args.boosts) if args.boosts else None
    if boosts is not None:
        validate(spec.with_boosts(boosts))
    fh = open(args.out, "w", newline="") if args.out else None
    writer = None
    if fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "buyer", "seller", "budget", "utility", "phi", "eg_objective", "avg_gap"])

    def emit(trace, t):
        if writer:
            for row in trace.rows(t):
                writer.writerow([row[0], row[1], row[2]] + [_num(x) for x in row[3:]])

    try:
        trace = dynamics.run(spec, args.rounds, boosts, args.tol_inner, args.stop_early, on_round=emit)
    finally:
        if fh:
            fh.close()
    if trace.error is not None:
        print(f"solver failed at round {trace.rounds + 1}: {trace.error}", file=sys.stderr)
        return EXIT_ERROR
    rel = np.max(np.abs(trace.final_utilities - trace.ce_utilities) / trace.ce_utilities)
    rate = dynamics.rate_report(trace)
    mono = trace.phi_monotone()
    print(f"rounds {trace.rounds} (stopped early: {trace.stopped_early})")
    print(f"max relative utility error vs {trace.metadata['reference']}: {rel:.3e}")
    print(f"phi(1) {rate.phi1:.6g}, phi(T) {trace.phi[-1]:.6g}, non-increasing: {mono}")
    print(f"sup_T T*g(T) {rate.constant:.6g} <= phi(1): {rate.passed}")
    if not (mono and rate.passed):
        return EXIT_BOUND
    return EXIT_OK


def _report_rows(reports):
    rows = []
    for agent, base, best, ratio, bound, ok in reports:
        rows.append([agent, _num(base), _num(best), _num(ratio), _num(bound), int(ok)])
    return rows


def _print_reports(reports, what):
    print(f"{'agent':>5} {what + ' baseline':>20} {'best response':>14} {'ratio':>9} {'bound':>6} pass")
    for agent, base, best, ratio, bound, ok in reports:
        print(f"{agent:>5} {base:>20.6g} {best:>14.6g} {ratio:>9.5f} {bound:>6g} {'yes' if ok else 'NO'}")


def cmd_buyer_audit(args) -> int:
    spec = _market(args)
    ce = solve_market_ce(spec)
    others = ce.split if args.others == "ce" else dynamics.init_split(spec)
    reports = []
    for i in _agents(args.agent, spec.n_buyers):
        r = incentives.buyer_audit(spec, i, others, args.resolution)
        reports.append((i, r.proportional_utility, r.best_utility, r.ratio, r.bound, r.passed))
    _print_reports(reports, "equalized")
    if args.out:
        _write_csv(args.out, ["agent", "baseline_value", "best_response_value", "ratio", "bound", "pass"],
                   _report_rows(reports))
    return EXIT_OK if all(r[-1] for r in reports) else EXIT_BOUND


def cmd_seller_audit(args) -> int:
    spec = _market(args)
    ce = solve_market_ce(spec)
    reports = []
    for k in _agents(args.agent, spec.n_sellers):
        r = incentives.incentive_ratio(spec, k, ce=ce, iters=args.iters)
        reports.append((k, r.ce_revenue, r.best_revenue, r.ratio, r.bound, r.passed))
    _print_reports(reports, "CE revenue")
    if args.out:
        _write_csv(args.out, ["agent", "baseline_value", "best_response_value", "ratio", "bound", "pass"],
                   _report_rows(reports))
    return EXIT_OK if all(r[-1] for r in reports) else EXIT_BOUND


def cmd_pne(args) -> int:
    spec = _market(args)
    tol = args.tol if args.tol is not None else 1e-7 * spec.total_budget
    ce = solve_market_ce(spec)
    pne = seller_game.solve_pne(spec, tol, args.max_rounds, init=seller_game.ce_profile(spec, ce))
    rng = np.random.default_rng(args.seed)
    spread = 0.0
    for _ in range(args.restarts):
        other = seller_game.solve_pne(spec, tol, args.max_rounds, init=seller_game.random_profile(spec, rng))
        spread = max(spread, float(np.max(np.abs(other.utilities - pne.utilities))))
    check = seller_game.verify_pne(spec, pne, tol)
    fair = seller_game.fairness(spec, pne, ce=ce)
    revenue = seller_game.revenue_profile(spec, pne)
    summary = [
        ("delta", fair.delta), ("nsw_pne", fair.nsw_pne), ("nsw_ce", fair.nsw_ce),
        ("nsw_ratio", fair.ratio), ("bound", fair.bound),
        ("max_improvement", check.max_improvement), ("restart_spread", spread), ("tol", tol),
    ]
    print(f"PNE after {pne.rounds} rounds; revenues {np.round(revenue, 6).tolist()}")
    for name, val in summary:
        print(f"  {name:<16} {val:.6g}")
    ok = check.passed and fair.passed and spread <= 10 * tol
    print(f"best responses improve < tol: {check.passed}; fairness bound holds: {fair.passed}; "
          f"restarts agree: {spread <= 10 * tol}")
    if args.out:
        rows = [[k, i, _num(pne.utilities[i, k]), _num(revenue[k])]
                for k in range(spec.n_sellers) for i in range(spec.n_buyers)]
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seller", "buyer", "utility", "revenue"])
            w.writerows(rows)
            w.writerow([])
            w.writerow(["summary", "value"])
            w.writerows([[name, _num(val)] for name, val in summary])
    return EXIT_OK if ok else EXIT_BOUND


def cmd_suite(args) -> int:
    criteria = None if args.criteria is None else {int(c) for c in args.criteria.split(",")}
    records = suite.run_battery(args.seeds, args.workers, criteria)
    rows = suite.summarize(records)
    print(f"{'theorem':<26} {'metric':<44} {'instances':>9} {'worst ratio':>13} {'bound':>10} pass")
    for r in rows:
        print(f"{GUARANTEES[r.criterion]:<26} {r.metric:<44} {r.instances:>9} {r.worst:>13.4g} "
              f"{r.sense}{r.bound:>8.3g} {'yes' if r.passed else 'NO'}")
    failed = [r for r in records if not r.passed]
    for r in failed:
        print(f"VIOLATION criterion {r.criterion} [{r.metric}] seed {r.seed} key {r.key}: "
              f"{r.value:.6g} vs {r.sense} {r.bound:.6g}")
    if args.out:
        _write_csv(args.out, ["criterion", "metric", "seed", "key", "value", "bound", "sense", "pass"],
                   [[r.criterion, r.metric, r.seed, r.key, _num(r.value), _num(r.bound), r.sense, int(r.passed)]
                    for r in records])
    if args.summary:
        _write_csv(args.summary, ["theorem", "metric", "instances", "worst_ratio", "bound", "pass"],
                   [[GUARANTEES[r.criterion], r.metric, r.instances, _num(r.worst), f"{r.sense}{_num(r.bound)}",
                     int(r.passed)] for r in rows])
    return EXIT_BOUND if failed else EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="propdyn", description="Pacing equilibria, proportional dynamics "
                                "and incentive audits for multi-seller Fisher markets.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a random market")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--buyers", type=int, default=3)
    g.add_argument("--items", type=int, default=4)
    g.add_argument("--sellers", type=int, default=2)
    g.add_argument("--distribution", choices=("uniform01", "lognormal", "sparse"), default="uniform01")
    g.add_argument("--sparsity", type=float, default=0.5)
    g.add_argument("--preset", choices=("duplicated-2x2",), help="write a fixed example market instead")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("ce", help="solve the market equilibrium")
    c.add_argument("--market", required=True)
    c.add_argument("--tol", type=_positive, default=1e-9)
    c.add_argument("--max-inner", type=int, default=100_000)
    c.add_argument("--out")
    c.set_defaults(func=cmd_ce)

    d = sub.add_parser("dynamics", help="run proportional dynamics and write a trace")
    d.add_argument("--market", required=True)
    d.add_argument("--boosts")
    d.add_argument("--rounds", type=int, default=dynamics.DEFAULT_T_MAX)
    d.add_argument("--tol-inner", type=_positive, default=dynamics.DEFAULT_TOL_INNER)
    d.add_argument("--stop-early", type=float, default=dynamics.DEFAULT_STOP_EARLY)
    d.add_argument("--out")
    d.set_defaults(func=cmd_dynamics)

    for name, func, helptext in (("buyer-audit", cmd_buyer_audit, "equalized split vs grid best response"),
                                 ("seller-audit", cmd_seller_audit, "CE revenue vs best-response revenue")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--market", required=True)
        a.add_argument("--agent", default="all")
        a.add_argument("--resolution", type=int, default=incentives.DEFAULT_RESOLUTION)
        a.add_argument("--iters", type=int, default=incentives.DEFAULT_FW_ITERS)
        a.add_argument("--out")
        if name == "buyer-audit":
            a.add_argument("--others", choices=("ce", "uniform"), default="ce",
                           help="opponents' budget split held fixed")
        a.set_defaults(func=func)

    q = sub.add_parser("pne", help="seller-game equilibrium and fairness report")
    q.add_argument("--market", required=True)
    q.add_argument("--tol", type=_positive)
    q.add_argument("--restarts", type=int, default=suite.PNE_RESTARTS)
    q.add_argument("--max-rounds", type=int, default=seller_game.DEFAULT_MAX_ROUNDS)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_pne)

    s = sub.add_parser("suite", help="run the acceptance battery")
    s.add_argument("--seeds", type=_seed_range, default=_seed_range("1..50"))
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--criteria", help="comma-separated subset, e.g. 2,3")
    s.add_argument("--out", help="per-record CSV")
    s.add_argument("--summary", help="summary table CSV")
    s.set_defaults(func=cmd_suite)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_ERROR
    try:
        return args.func(args)
    except NoConvergence as e:
        print(f"no convergence: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (PropdynError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
