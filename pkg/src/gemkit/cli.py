"""Command-line pipeline: graph building, metrics, simulation, evaluation.

Subcommands: ``graph-build``, ``gem``, ``metrics``, ``simulate``, ``search``,
``evaluate``. Every stochastic subcommand requires a seed and echoes it into
its outputs together with a hash of the resolved configuration, so reruns
are byte-identical. Exit codes: 0 success, 2 input error, 3 numerical
failure, 4 non-convergence under ``--strict``. Input errors print a
machine-readable JSON object to stderr. Set ``GEMKIT_LOG`` to control log
verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, baselines, evaluation
from .csvio import fmt, write_csv
from .dispatch import PolicyParams, ValueTable, grid_search_alphas
from .gem import (
    GemComputationError,
    GemProblem,
    MassVector,
    compute_gem,
    default_lambda,
    equilibrium_map,
    read_snapshots,
    write_maps_csv,
    write_plan_csv,
)
from .graph import HexGridSpec, build_hex_grid, load_graph, save_graph, with_self_cost
from .lp import LpStatusError
from .simulator import SimConfig, run_episode

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_NONCONVERGENCE = 4


class InputError(ValueError):
    pass


def _config_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _provenance(args: argparse.Namespace, seed=None) -> dict:
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    prov = {"version": __version__, "config": _config_hash(payload)}
    if seed is not None:
        prov["seed"] = seed
    return prov


def _parallel_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# gem / metrics


def _gem_one(task):
    graph, lam, snap = task
    problem = GemProblem.from_arrays(
        graph, snap.supply, snap.demand, lam, timestamp=snap.timestamp
    )
    plan = compute_gem(problem)
    emap = equilibrium_map(plan, MassVector(snap.demand, "demand", snap.timestamp))
    return plan, emap


def cmd_gem(args) -> int:
    graph = load_graph(args.graph)
    snapshots = read_snapshots(args.snapshots, graph.n)
    if not snapshots:
        raise InputError("no snapshots")
    lam = args.lam if args.lam is not None else default_lambda(graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(args)
    results = _parallel_map(_gem_one, [(graph, lam, s) for s in snapshots], args.jobs)
    rows = [
        [s.timestamp, "gem_rho", fmt(plan.rho)]
        for s, (plan, _) in zip(snapshots, results)
    ]
    write_csv(out / "rho.csv", ["window_start", "metric_name", "value"], rows, prov)
    write_maps_csv(out / "maps.csv", [emap for _, emap in results], prov)
    if args.plans:
        for s, (plan, _) in zip(snapshots, results):
            write_plan_csv(out / f"plan_{s.timestamp:06d}.csv", plan, prov)
    return EXIT_OK


def _metrics_window(task):
    graph, lam, window_min, window = task
    starts, series = evaluation.build_metric_series(
        window, graph, lam, window_min=window_min
    )
    return starts[0], {name: series[name][0] for name in evaluation.METRIC_NAMES}


def cmd_metrics(args) -> int:
    graph = load_graph(args.graph)
    snapshots = read_snapshots(args.snapshots, graph.n)
    if not snapshots:
        raise InputError("no snapshots")
    lam = args.lam if args.lam is not None else default_lambda(graph)
    windows = [
        snapshots[i : i + args.window_min]
        for i in range(0, len(snapshots), args.window_min)
    ]
    results = _parallel_map(
        _metrics_window, [(graph, lam, args.window_min, w) for w in windows], args.jobs
    )
    rows = []
    for start, values in results:
        for name in sorted(values):
            value = values[name]
            if np.isnan(value):
                continue
            rows.append([start, name, fmt(float(value))])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    baselines.write_metric_series_csv(out / "metrics.csv", rows, _provenance(args))
    return EXIT_OK


# ---------------------------------------------------------------------------
# graph-build


def _parse_blocked(text: str) -> frozenset[tuple[int, int]]:
    if not text:
        return frozenset()
    pairs = set()
    for item in text.split(","):
        a, _, b = item.partition(":")
        pairs.add((int(a), int(b)))
    return frozenset(pairs)


def cmd_graph_build(args) -> int:
    spec = HexGridSpec(
        rows=args.rows,
        cols=args.cols,
        side_length_m=args.side,
        adjacent_distance_m=args.adjacent,
        blocked=_parse_blocked(args.blocked),
    )
    graph = build_hex_grid(spec, neighborhood_order=args.order)
    if args.self_cost:
        graph = with_self_cost(graph, args.self_cost)
    save_graph(graph, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / search / evaluate


def _policy_from_dict(payload: dict) -> PolicyParams:
    return PolicyParams(
        kind=payload.get("kind", "A1"),
        alpha1=payload.get("alpha1", 1.0),
        alpha2=payload.get("alpha2", 0.001),
        alpha3=payload.get("alpha3", 0.0),
        alpha4=payload.get("alpha4", 0.0),
        eta=payload.get("eta", 0.9),
    )


def _sim_config(payload: dict, seed_override=None) -> SimConfig:
    graph = load_graph(payload["graph"])
    seed = seed_override if seed_override is not None else payload.get("seed")
    if seed is None:
        raise InputError("a seed is required (config 'seed' or --seed)")
    values = None
    if "values" in payload:
        raw = payload["values"]
        values = ValueTable(
            v1={(int(k.split(":")[0]), int(k.split(":")[1])): v for k, v in raw.get("v1", {}).items()},
            v2={(int(k.split(":")[0]), int(k.split(":")[1])): v for k, v in raw.get("v2", {}).items()},
            bucket_min=raw.get("bucket_min", 10),
            horizon_buckets=raw.get("horizon_buckets"),
        )
    return SimConfig(
        graph=graph,
        horizon_min=payload["horizon_min"],
        demand_rate=np.asarray(payload["demand_rate"], dtype=float),
        initial_drivers=np.asarray(payload["initial_drivers"], dtype=int),
        seed=int(seed),
        online_rate=payload.get("online_rate", 0.0),
        offline_prob=payload.get("offline_prob", 0.0),
        idle_move_prob=payload.get("idle_move_prob", 0.3),
        speed_m_per_min=payload.get("speed_m_per_min", 600.0),
        price_base=payload.get("price_base", 8.0),
        price_per_m=payload.get("price_per_m", 0.002),
        max_pickup_m=payload.get("max_pickup_m", 2000.0),
        patience_min=payload.get("patience_min", 5),
        commission=payload.get("commission", 0.0),
        bucket_min=payload.get("bucket_min", 10),
        policy=_policy_from_dict(payload.get("policy", {})),
        values=values,
        intra_vertex_m=payload.get("intra_vertex_m"),
        track_gem=payload.get("track_gem", False),
        gem_lambda=payload.get("gem_lambda"),
    )


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def cmd_simulate(args) -> int:
    config = _sim_config(_load_json(args.config), seed_override=args.seed)
    metrics = run_episode(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(args, seed=config.seed)
    from .gem import write_snapshots

    write_snapshots(out / "snapshots.csv", metrics.snapshots, prov)
    payload = {
        "provenance": prov,
        "answer_rate": metrics.answer_rate,
        "finish_rate": metrics.finish_rate,
        "drivers_revenue": metrics.drivers_revenue,
        "gmv": metrics.gmv,
        "orders_total": metrics.orders_total,
        "orders_answered": metrics.orders_answered,
        "orders_finished": metrics.orders_finished,
    }
    if metrics.gem_trace is not None:
        rows = [
            [start, "gem_rho_window", fmt(v)]
            for start, v in metrics.gem_trace
            if v is not None
        ]
        baselines.write_metric_series_csv(out / "gem_trace.csv", rows, prov)
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_search(args) -> int:
    payload = _load_json(args.config)
    config = _sim_config(payload, seed_override=args.seed)
    day_seeds = [
        int(ss.generate_state(1)[0] % 2**31)
        for ss in np.random.SeedSequence(config.seed).spawn(args.days)
    ]
    base_policy = config.policy

    def objective(a3: float, a4: float) -> float:
        from dataclasses import replace

        kind = "A3" if a4 > 0 else ("A2" if a3 > 0 else base_policy.kind)
        policy = PolicyParams(
            kind=kind,
            alpha1=base_policy.alpha1,
            alpha2=base_policy.alpha2,
            alpha3=a3,
            alpha4=a4,
            eta=base_policy.eta,
        )
        total = 0.0
        for day in day_seeds:
            total += run_episode(replace(config, seed=day, policy=policy)).drivers_revenue
        return total / len(day_seeds)

    result = grid_search_alphas(
        objective,
        a4_grid=tuple(float(v) for v in args.a4_grid.split(",")),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "provenance": _provenance(args, seed=config.seed),
        "alpha3": result.alpha3,
        "alpha4": result.alpha4,
        "objective": result.objective,
        "evaluations": result.evaluations,
    }
    (out / "search.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    panel = evaluation.read_panel_csv(args.panel)
    results = []
    nonconverged = []
    for outcome in sorted(panel.outcomes):
        fit = evaluation.fit_gee(panel, outcome=outcome)
        if not fit.converged:
            nonconverged.append(outcome)
        results.append(evaluation.test_ate(fit, dt0=args.dt0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(args)
    (out / "ate_report.json").write_text(
        evaluation.ate_report_json(results, prov) + "\n"
    )
    (out / "ate_report.md").write_text(evaluation.ate_report_markdown(results) + "\n")
    if nonconverged and args.strict:
        log.error("non-converged outcomes: %s", nonconverged)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gemkit", description="Supply-demand equilibrium metric toolkit"
    )
    parser.add_argument("--strict", action="store_true", help="treat warnings as errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("graph-build", help="write a hex-grid graph file")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--side", type=float, default=1400.0)
    p.add_argument("--adjacent", type=float, default=2400.0)
    p.add_argument("--blocked", default="", help="directed pairs i:j,i:j")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--self-cost", dest="self_cost", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph_build)

    p = sub.add_parser("gem", help="metric value, maps, optional plans per timestamp")
    p.add_argument("--graph", required=True)
    p.add_argument("--snapshots", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--plans", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gem)

    p = sub.add_parser("metrics", help="four-metric comparison series")
    p.add_argument("--graph", required=True)
    p.add_argument("--snapshots", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--window-min", dest="window_min", type=int, default=10)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("simulate", help="run one seeded episode")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("search", help="tune the value-term coefficients")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--days", type=int, default=3)
    p.add_argument("--a4-grid", dest="a4_grid", default="6,7,8,9,10")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="treatment-effect report from a panel")
    p.add_argument("--panel", required=True)
    p.add_argument("--dt0", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GEMKIT_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": str(exc), "code": EXIT_INPUT}) + "\n")
        return EXIT_INPUT
    except (GemComputationError, LpStatusError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(json.dumps({"error": str(exc), "code": EXIT_NUMERICAL}) + "\n")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
