"""Discrete-time supply-demand simulator for dispatch policy evaluation.

One step per minute: orders arrive as per-vertex Poisson draws, drivers come
online and drift offline, open orders are matched to idle drivers by the
dispatch module, matched drivers stay busy for the estimated service time
and reappear at the order destination, idle drivers wander to adjacent
cells. Per-minute snapshots (open orders = demand, idle drivers = supply)
feed the metric pipeline, and per-driver logs feed value-table estimation.

The whole episode is driven by two RNG streams derived from the mandatory
seed: the order stream is pre-generated before any dispatch decision, so
two policies run under the same seed face byte-identical order arrivals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dispatch import (
    DispatchInstance,
    Driver,
    DriverLog,
    Matching,
    Order,
    PolicyParams,
    ValueTable,
    build_weights,
    km_match,
)
from .gem import (
    GemProblem,
    MassVector,
    Snapshot,
    compute_gem,
    default_lambda,
)
from .graph import WeightedGraphStructure

log = logging.getLogger(__name__)


@dataclass
class SimConfig:
    """Episode parameters. ``seed`` is mandatory: every draw derives from it.

    ``demand_rate`` gives expected new orders per vertex per minute, either
    a length-N vector or an (n_buckets, N) array indexed by
    ``minute // bucket_min`` for time-varying demand.
    """

    graph: WeightedGraphStructure
    horizon_min: int
    demand_rate: np.ndarray
    initial_drivers: np.ndarray
    seed: int
    online_rate: float | np.ndarray = 0.0
    offline_prob: float = 0.0
    idle_move_prob: float = 0.3
    speed_m_per_min: float = 600.0
    price_base: float = 8.0
    price_per_m: float = 0.002
    max_pickup_m: float = 2000.0
    patience_min: int = 5
    commission: float = 0.0
    bucket_min: int = 10
    policy: PolicyParams = field(default_factory=PolicyParams)
    values: ValueTable | None = None
    intra_vertex_m: float | None = None
    dest_weights: np.ndarray | None = None  # (N,) or (N, N) trip-destination preference
    track_gem: bool = False
    gem_lambda: float | None = None

    def __post_init__(self) -> None:
        if self.seed is None:
            raise ValueError("a seed is required")
        if self.horizon_min < 0:
            raise ValueError("horizon_min must be nonnegative")
        self.demand_rate = np.atleast_1d(np.asarray(self.demand_rate, dtype=float))
        self.initial_drivers = np.asarray(self.initial_drivers, dtype=int)
        if np.any(self.demand_rate < 0) or np.any(self.initial_drivers < 0):
            raise ValueError("rates and driver counts must be nonnegative")
        if self.patience_min < 1:
            raise ValueError("patience_min must be >= 1")
        if not (0 <= self.commission <= 1):
            raise ValueError("commission must lie in [0, 1]")

    def rate_at(self, minute: int) -> np.ndarray:
        if self.demand_rate.ndim == 1:
            return self.demand_rate
        bucket = min(minute // self.bucket_min, self.demand_rate.shape[0] - 1)
        return self.demand_rate[bucket]

    def intra_distance(self) -> float:
        if self.intra_vertex_m is not None:
            return self.intra_vertex_m
        if self.graph.hex_spec is not None:
            return self.graph.hex_spec.side_length_m
        return 0.0


@dataclass
class EpisodeMetrics:
    """Episode outcomes plus the streams downstream consumers need."""

    answer_rate: float | None
    finish_rate: float | None
    drivers_revenue: float
    gmv: float
    orders_total: int
    orders_answered: int
    orders_finished: int
    snapshots: list[Snapshot]
    driver_logs: list[DriverLog]
    driver_counts: np.ndarray  # (horizon, 3): idle, busy, offline
    matches_per_min: list[int]
    order_outcomes: list[tuple[int, int, int]]  # (arrival, answered, finished)
    completions: list[tuple[int, float]]  # (minute, order price)
    seed: int
    gem_trace: list[tuple[int, float | None]] | None = None


@dataclass
class _SimOrder:
    order: Order
    arrival: int
    trip_m: float
    answered: bool = False
    finished: bool = False
    finish_minute: int = -1


@dataclass
class _SimDriver:
    id: int
    vertex: int
    status: str = "idle"  # idle | busy | offline
    busy_until: int = -1
    serving: "_SimOrder | None" = None


def _generate_orders(config: SimConfig, rng: np.random.Generator) -> list[_SimOrder]:
    """Pre-draw the full order stream so it is policy-independent."""
    n = config.graph.n
    cost = config.graph.cost
    reachable = [np.flatnonzero(np.isfinite(cost[v])) for v in range(n)]
    dest_p = []
    for v in range(n):
        if config.dest_weights is None:
            p = np.ones(len(reachable[v]))
        else:
            w = np.asarray(config.dest_weights, dtype=float)
            p = (w[v] if w.ndim == 2 else w)[reachable[v]]
        dest_p.append(p / p.sum())
    intra = config.intra_distance()
    orders: list[_SimOrder] = []
    next_id = 0
    for minute in range(config.horizon_min):
        counts = rng.poisson(config.rate_at(minute))
        counts = np.atleast_1d(counts)
        for origin in range(n):
            for _ in range(int(counts[origin] if counts.shape else counts)):
                dest = int(rng.choice(reachable[origin], p=dest_p[origin]))
                trip = float(cost[origin, dest]) if dest != origin else float(
                    rng.uniform(0.0, intra)
                )
                price = config.price_base + config.price_per_m * trip
                orders.append(
                    _SimOrder(
                        order=Order(id=next_id, origin=origin, dest=dest, price=price),
                        arrival=minute,
                        trip_m=trip,
                    )
                )
                next_id += 1
    return orders


def run_episode(config: SimConfig, policy_schedule=None) -> EpisodeMetrics:
    """Run one seeded episode; same config and seed give identical output.

    ``policy_schedule`` maps a minute to the PolicyParams in force (used for
    interleaved policy experiments); by default ``config.policy`` applies
    throughout.
    """
    graph = config.graph
    n = graph.n
    root = np.random.SeedSequence(config.seed)
    demand_ss, env_ss = root.spawn(2)
    order_stream = _generate_orders(config, np.random.default_rng(demand_ss))
    env_rng = np.random.default_rng(env_ss)
    if policy_schedule is None:
        policy_schedule = lambda minute: config.policy  # noqa: E731

    out_neighbors = [graph.out_neighbors(v) for v in range(n)]
    online_rate = np.broadcast_to(
        np.asarray(config.online_rate, dtype=float), (n,)
    )
    drivers: list[_SimDriver] = []
    for v in range(n):
        for _ in range(int(config.initial_drivers[v])):
            drivers.append(_SimDriver(id=len(drivers), vertex=v))

    open_orders: list[_SimOrder] = []
    stream_pos = 0
    revenue = 0.0
    gmv = 0.0
    answered = 0
    finished = 0
    snapshots: list[Snapshot] = []
    idle_obs: dict[int, list[tuple[int, int]]] = {}
    earnings: dict[int, list[tuple[int, float]]] = {}
    completions: list[tuple[int, float]] = []
    driver_counts = np.zeros((config.horizon_min, 3), dtype=int)
    matches_per_min: list[int] = []
    intra = config.intra_distance()

    for minute in range(config.horizon_min):
        # New drivers online.
        if online_rate.any():
            arrivals = env_rng.poisson(online_rate)
            for v in range(n):
                for _ in range(int(arrivals[v])):
                    drivers.append(_SimDriver(id=len(drivers), vertex=v))
        # Trip completions.
        for d in drivers:
            if d.status == "busy" and d.busy_until <= minute:
                so = d.serving
                d.status = "idle"
                d.vertex = so.order.dest
                d.serving = None
                pay = so.order.price * (1.0 - config.commission)
                revenue += pay
                gmv += so.order.price
                earnings.setdefault(d.id, []).append((minute, pay))
                completions.append((minute, so.order.price))
                so.finished = True
                so.finish_minute = minute
                finished += 1
        # Offline churn (idle drivers only; busy ones finish their trip).
        if config.offline_prob > 0:
            for d in drivers:
                if d.status == "idle" and env_rng.random() < config.offline_prob:
                    d.status = "offline"
        # Order arrivals.
        while stream_pos < len(order_stream) and order_stream[stream_pos].arrival == minute:
            open_orders.append(order_stream[stream_pos])
            stream_pos += 1

        idle = [d for d in drivers if d.status == "idle"]
        demand_vec = np.zeros(n)
        for so in open_orders:
            demand_vec[so.order.origin] += 1
        supply_vec = np.zeros(n)
        for d in idle:
            supply_vec[d.vertex] += 1
        snapshots.append(Snapshot(timestamp=minute, demand=demand_vec, supply=supply_vec))
        for d in idle:
            idle_obs.setdefault(d.id, []).append((minute, d.vertex))
        driver_counts[minute] = (
            len(idle),
            sum(1 for d in drivers if d.status == "busy"),
            sum(1 for d in drivers if d.status == "offline"),
        )

        # Dispatch.
        n_matched = 0
        if open_orders and idle:
            pickup = np.empty((len(open_orders), len(idle)))
            for k, so in enumerate(open_orders):
                for l, d in enumerate(idle):
                    if d.vertex == so.order.origin:
                        pickup[k, l] = env_rng.uniform(0.0, intra)
                    else:
                        pickup[k, l] = graph.cost[d.vertex, so.order.origin]
            trip = np.array([so.trip_m for so in open_orders])
            serve = np.maximum(
                1.0, np.ceil((pickup + trip[:, None]) / config.speed_m_per_min)
            )
            instance = DispatchInstance(
                orders=[so.order for so in open_orders],
                drivers=[Driver(id=d.id, vertex=d.vertex) for d in idle],
                pickup_m=pickup,
                max_pickup_m=config.max_pickup_m,
                serve_min=serve,
            )
            policy = policy_schedule(minute)
            weights = build_weights(instance, policy, config.values, minute)
            matching = km_match(instance, weights)
            n_matched = len(matching.index_pairs)
            matched_order_idx = set()
            for k, l in matching.index_pairs:
                so = open_orders[k]
                d = idle[l]
                so.answered = True
                answered += 1
                d.status = "busy"
                d.busy_until = minute + int(serve[k, l])
                d.serving = so
                matched_order_idx.add(k)
            open_orders = [
                so for k, so in enumerate(open_orders) if k not in matched_order_idx
            ]
        matches_per_min.append(n_matched)

        # Expire orders that have exhausted their patience.
        open_orders = [
            so for so in open_orders if minute - so.arrival + 1 < config.patience_min
        ]

        # Idle wandering.
        for d in drivers:
            if d.status != "idle":
                continue
            if out_neighbors[d.vertex] and env_rng.random() < config.idle_move_prob:
                d.vertex = out_neighbors[d.vertex][
                    int(env_rng.integers(len(out_neighbors[d.vertex])))
                ]

    total = len(order_stream)
    metrics = EpisodeMetrics(
        answer_rate=(answered / total) if total else None,
        finish_rate=(finished / total) if total else None,
        drivers_revenue=revenue,
        gmv=gmv,
        orders_total=total,
        orders_answered=answered,
        orders_finished=finished,
        snapshots=snapshots,
        driver_logs=[
            DriverLog(
                driver_id=d.id,
                idle_states=idle_obs.get(d.id, []),
                earnings=earnings.get(d.id, []),
            )
            for d in drivers
        ],
        driver_counts=driver_counts,
        matches_per_min=matches_per_min,
        order_outcomes=[
            (so.arrival, int(so.answered), int(so.finished)) for so in order_stream
        ],
        completions=completions,
        seed=config.seed,
    )
    if config.track_gem:
        lam = config.gem_lambda if config.gem_lambda is not None else default_lambda(graph)
        metrics.gem_trace = gem_trace_from_snapshots(
            snapshots, graph, lam, config.bucket_min
        )
    return metrics


def gem_trace_from_snapshots(
    snapshots: list[Snapshot],
    graph: WeightedGraphStructure,
    lam: float,
    window_min: int,
) -> list[tuple[int, float | None]]:
    """Demand-weighted metric value per window of per-minute solves.

    Each minute's metric value is weighted by that minute's total demand
    over the window total; windows with no demand at all have no defined
    value and carry None.
    """
    trace: list[tuple[int, float | None]] = []
    for start in range(0, len(snapshots), window_min):
        window = snapshots[start : start + window_min]
        weights = np.array([s.demand.sum() for s in window])
        total = weights.sum()
        if total <= 0:
            trace.append((window[0].timestamp, None))
            continue
        value = 0.0
        for snap, w in zip(window, weights):
            if w == 0:
                continue
            plan = compute_gem(
                GemProblem.from_arrays(graph, snap.supply, snap.demand, lam)
            )
            value += (w / total) * plan.rho
        trace.append((window[0].timestamp, float(value)))
    return trace


def snapshot_stream(metrics: EpisodeMetrics) -> list[Snapshot]:
    """Per-minute snapshots in the metric pipeline's input format."""
    return metrics.snapshots


@dataclass
class PolicyComparison:
    policy: str
    day: int
    revenue: float
    answer_rate: float | None
    revenue_improvement_pct: float | None
    answer_rate_improvement_pct: float | None


def compare_policies(
    config: SimConfig,
    policies: list[tuple[str, PolicyParams]],
    day_seeds: list[int],
) -> list[PolicyComparison]:
    """Run every policy on every day under common random numbers.

    The first policy is the baseline; improvements are relative to its
    same-day run. Sharing the day seed means all policies face the same
    order stream.
    """
    if not policies:
        raise ValueError("need at least one policy")
    rows: list[PolicyComparison] = []
    for day in day_seeds:
        base_rev = base_ar = None
        for name, policy in policies:
            episode = run_episode(replace(config, seed=day, policy=policy))
            rev, ar = episode.drivers_revenue, episode.answer_rate
            if base_rev is None:
                base_rev, base_ar = rev, ar
                rows.append(PolicyComparison(name, day, rev, ar, None, None))
            else:
                rev_pct = 100.0 * (rev - base_rev) / base_rev if base_rev else None
                ar_pct = (
                    100.0 * (ar - base_ar) / base_ar
                    if (ar is not None and base_ar)
                    else None
                )
                rows.append(PolicyComparison(name, day, rev, ar, rev_pct, ar_pct))
    return rows


def format_comparison_table(rows: list[PolicyComparison]) -> str:
    """Plain-text table with (+x.xx%) columns relative to the baseline."""
    lines = [f"{'policy':<12} {'day':>6} {'revenue':>22} {'answer_rate':>22}"]
    for r in rows:
        rev = f"{r.revenue:.2f}"
        if r.revenue_improvement_pct is not None:
            rev += f"({r.revenue_improvement_pct:+.2f}%)"
        ar = "n/a" if r.answer_rate is None else f"{r.answer_rate:.3f}"
        if r.answer_rate_improvement_pct is not None:
            ar += f"({r.answer_rate_improvement_pct:+.2f}%)"
        lines.append(f"{r.policy:<12} {r.day:>6} {rev:>22} {ar:>22}")
    return "\n".join(lines)
