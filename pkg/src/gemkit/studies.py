"""Reproducible synthetic study worlds for the two directional experiments.

The prediction world makes the answer rate move with supply-demand
imbalance in both overall level (demand intensity swings within and across
days) and spatial alignment (a rotating hotspot that drivers chase with a
lag), which is the regime where the equilibrium-ratio feature should carry
more forecasting signal than scale-blind or transport-blind distances.

The dispatch world concentrates recurring demand in a core cell whose
corner cells are out of pickup range, with per-meter pricing that makes
stranding trips individually attractive: the regime where value-augmented
edge weights should beat the myopic policy.
"""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from .dispatch import PolicyParams, ValueTable, compute_v2, estimate_v1, grid_search_alphas
from .evaluation import PredictionResult, prediction_study
from .gem import default_lambda
from .graph import HexGridSpec, build_hex_grid
from .simulator import SimConfig, run_episode

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Answer-rate prediction study


def prediction_world(world_seed: int, day_minutes: int = 480, n_drivers: int = 24):
    """Config and per-day demand schedule for one forecastable world."""
    rows = cols = 4
    graph = build_hex_grid(HexGridSpec(rows=rows, cols=cols), neighborhood_order=1)
    n = graph.n
    rng = np.random.default_rng(np.random.SeedSequence([world_seed, 77]))
    n_buckets = day_minutes // 10

    hot_cells = [0, 3, 15, 12, 5, 10]
    day_params = [
        {
            "phase": rng.uniform(0, 2 * np.pi),
            "period": rng.uniform(150, 260),
            "amp": rng.uniform(0.45, 0.7),
            "scale": rng.uniform(0.85, 1.15),
            "hot_offset": int(rng.integers(0, len(hot_cells))),
        }
        for _ in range(64)
    ]

    def day_rate_fn(day: int) -> np.ndarray:
        par = day_params[day % len(day_params)]
        rates = np.zeros((n_buckets, n))
        for b in range(n_buckets):
            minute = b * 10
            level = 1.8 * par["scale"] * (
                1.0 + par["amp"] * np.sin(2 * np.pi * minute / par["period"] + par["phase"])
            )
            hot = hot_cells[(par["hot_offset"] + minute // 90) % len(hot_cells)]
            spatial = np.full(n, 0.35 / n)
            block = [hot] + [j for j in graph.out_neighbors(hot)]
            spatial[block] += 0.65 / len(block)
            rates[b] = level * spatial
        return rates

    drivers = np.zeros(n, dtype=int)
    drivers[: n_drivers % n] += 1
    drivers += n_drivers // n
    config = SimConfig(
        graph=graph,
        horizon_min=day_minutes,
        demand_rate=np.full(n, 0.2),  # replaced per day
        initial_drivers=drivers,
        seed=world_seed,
        idle_move_prob=0.35,
        speed_m_per_min=600.0,
        price_base=8.0,
        price_per_m=0.002,
        max_pickup_m=2600.0,
        patience_min=4,
    )
    return config, day_rate_fn, default_lambda(graph)


def run_prediction_world(
    world_seed: int,
    n_days: int = 12,
    train_days: int = 8,
    horizon: int = 1,
) -> dict[str, PredictionResult]:
    """Forecast comparison for one seeded world: metric name -> result."""
    config, day_rate_fn, lam = prediction_world(world_seed)
    return prediction_study(
        config,
        n_days=n_days,
        train_days=train_days,
        lam=lam,
        horizon=horizon,
        day_rate_fn=day_rate_fn,
    )


# ---------------------------------------------------------------------------
# Dispatch policy study


def dispatch_world(world_seed: int, day_minutes: int = 480, n_drivers: int = 14):
    """Core-heavy demand world where driver placement compounds."""
    graph = build_hex_grid(HexGridSpec(rows=3, cols=3), neighborhood_order=1)
    n = graph.n
    core = graph.hex_spec.vertex_id(1, 1)
    rates = np.full(n, 0.09)
    rates[core] = 1.5
    drivers = np.zeros(n, dtype=int)
    drivers[core] = n_drivers - (n - 1) // 2
    for v in range(n):
        if v != core and (n_drivers - drivers[core]) > 0 and v % 2 == 0:
            drivers[v] = 1
    drivers[core] += n_drivers - drivers.sum()
    config = SimConfig(
        graph=graph,
        horizon_min=day_minutes,
        demand_rate=rates,
        initial_drivers=drivers,
        seed=world_seed,
        idle_move_prob=0.2,
        speed_m_per_min=600.0,
        price_base=8.0,
        price_per_m=0.002,
        max_pickup_m=2600.0,
        patience_min=4,
    )
    return config


def build_value_tables(
    config: SimConfig,
    history_seeds: list[int],
    eta: float = 0.9,
    lam: float | None = None,
) -> ValueTable:
    """Estimate both value functions from baseline-policy history episodes."""
    if lam is None:
        lam = default_lambda(config.graph)
    logs = []
    v2_sum: dict[tuple[int, int], float] = {}
    for seed in history_seeds:
        episode = run_episode(replace(config, seed=seed, policy=PolicyParams("A1")))
        logs.extend(episode.driver_logs)
        part = compute_v2(episode.snapshots, config.graph, lam, config.bucket_min)
        for key, val in part.items():
            v2_sum[key] = v2_sum.get(key, 0.0) + val
    v1 = estimate_v1(logs, eta=eta, bucket_min=config.bucket_min)
    v2 = {key: val / len(history_seeds) for key, val in v2_sum.items()}
    return ValueTable(
        v1=v1,
        v2=v2,
        bucket_min=config.bucket_min,
        horizon_buckets=config.horizon_min // config.bucket_min,
    )


def tune_and_compare(
    world_seed: int,
    n_eval_seeds: int = 20,
    n_tuning_days: int = 3,
    a4_grid: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0),
    eta: float = 0.9,
) -> dict:
    """Tune (alpha3, alpha4) on held-out days, then compare policies.

    Returns mean revenues over fresh evaluation seeds for the baseline, the
    tuned earnings-value policy, and the tuned policy with the
    supply-demand term added.
    """
    config = dispatch_world(world_seed)
    root = np.random.SeedSequence([world_seed, 13])
    hist_ss, tune_ss, eval_ss = root.spawn(3)
    history_seeds = [int(s.generate_state(1)[0] % 2**31) for s in hist_ss.spawn(3)]
    tuning_seeds = [int(s.generate_state(1)[0] % 2**31) for s in tune_ss.spawn(n_tuning_days)]
    eval_seeds = [int(s.generate_state(1)[0] % 2**31) for s in eval_ss.spawn(n_eval_seeds)]

    values = build_value_tables(config, history_seeds, eta=eta)

    def objective(a3: float, a4: float) -> float:
        kind = "A3" if a4 > 0 else ("A2" if a3 > 0 else "A1")
        policy = PolicyParams(kind=kind, alpha3=a3, alpha4=a4, eta=eta)
        total = 0.0
        for seed in tuning_seeds:
            total += run_episode(
                replace(config, seed=seed, policy=policy, values=values)
            ).drivers_revenue
        return total / len(tuning_seeds)

    search = grid_search_alphas(objective, a4_grid=a4_grid)
    policies = {
        "A1": PolicyParams("A1"),
        "A2": PolicyParams("A2", alpha3=search.alpha3, eta=eta),
        "A3": PolicyParams(
            "A3", alpha3=search.alpha3, alpha4=search.alpha4, eta=eta
        ),
    }
    revenue = {name: 0.0 for name in policies}
    answer = {name: 0.0 for name in policies}
    for seed in eval_seeds:
        for name, policy in policies.items():
            episode = run_episode(
                replace(config, seed=seed, policy=policy, values=values)
            )
            revenue[name] += episode.drivers_revenue / len(eval_seeds)
            answer[name] += (episode.answer_rate or 0.0) / len(eval_seeds)
    return {
        "alpha3": search.alpha3,
        "alpha4": search.alpha4,
        "revenue": revenue,
        "answer_rate": answer,
        "eval_seeds": eval_seeds,
    }
