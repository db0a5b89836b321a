"""Neighborhood-restricted unbalanced transport metric on weighted graphs.

Supply mass may move from each vertex into its transport neighborhood;
demand stays fixed. The metric value is the L1 residual between demand and
the transported supply plus ``lam`` times the transport cost incurred. The
optimization is assembled as an equality-form LP over the admissible flow
variables, one per (vertex, neighbor) pair, plus per-vertex absolute
deviation variables and two slack blocks:

    rows 0..N-1    : outgoing flows of vertex i sum to the supply there
    rows N..2N-1   : arriving supply + deviation - slack_hi = demand
    rows 2N..3N-1  : arriving supply - deviation + slack_lo = demand

Minimizing 1'deviation + lam * cost'flows presses each deviation variable
onto |demand - arriving supply|, which makes the LP optimum the metric.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import lp as lpmod
from .csvio import fmt, read_rows, write_csv
from .graph import WeightedGraphStructure, HexGridSpec, build_hex_grid

log = logging.getLogger(__name__)

# Marginal analysis: moving one unit from a surplus vertex to a deficit
# neighbor lowers the L1 residual by 2, so transport along a pair is only
# ever selected when lam * cost < 2.
TRANSPORT_GAIN = 2.0


class GemComputationError(RuntimeError):
    """Internal failure: a structurally feasible program did not solve."""


class AggregateUndefinedError(ValueError):
    """Weighted aggregate requested over an all-zero weight window."""


class LambdaBoundWarning(UserWarning):
    """lam * max neighborhood cost >= 2: costliest pairs never transport."""


@dataclass(frozen=True)
class MassVector:
    """Nonnegative per-vertex point masses for one side at one timestamp."""

    values: np.ndarray
    role: str = "supply"
    timestamp: int | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1:
            raise ValueError("mass vector must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise ValueError("mass vector must be finite")
        if np.any(values < 0):
            raise ValueError("mass vector must be nonnegative")
        if self.role not in ("supply", "demand"):
            raise ValueError(f"unknown role {self.role!r}")
        values.setflags(write=False)

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class GemProblem:
    """One metric evaluation: graph, supply, demand, cost weight ``lam``."""

    graph: WeightedGraphStructure
    mu: MassVector
    nu: MassVector
    lam: float

    def __post_init__(self) -> None:
        if len(self.mu) != self.graph.n or len(self.nu) != self.graph.n:
            raise ValueError("mass vectors must match the graph vertex count")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        worst = 0.0
        for i, nbr in enumerate(self.graph.neighborhoods):
            for j in nbr:
                if j != i:
                    worst = max(worst, float(self.graph.cost[i, j]))
        if worst > 0 and self.lam * worst >= TRANSPORT_GAIN:
            warnings.warn(
                f"lam * max neighborhood cost = {self.lam * worst:.3g} >= "
                f"{TRANSPORT_GAIN:g}; transport along the costliest pairs can "
                "never pay off",
                LambdaBoundWarning,
                stacklevel=2,
            )

    @classmethod
    def from_arrays(cls, graph, supply, demand, lam, timestamp=None) -> "GemProblem":
        return cls(
            graph=graph,
            mu=MassVector(np.asarray(supply, dtype=float), "supply", timestamp),
            nu=MassVector(np.asarray(demand, dtype=float), "demand", timestamp),
            lam=lam,
        )

    @property
    def n_flows(self) -> int:
        return int(self.graph.neighborhood_sizes.sum())


@dataclass
class TransportPlan:
    """Optimal flows, transported supply, and the metric value split.

    ``pairs[k] = (i, j)`` with ``flows[k]`` the amount moved i -> j; the
    layout follows the graph's neighborhood ordering. ``rho`` equals
    ``l1_term + lam * cost_term`` by construction. Alternate optimal plans
    can exist; only ``rho``, the marginals, and the objective split are
    stable contracts.
    """

    pairs: np.ndarray
    flows: np.ndarray
    mu_tilde: np.ndarray
    rho: float
    l1_term: float
    cost_term: float
    lam: float
    timestamp: int | None = None

    @property
    def gamma(self) -> dict[tuple[int, int], float]:
        return {
            (int(i), int(j)): float(f)
            for (i, j), f in zip(self.pairs, self.flows)
        }


@dataclass
class EquilibriumMap:
    """Per-vertex balance diagnostics derived from an optimal plan.

    ``dsr`` is demand over transported supply with a unit denominator
    wherever the transported supply is zero; ``dsd`` is demand minus
    transported supply. The raw ``demand`` and ``optimal_supply`` vectors
    are kept because window aggregates weight by them.
    """

    dsr: np.ndarray
    dsd: np.ndarray
    demand: np.ndarray
    optimal_supply: np.ndarray
    timestamp: int | None = None


def pair_layout(graph: WeightedGraphStructure) -> tuple[np.ndarray, np.ndarray]:
    """Admissible (source, target) pairs and per-source block offsets."""
    sizes = graph.neighborhood_sizes
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    pairs = np.empty((int(offsets[-1]), 2), dtype=np.int64)
    for i, nbr in enumerate(graph.neighborhoods):
        pairs[offsets[i] : offsets[i + 1], 0] = i
        pairs[offsets[i] : offsets[i + 1], 1] = nbr
    return pairs, offsets


def assemble_lp(problem: GemProblem, with_names: bool = False) -> lpmod.StandardFormLP:
    """Equality-form LP whose optimum is the metric value.

    Columns: admissible flows, per-vertex absolute deviations, then the two
    slack blocks, giving n_flows + 3N variables over 3N rows.
    """
    graph = problem.graph
    n = graph.n
    pairs, _ = pair_layout(graph)
    n_flows = len(pairs)
    cost_vec = graph.cost[pairs[:, 0], pairs[:, 1]]
    if not np.all(np.isfinite(cost_vec)):
        raise GemComputationError("admissible pair with infinite cost")

    k = np.arange(n_flows)
    idx = np.arange(n)
    rows = np.concatenate(
        [pairs[:, 0], n + pairs[:, 1], 2 * n + pairs[:, 1], n + idx, 2 * n + idx, n + idx, 2 * n + idx]
    )
    cols = np.concatenate(
        [k, k, k, n_flows + idx, n_flows + idx, n_flows + n + idx, n_flows + 2 * n + idx]
    )
    data = np.concatenate(
        [
            np.ones(3 * n_flows),
            np.ones(n),  # deviation in coverage rows
            -np.ones(n),  # deviation in excess rows
            -np.ones(n),  # slack_hi
            np.ones(n),  # slack_lo
        ]
    )
    a = sp.coo_matrix((data, (rows, cols)), shape=(3 * n, n_flows + 3 * n)).tocsr()
    b = np.concatenate([problem.mu.values, problem.nu.values, problem.nu.values])
    c = np.concatenate([problem.lam * cost_vec, np.ones(n), np.zeros(2 * n)])
    names = None
    if with_names:
        names = [f"flow_{i}_{j}" for i, j in pairs]
        names += [f"dev_{i}" for i in range(n)]
        names += [f"slack_hi_{i}" for i in range(n)]
        names += [f"slack_lo_{i}" for i in range(n)]
    return lpmod.StandardFormLP(A=a, b=b, c=c, variable_names=names)


def _plan_from_solution(
    problem: GemProblem,
    pairs: np.ndarray,
    cost_vec: np.ndarray,
    x: np.ndarray,
) -> TransportPlan:
    flows = np.maximum(x[: len(pairs)], 0.0)
    mu_tilde = np.bincount(pairs[:, 1], weights=flows, minlength=problem.graph.n)
    l1 = float(np.abs(problem.nu.values - mu_tilde).sum())
    cost_term = float(cost_vec @ flows)
    return TransportPlan(
        pairs=pairs,
        flows=flows,
        mu_tilde=mu_tilde,
        rho=l1 + problem.lam * cost_term,
        l1_term=l1,
        cost_term=cost_term,
        lam=problem.lam,
        timestamp=problem.nu.timestamp,
    )


def compute_gem(
    problem: GemProblem, tolerances: lpmod.Tolerances = lpmod.Tolerances()
) -> TransportPlan:
    """Solve the transport program and return the optimal plan.

    Keeping all supply in place is always feasible (every vertex belongs to
    its own neighborhood), so any non-optimal status is an internal error.
    """
    graph = problem.graph
    pairs, _ = pair_layout(graph)
    cost_vec = graph.cost[pairs[:, 0], pairs[:, 1]]
    program = assemble_lp(problem)
    sol = lpmod.solve(program, tolerances)
    if sol.status != "optimal":
        raise GemComputationError(f"transport LP terminated with status {sol.status}")
    return _plan_from_solution(problem, pairs, cost_vec, sol.x)


def equilibrium_map(
    plan: TransportPlan, demand: MassVector, zero_tol: float = 1e-9
) -> EquilibriumMap:
    """Balance ratio and difference maps for one timestamp.

    Transported supplies within ``zero_tol`` of zero are snapped to exact
    zero before the unit-denominator rule so solver noise cannot blow up
    the ratio.
    """
    if len(demand) != len(plan.mu_tilde):
        raise ValueError("demand vector does not match the plan's graph")
    supply_opt = np.where(plan.mu_tilde <= zero_tol, 0.0, plan.mu_tilde)
    o = demand.values
    denom = supply_opt + (supply_opt == 0.0)
    return EquilibriumMap(
        dsr=o / denom,
        dsd=o - supply_opt,
        demand=o.copy(),
        optimal_supply=supply_opt,
        timestamp=demand.timestamp if demand.timestamp is not None else plan.timestamp,
    )


def aggregate_maps(
    maps: list[EquilibriumMap],
    region: np.ndarray | list[int] | None = None,
    weight_mode: str = "demand",
) -> tuple[float, float]:
    """Weighted window aggregates: mean balance ratio, mean |difference|.

    Weights are the per-cell demand, or the mean of demand and transported
    supply. An all-zero weight window has no meaningful average and raises
    ``AggregateUndefinedError`` rather than returning NaN.
    """
    if not maps:
        raise AggregateUndefinedError("no maps in window")
    if weight_mode not in ("demand", "mean_supply_demand"):
        raise ValueError(f"unknown weight_mode {weight_mode!r}")
    idx = np.arange(len(maps[0].dsr)) if region is None else np.asarray(region, dtype=int)
    if len(idx) == 0:
        raise AggregateUndefinedError("empty region")
    w_sum = 0.0
    dsr_sum = 0.0
    adsd_sum = 0.0
    for m in maps:
        if weight_mode == "demand":
            w = m.demand[idx]
        else:
            w = 0.5 * (m.demand[idx] + m.optimal_supply[idx])
        w_sum += float(w.sum())
        dsr_sum += float((w * m.dsr[idx]).sum())
        adsd_sum += float((w * np.abs(m.dsd[idx])).sum())
    if w_sum <= 0.0:
        raise AggregateUndefinedError("all aggregation weights are zero")
    return dsr_sum / w_sum, adsd_sum / w_sum


def default_lambda(graph: WeightedGraphStructure, target: float = 0.45) -> float:
    """Cost weight putting lam * (max first-hop cost) at ``target``.

    Falls back to 0 on graphs without transport edges, where the cost term
    is irrelevant.
    """
    worst = graph.max_first_order_cost()
    return target / worst if worst > 0 else 0.0


# ---------------------------------------------------------------------------
# Multilevel (coarsened) evaluation


def coarsen_hex_graph(
    graph: WeightedGraphStructure, factor: int
) -> tuple[WeightedGraphStructure, np.ndarray]:
    """Merge factor x factor axial blocks into a coarser hex grid.

    Returns the coarse graph plus the fine-to-coarse vertex map. Blocked
    pairs of the fine grid are dropped: partial blockage inside a merged
    cell has no faithful coarse counterpart.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    spec = graph.hex_spec
    if spec is None:
        raise ValueError("coarsening by factor requires a hex-grid graph")
    if factor == 1:
        return graph, np.arange(graph.n, dtype=np.int64)
    rows = -(-spec.rows // factor)
    cols = -(-spec.cols // factor)
    coarse_spec = HexGridSpec(
        rows=rows,
        cols=cols,
        side_length_m=spec.side_length_m * factor,
        adjacent_distance_m=spec.adjacent_distance_m * factor,
    )
    coarse = build_hex_grid(coarse_spec, neighborhood_order=graph.order)
    if graph.self_cost:
        from .graph import with_self_cost

        coarse = with_self_cost(coarse, graph.self_cost)
    mapping = np.empty(graph.n, dtype=np.int64)
    for v in range(graph.n):
        q, r = spec.axial(v)
        mapping[v] = coarse_spec.vertex_id(q // factor, r // factor)
    return coarse, mapping


def coarsen_problem(
    problem: GemProblem,
    coarse_graph: WeightedGraphStructure,
    mapping: np.ndarray,
    lam: float | None = None,
) -> GemProblem:
    """Sum masses within coarse cells; the map must partition the vertices."""
    mapping = np.asarray(mapping, dtype=np.int64)
    if mapping.shape != (problem.graph.n,):
        raise ValueError("mapping must assign every fine vertex exactly one coarse vertex")
    if np.any(mapping < 0) or np.any(mapping >= coarse_graph.n):
        raise ValueError("mapping references vertices outside the coarse graph")
    if len(np.unique(mapping)) != coarse_graph.n:
        raise ValueError("mapping is not surjective onto the coarse graph")
    mu = np.bincount(mapping, weights=problem.mu.values, minlength=coarse_graph.n)
    nu = np.bincount(mapping, weights=problem.nu.values, minlength=coarse_graph.n)
    return GemProblem.from_arrays(
        coarse_graph, mu, nu, problem.lam if lam is None else lam,
        timestamp=problem.nu.timestamp,
    )


def multilevel_gem(
    problem: GemProblem, factor: int, lam: float | None = None
) -> tuple[TransportPlan, GemProblem]:
    """Metric recomputed on the factor-coarsened grid.

    The coarse value is a summary of large-scale structure, not an
    approximation of the fine value.
    """
    coarse_graph, mapping = coarsen_hex_graph(problem.graph, factor)
    coarse_problem = coarsen_problem(problem, coarse_graph, mapping, lam=lam)
    return compute_gem(coarse_problem), coarse_problem


# ---------------------------------------------------------------------------
# Random transport costs


@dataclass
class ExpectationBoundResult:
    empirical_mean: float
    bound: float
    alpha1: float
    alpha2: float
    margin: float
    std_error: float
    trials: int
    seed: int


def monte_carlo_expectation_bound(
    problem: GemProblem,
    cost_low: np.ndarray | float,
    cost_high: np.ndarray | float,
    trials: int,
    seed: int,
    feasible_point: np.ndarray | None = None,
) -> ExpectationBoundResult:
    """Empirical mean of the optimum under uniform random pair costs.

    Each admissible pair cost is drawn independently from
    Uniform[cost_low, cost_high] (broadcast over the pair layout), the
    program re-solved, and the mean optimum compared against the closed-form
    bound (1/alpha2) * (sum lam*E[cost]*x_flows + sum x_deviations) evaluated
    at a fixed feasible point. Uniform costs give alpha2 = 1/2 and
    alpha1 = high / (high + low) per pair; the reported alpha1 is the
    minimum over pairs, which keeps the conditional-mean condition valid
    for all of them simultaneously. The default feasible point keeps all
    supply in place and absorbs the imbalance in the deviation block.

    Raises ``GemComputationError`` if the empirical mean lands above the
    bound by more than four standard errors.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    graph = problem.graph
    n = graph.n
    pairs, offsets = pair_layout(graph)
    n_flows = len(pairs)
    low = np.broadcast_to(np.asarray(cost_low, dtype=float), (n_flows,)).copy()
    high = np.broadcast_to(np.asarray(cost_high, dtype=float), (n_flows,)).copy()
    if np.any(low < 0) or np.any(high < low):
        raise ValueError("need 0 <= cost_low <= cost_high elementwise")

    if feasible_point is None:
        feasible_point = np.zeros(n_flows + 3 * n)
        for i in range(n):
            nbr = graph.neighborhoods[i]
            pos = int(np.searchsorted(nbr, i))
            feasible_point[offsets[i] + pos] = problem.mu.values[i]
        resid = problem.nu.values - problem.mu.values
        dev = np.abs(resid)
        feasible_point[n_flows : n_flows + n] = dev
        feasible_point[n_flows + n : n_flows + 2 * n] = dev - resid
        feasible_point[n_flows + 2 * n :] = dev + resid
    feasible_point = np.asarray(feasible_point, dtype=float)
    if feasible_point.shape != (n_flows + 3 * n,):
        raise ValueError("feasible point has wrong length")

    alpha2 = 0.5
    active = high > 0
    alpha1 = float(np.min(high[active] / (high[active] + low[active]))) if active.any() else 0.5
    mean_cost = 0.5 * (low + high)
    bound = (
        float(problem.lam * (mean_cost * feasible_point[:n_flows]).sum())
        + float(feasible_point[n_flows : n_flows + n].sum())
    ) / alpha2

    program = assemble_lp(problem)
    values = np.empty(trials)
    children = np.random.SeedSequence(seed).spawn(trials)
    for t, child in enumerate(children):
        rng = np.random.default_rng(child)
        sampled = rng.uniform(low, high)
        program.c[:n_flows] = problem.lam * sampled
        sol = lpmod.solve(program)
        if sol.status != "optimal":
            raise GemComputationError(f"trial {t} terminated with status {sol.status}")
        values[t] = sol.objective
    empirical = float(values.mean())
    sem = float(values.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    if empirical > bound + 4.0 * sem + 1e-12:
        raise GemComputationError(
            f"empirical mean {empirical:.6g} exceeds bound {bound:.6g}"
        )
    return ExpectationBoundResult(
        empirical_mean=empirical,
        bound=bound,
        alpha1=alpha1,
        alpha2=alpha2,
        margin=bound - empirical,
        std_error=sem,
        trials=trials,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Snapshot / plan / map files


@dataclass(frozen=True)
class Snapshot:
    """Per-vertex demand and supply counts at one timestamp."""

    timestamp: int
    demand: np.ndarray
    supply: np.ndarray


def read_snapshots(path, n: int) -> list[Snapshot]:
    """Read `timestamp,vertex_id,demand,supply` rows; absent rows are zero."""
    rows = read_rows(path, ["timestamp", "vertex_id", "demand", "supply"])
    by_time: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for row in rows:
        t = int(row["timestamp"])
        v = int(row["vertex_id"])
        if not (0 <= v < n):
            raise ValueError(f"vertex_id {v} out of range [0, {n})")
        if t not in by_time:
            by_time[t] = (np.zeros(n), np.zeros(n))
        demand, supply = by_time[t]
        demand[v] += float(row["demand"])
        supply[v] += float(row["supply"])
    return [
        Snapshot(timestamp=t, demand=d, supply=s)
        for t, (d, s) in sorted(by_time.items())
    ]


def write_snapshots(path, snapshots: list[Snapshot], provenance=None) -> None:
    rows = []
    for snap in snapshots:
        for v in range(len(snap.demand)):
            d, s = snap.demand[v], snap.supply[v]
            if d == 0 and s == 0:
                continue
            rows.append([snap.timestamp, v, fmt(d), fmt(s)])
    write_csv(path, ["timestamp", "vertex_id", "demand", "supply"], rows, provenance)


def write_plan_csv(path, plan: TransportPlan, provenance=None) -> None:
    rows = [
        [int(i), int(j), fmt(f)]
        for (i, j), f in zip(plan.pairs, plan.flows)
        if f > 0
    ]
    write_csv(path, ["from_vertex", "to_vertex", "flow"], rows, provenance)


def write_maps_csv(path, maps: list[EquilibriumMap], provenance=None) -> None:
    rows = []
    for m in maps:
        for v in range(len(m.dsr)):
            rows.append([m.timestamp, v, fmt(m.dsr[v]), fmt(m.dsd[v])])
    write_csv(path, ["timestamp", "vertex_id", "dsr", "dsd"], rows, provenance)
