"""Comparison distances between supply and demand snapshots.

Three classical measures computed on the same per-vertex count data as the
transport metric: the raw-count L2 distance, the Hellinger distance on
normalized distributions, and the balanced transport (Wasserstein) distance
on normalized distributions with every vertex pair admissible. The
normalization step is exactly what makes the latter two blind to overall
scale imbalance; tests pin that behavior down as a known limitation.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp

from . import lp as lpmod
from .csvio import fmt, write_csv
from .gem import MassVector

log = logging.getLogger(__name__)


class ZeroMassError(ValueError):
    """A side with zero total mass cannot be normalized."""


def normalize(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    total = values.sum()
    if total <= 0:
        raise ZeroMassError("cannot normalize a zero-mass vector")
    return values / total


def _values(mass) -> np.ndarray:
    return mass.values if isinstance(mass, MassVector) else np.asarray(mass, dtype=float)


def l2_distance(mu, nu) -> float:
    """Euclidean distance between the raw count vectors."""
    a, b = _values(mu), _values(nu)
    if a.shape != b.shape:
        raise ValueError("mass vectors must have the same length")
    return float(np.sqrt(((a - b) ** 2).sum()))


def hellinger_distance(mu, nu) -> float:
    """Hellinger distance between the normalized distributions, in [0, 1]."""
    p = normalize(_values(mu))
    q = normalize(_values(nu))
    if p.shape != q.shape:
        raise ValueError("mass vectors must have the same length")
    return float(np.sqrt(0.5 * ((np.sqrt(p) - np.sqrt(q)) ** 2).sum()))


def balanced_wasserstein(mu, nu, cost: np.ndarray) -> float:
    """Classical transport distance after normalizing both sides.

    All vertex pairs are admissible and marginals are matched exactly, so
    the cost matrix must be finite everywhere.
    """
    p = normalize(_values(mu))
    q = normalize(_values(nu))
    n = len(p)
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (n, n):
        raise ValueError("cost matrix shape does not match the masses")
    if not np.all(np.isfinite(cost)):
        raise ValueError("balanced transport needs finite costs on all pairs")
    # Coupling variables row-major: gamma[i, j] = x[i * n + j].
    cols = np.arange(n * n)
    row_idx = np.concatenate([cols // n, n + cols % n])
    a = sp.coo_matrix(
        (np.ones(2 * n * n), (row_idx, np.concatenate([cols, cols]))),
        shape=(2 * n, n * n),
    ).tocsr()
    program = lpmod.StandardFormLP(A=a, b=np.concatenate([p, q]), c=cost.ravel())
    sol = lpmod.solve(program)
    if sol.status != "optimal":
        raise RuntimeError(f"transport LP terminated with status {sol.status}")
    return sol.objective


def windowed_l2(window: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """L2 norm of the stacked per-timestamp difference vectors."""
    if not window:
        raise ValueError("empty window")
    total = 0.0
    for mu, nu in window:
        total += float(((_values(mu) - _values(nu)) ** 2).sum())
    return float(np.sqrt(total))


def windowed_hellinger(window: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Hellinger distance on distributions stacked across the window."""
    if not window:
        raise ValueError("empty window")
    mu_stack = np.concatenate([_values(mu) for mu, _ in window])
    nu_stack = np.concatenate([_values(nu) for _, nu in window])
    return hellinger_distance(mu_stack, nu_stack)


def windowed_wasserstein(
    window: list[tuple[np.ndarray, np.ndarray]],
    cost: np.ndarray,
    demand_totals: list[float] | np.ndarray | None = None,
) -> float:
    """Demand-weighted mean of per-timestamp balanced transport distances.

    Weights default to each timestamp's total demand over the window total;
    zero-demand timestamps carry no weight and are skipped. A window with no
    demand at all has no defined value.
    """
    if not window:
        raise ValueError("empty window")
    if demand_totals is None:
        demand_totals = [float(_values(nu).sum()) for _, nu in window]
    weights = np.asarray(demand_totals, dtype=float)
    if weights.shape != (len(window),):
        raise ValueError("demand_totals length must match the window")
    total = weights.sum()
    if total <= 0:
        raise ZeroMassError("window has zero total demand")
    value = 0.0
    for (mu, nu), w in zip(window, weights):
        if w == 0:
            continue
        value += (w / total) * balanced_wasserstein(mu, nu, cost)
    return value


def write_metric_series_csv(path, rows, provenance=None) -> None:
    """Rows of (window_start, metric_name, value)."""
    out = [[int(t), name, fmt(v)] for t, name, v in rows]
    write_csv(path, ["window_start", "metric_name", "value"], out, provenance)
