"""Answer-rate prediction and switchback policy evaluation.

Two workflows live here. The prediction study turns per-minute snapshot
streams into four per-window metric series (raw-count L2, Hellinger,
windowed balanced transport, and the equilibrium-ratio aggregate), builds
lagged feature matrices, and scores linear forecasts of the log answer
rate. The policy evaluation fits a per-interval panel regression with
day-level correlated errors by iterated estimating equations and tests the
average treatment effect per day with a cluster-robust variance.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import baselines
from .csvio import fmt, read_rows, write_csv
from .dispatch import PolicyParams
from .gem import (
    AggregateUndefinedError,
    GemProblem,
    MassVector,
    Snapshot,
    aggregate_maps,
    compute_gem,
    equilibrium_map,
)
from .graph import WeightedGraphStructure
from .simulator import EpisodeMetrics, SimConfig, run_episode

log = logging.getLogger(__name__)

METRIC_NAMES = ("gem", "hellinger", "l2", "wasserstein")


# ---------------------------------------------------------------------------
# Metric series over snapshot windows


def build_metric_series(
    snapshots: list[Snapshot],
    graph: WeightedGraphStructure,
    lam: float,
    window_min: int = 10,
    weight_mode: str = "demand",
) -> tuple[list[int], dict[str, np.ndarray]]:
    """Per-window values of all four metrics; undefined windows hold NaN.

    The equilibrium metric enters as the demand-weighted window aggregate of
    the per-minute balance ratio. Hellinger and L2 stack the window's
    per-minute vectors; the transport baseline is the demand-weighted mean
    of per-minute normalized values and is undefined whenever a minute with
    demand has no supply to normalize.
    """
    starts: list[int] = []
    series: dict[str, list[float]] = {name: [] for name in METRIC_NAMES}
    finite_cost = bool(np.all(np.isfinite(graph.cost)))
    for begin in range(0, len(snapshots), window_min):
        window = snapshots[begin : begin + window_min]
        starts.append(window[0].timestamp)
        pairs = [(s.supply, s.demand) for s in window]
        series["l2"].append(baselines.windowed_l2(pairs))
        try:
            series["hellinger"].append(baselines.windowed_hellinger(pairs))
        except baselines.ZeroMassError:
            series["hellinger"].append(np.nan)
        try:
            maps = []
            for snap in window:
                plan = compute_gem(
                    GemProblem.from_arrays(
                        graph, snap.supply, snap.demand, lam, timestamp=snap.timestamp
                    )
                )
                maps.append(
                    equilibrium_map(plan, MassVector(snap.demand, "demand", snap.timestamp))
                )
            dsr, _ = aggregate_maps(maps, weight_mode=weight_mode)
            series["gem"].append(dsr)
        except AggregateUndefinedError:
            series["gem"].append(np.nan)
        value = np.nan
        if finite_cost:
            try:
                active = [
                    (s.supply, s.demand) for s in window if s.demand.sum() > 0
                ]
                if active:
                    value = baselines.windowed_wasserstein(active, graph.cost)
            except baselines.ZeroMassError:
                value = np.nan
        series["wasserstein"].append(value)
    return starts, {name: np.array(vals) for name, vals in series.items()}


def answer_rate_series(
    order_outcomes: list[tuple[int, int, int]], horizon_min: int, window_min: int = 10
) -> np.ndarray:
    """Answered share of orders arriving in each window; NaN when none."""
    n_windows = horizon_min // window_min
    total = np.zeros(n_windows)
    answered = np.zeros(n_windows)
    for arrival, ok, _ in order_outcomes:
        w = arrival // window_min
        if w < n_windows:
            total[w] += 1
            answered[w] += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = answered / total
    rate[total == 0] = np.nan
    return rate


# ---------------------------------------------------------------------------
# Lagged features and linear forecasts


@dataclass
class FeatureMatrix:
    """Design matrix of lagged metric values against log answer rate.

    Rows mix 10 within-day lags ending at the current window with the
    target window's value on each of the previous five days; the target is
    the log answer rate ``horizon`` windows ahead. ``index`` holds the
    (day, target window) of each row and ``dropped`` counts candidate rows
    lost to undefined metrics or zero answer rates.
    """

    x: np.ndarray
    y: np.ndarray
    index: np.ndarray
    dropped: int
    horizon: int
    metric: str = ""


def build_features(
    metric: np.ndarray,
    answer_rate: np.ndarray,
    horizon: int,
    n_intra: int = 10,
    n_daily: int = 5,
    metric_name: str = "",
) -> FeatureMatrix:
    """Lagged design over a (days, windows) grid of metric values."""
    metric = np.asarray(metric, dtype=float)
    answer_rate = np.asarray(answer_rate, dtype=float)
    if metric.shape != answer_rate.shape or metric.ndim != 2:
        raise ValueError("metric and answer-rate grids must share (days, windows) shape")
    n_days, n_windows = metric.shape
    rows, targets, index = [], [], []
    dropped = 0
    for d in range(n_daily, n_days):
        for w in range(n_intra - 1, n_windows - horizon):
            tw = w + horizon
            feats = np.concatenate(
                [metric[d, w - n_intra + 1 : w + 1], metric[d - n_daily : d, tw][::-1]]
            )
            ar = answer_rate[d, tw]
            if not np.all(np.isfinite(feats)) or not np.isfinite(ar) or ar <= 0:
                dropped += 1
                continue
            rows.append(feats)
            targets.append(math.log(ar))
            index.append((d, tw))
    if not rows:
        raise ValueError("no usable feature rows")
    return FeatureMatrix(
        x=np.array(rows),
        y=np.array(targets),
        index=np.array(index),
        dropped=dropped,
        horizon=horizon,
        metric=metric_name,
    )


def align_feature_rows(features: dict[str, FeatureMatrix]) -> dict[str, FeatureMatrix]:
    """Restrict every metric's rows to the (day, window) targets all share."""
    keysets = [
        {tuple(ix) for ix in fm.index}
        for fm in features.values()
    ]
    common = set.intersection(*keysets)
    aligned = {}
    for name, fm in features.items():
        keep = np.array([tuple(ix) in common for ix in fm.index])
        aligned[name] = FeatureMatrix(
            x=fm.x[keep],
            y=fm.y[keep],
            index=fm.index[keep],
            dropped=fm.dropped + int((~keep).sum()),
            horizon=fm.horizon,
            metric=fm.metric,
        )
    return aligned


@dataclass
class PredictionResult:
    rmse: float
    mape: float
    predictions: np.ndarray
    y_test: np.ndarray
    coef: np.ndarray
    n_train: int
    n_test: int
    used_ridge: bool


def fit_predict_ols(features: FeatureMatrix, train_days: int) -> PredictionResult:
    """Least squares on days before the cutoff, scored on the rest.

    Singular designs fall back to a ridge solve with penalty 1e-8. Both
    scores are on the log scale; rows whose target is exactly zero are
    excluded from the percentage error.
    """
    train = features.index[:, 0] < train_days
    test = ~train
    if train.sum() == 0 or test.sum() == 0:
        raise ValueError("train/test split leaves an empty side")
    x_train = np.column_stack([np.ones(int(train.sum())), features.x[train]])
    x_test = np.column_stack([np.ones(int(test.sum())), features.x[test]])
    y_train, y_test = features.y[train], features.y[test]
    coef, _, rank, _ = np.linalg.lstsq(x_train, y_train, rcond=None)
    used_ridge = rank < x_train.shape[1]
    if used_ridge:
        gram = x_train.T @ x_train + 1e-8 * np.eye(x_train.shape[1])
        coef = np.linalg.solve(gram, x_train.T @ y_train)
    pred = x_test @ coef
    rmse = float(np.sqrt(np.mean((pred - y_test) ** 2)))
    nonzero = np.abs(y_test) > 0
    mape = (
        float(np.mean(np.abs(pred[nonzero] - y_test[nonzero]) / np.abs(y_test[nonzero])))
        if nonzero.any()
        else float("nan")
    )
    return PredictionResult(
        rmse=rmse,
        mape=mape,
        predictions=pred,
        y_test=y_test,
        coef=coef,
        n_train=int(train.sum()),
        n_test=int(test.sum()),
        used_ridge=used_ridge,
    )


def prediction_study(
    base_config: SimConfig,
    n_days: int,
    train_days: int,
    lam: float,
    horizon: int = 1,
    window_min: int = 10,
    day_rate_fn=None,
) -> dict[str, PredictionResult]:
    """Four-metric forecast comparison over one simulated multi-day world.

    Each day reruns the simulator with a spawned seed (and optionally a
    day-specific demand rate), all four metric series are computed on the
    same snapshots, and every metric gets the identical row set.
    """
    seeds = np.random.SeedSequence(base_config.seed).spawn(n_days)
    metric_grid: dict[str, list[np.ndarray]] = {name: [] for name in METRIC_NAMES}
    ar_grid: list[np.ndarray] = []
    for day, day_ss in enumerate(seeds):
        config = replace(base_config, seed=int(day_ss.generate_state(1)[0] % 2**31))
        if day_rate_fn is not None:
            config = replace(config, demand_rate=day_rate_fn(day))
        episode = run_episode(config)
        _, series = build_metric_series(
            episode.snapshots, config.graph, lam, window_min=window_min
        )
        for name in METRIC_NAMES:
            metric_grid[name].append(series[name])
        ar_grid.append(
            answer_rate_series(episode.order_outcomes, config.horizon_min, window_min)
        )
    rates = np.array(ar_grid)
    features = {
        name: build_features(np.array(metric_grid[name]), rates, horizon, metric_name=name)
        for name in METRIC_NAMES
    }
    features = align_feature_rows(features)
    return {
        name: fit_predict_ols(fm, train_days=train_days) for name, fm in features.items()
    }


# ---------------------------------------------------------------------------
# Interleaved (switchback) panels


@dataclass
class PanelDataset:
    """Per-day, per-interval outcomes with covariates and arm labels.

    ``outcomes[name]`` is (days, intervals) with NaN marking undefined
    cells; ``x`` stacks the two covariates (total demand, total online
    driver-minutes); ``a`` is -1 for baseline and +1 for treatment, the
    within-day alternation reversing its order on successive days.
    """

    outcomes: dict[str, np.ndarray]
    x: np.ndarray
    a: np.ndarray
    interval_min: int

    @property
    def n_days(self) -> int:
        return self.a.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.a.shape[1]


def interleaved_design(
    config: SimConfig,
    baseline: PolicyParams,
    treatment: PolicyParams,
    n_days: int,
    switch_min: int = 30,
    lam: float = 0.0002,
    day_seeds: list[int] | None = None,
) -> PanelDataset:
    """Run alternating half-interval policies and collect the panel.

    Day 0 opens with the baseline arm; each following day flips the opening
    arm. An episode horizon that is not a multiple of ``switch_min`` keeps
    only the complete intervals (logged, not an error).
    """
    n_intervals = config.horizon_min // switch_min
    if n_intervals < 1:
        raise ValueError("horizon shorter than one switch interval")
    if config.horizon_min % switch_min:
        log.warning(
            "horizon %d leaves a partial interval; truncating", config.horizon_min
        )
    if day_seeds is None:
        day_seeds = [
            int(ss.generate_state(1)[0] % 2**31)
            for ss in np.random.SeedSequence(config.seed).spawn(n_days)
        ]
    if len(day_seeds) != n_days:
        raise ValueError("day_seeds length must equal n_days")
    outcome_names = ("gem", "answer_rate", "finish_rate", "gmv")
    outcomes = {name: np.full((n_days, n_intervals), np.nan) for name in outcome_names}
    x = np.zeros((n_days, n_intervals, 2))
    a = np.zeros((n_days, n_intervals))
    for m in range(n_days):
        def schedule(minute, day=m):
            arm = (minute // switch_min + day) % 2
            return treatment if arm else baseline

        episode = run_episode(replace(config, seed=day_seeds[m]), policy_schedule=schedule)
        a[m] = [(1.0 if (k + m) % 2 else -1.0) for k in range(n_intervals)]
        per_interval = _interval_outcomes(episode, switch_min, n_intervals, config, lam)
        for name in outcome_names:
            outcomes[name][m] = per_interval[name]
        x[m] = per_interval["covariates"]
    return PanelDataset(outcomes=outcomes, x=x, a=a, interval_min=switch_min)


def _interval_outcomes(
    episode: EpisodeMetrics,
    switch_min: int,
    n_intervals: int,
    config: SimConfig,
    lam: float,
) -> dict[str, np.ndarray]:
    total = np.zeros(n_intervals)
    answered = np.zeros(n_intervals)
    finished = np.zeros(n_intervals)
    for arrival, ok, fin in episode.order_outcomes:
        k = arrival // switch_min
        if k < n_intervals:
            total[k] += 1
            answered[k] += ok
            finished[k] += fin
    with np.errstate(invalid="ignore", divide="ignore"):
        ar = np.where(total > 0, answered / total, np.nan)
        fr = np.where(total > 0, finished / total, np.nan)
    gmv = np.zeros(n_intervals)
    for minute, price in episode.completions:
        k = minute // switch_min
        if k < n_intervals:
            gmv[k] += price
    from .simulator import gem_trace_from_snapshots

    trace = gem_trace_from_snapshots(
        episode.snapshots[: n_intervals * switch_min], config.graph, lam, switch_min
    )
    gem_vals = np.array([np.nan if v is None else v for _, v in trace])
    covariates = np.zeros((n_intervals, 2))
    covariates[:, 0] = total
    online = episode.driver_counts[:, 0] + episode.driver_counts[:, 1]
    for k in range(n_intervals):
        covariates[k, 1] = online[k * switch_min : (k + 1) * switch_min].sum()
    return {
        "answer_rate": ar,
        "finish_rate": fr,
        "gmv": gmv,
        "gem": gem_vals,
        "covariates": covariates,
    }


def simulate_panel(
    n_days: int,
    n_intervals: int,
    beta0: np.ndarray | float,
    beta1: np.ndarray,
    beta2: np.ndarray | float,
    tau2: float,
    sigma2_eps: float,
    seed: int,
    x_scale: tuple[float, float] = (100.0, 500.0),
) -> PanelDataset:
    """Draw panels from the evaluation model itself (for calibration runs).

    Day effects are exchangeable with variance ``tau2``; cell noise is
    independent with variance ``sigma2_eps``. ``beta2`` is the per-interval
    arm coefficient (the per-day treatment effect is its sum when the
    interval length is the time unit).
    """
    rng = np.random.default_rng(seed)
    beta0 = np.broadcast_to(np.asarray(beta0, dtype=float), (n_intervals,))
    beta2 = np.broadcast_to(np.asarray(beta2, dtype=float), (n_intervals,))
    beta1 = np.asarray(beta1, dtype=float)
    a = np.zeros((n_days, n_intervals))
    for m in range(n_days):
        a[m] = [(1.0 if (k + m) % 2 else -1.0) for k in range(n_intervals)]
    x = np.empty((n_days, n_intervals, 2))
    x[..., 0] = x_scale[0] * (1.0 + 0.2 * rng.standard_normal((n_days, n_intervals)))
    x[..., 1] = x_scale[1] * (1.0 + 0.2 * rng.standard_normal((n_days, n_intervals)))
    eta = math.sqrt(tau2) * rng.standard_normal((n_days, 1))
    eps = math.sqrt(sigma2_eps) * rng.standard_normal((n_days, n_intervals))
    y = beta0[None, :] + (x @ beta1) + beta2[None, :] * a + eta + eps
    return PanelDataset(outcomes={"y": y}, x=x, a=a, interval_min=30)


# ---------------------------------------------------------------------------
# Estimating-equations fit with day-clustered errors


@dataclass
class GeeFit:
    """Per-interval coefficients and variance components.

    ``beta`` is (intervals, 1 + x_dim + 1): intercept, centered-covariate
    slopes, arm coefficient. ``sigma_eta`` is the moment estimate of the
    between-day error covariance (PSD-projected); the working covariance
    used for the fit is exchangeable: tau2 * ones + sigma2_eps * identity.
    ``unidentified`` lists (interval, coefficient) pairs whose design column
    is degenerate; their values come from a pseudoinverse and should not be
    interpreted.
    """

    beta: np.ndarray
    sigma_eta: np.ndarray
    sigma2_eps: float
    tau2: float
    converged: bool
    n_iter: int
    unidentified: list[tuple[int, int]]
    x_blocks: np.ndarray
    y: np.ndarray
    valid: np.ndarray
    bread_inv: np.ndarray
    outcome: str


def _design_blocks(panel: PanelDataset, outcome: str):
    y = panel.outcomes[outcome]
    valid = np.isfinite(y)
    if not valid.any():
        raise ValueError(f"outcome {outcome!r} has no finite cells")
    x_dim = panel.x.shape[2]
    xbar = np.zeros((panel.n_intervals, x_dim))
    for k in range(panel.n_intervals):
        rows = valid[:, k]
        if rows.any():
            xbar[k] = panel.x[rows, k].mean(axis=0)
    blocks = np.zeros((panel.n_days, panel.n_intervals, 2 + x_dim))
    blocks[..., 0] = 1.0
    blocks[..., 1 : 1 + x_dim] = panel.x - xbar[None, :, :]
    blocks[..., 1 + x_dim] = panel.a
    return blocks, y, valid


def fit_gee(
    panel: PanelDataset,
    outcome: str = "y",
    max_iter: int = 100,
    tol: float = 1e-8,
    exchangeable: bool = True,
) -> GeeFit:
    """Iterate between the stacked weighted fit and the variance components.

    With ``exchangeable=False`` the working covariance stays diagonal and
    the fit coincides with interval-wise least squares. Both arms must
    appear at every interval for the arm coefficients to be identified;
    degenerate columns are flagged, not repaired.
    """
    blocks, y, valid = _design_blocks(panel, outcome)
    n_days, n_int, p_int = blocks.shape
    n_par = n_int * p_int
    tau2, sigma2 = 0.0, 1.0
    beta = np.zeros(n_par)
    unidentified: list[tuple[int, int]] = []
    for k in range(n_int):
        d_k = blocks[valid[:, k], k, :]
        for c in range(p_int):
            if np.linalg.norm(d_k[:, c]) < 1e-12:
                unidentified.append((k, c))
    if unidentified:
        log.warning("degenerate design columns at %s", unidentified)

    converged = False
    n_iter = 0
    bread_inv = np.eye(n_par)
    for n_iter in range(1, max_iter + 1):
        bread = np.zeros((n_par, n_par))
        rhs = np.zeros(n_par)
        for m in range(n_days):
            idx = np.flatnonzero(valid[m])
            if len(idx) == 0:
                continue
            xb = blocks[m, idx, :]
            v = sigma2 * np.eye(len(idx))
            if exchangeable:
                v = v + tau2
            v_inv = np.linalg.inv(v)
            # Row k of the stacked design only loads coefficient block k, so
            # the weighted cross-products reduce to one small tensor product.
            contrib = np.einsum("kl,ka,lb->kalb", v_inv, xb, xb)
            flat = (idx[:, None] * p_int + np.arange(p_int)[None, :]).ravel()
            bread[np.ix_(flat, flat)] += contrib.reshape(len(flat), len(flat))
            w = v_inv @ y[m, idx]
            rhs[flat] += (w[:, None] * xb).ravel()
        bread_inv = np.linalg.pinv(bread, rcond=1e-12)
        beta_new = bread_inv @ rhs

        resid = np.full((n_days, n_int), np.nan)
        for m in range(n_days):
            idx = np.flatnonzero(valid[m])
            fitted = np.einsum(
                "ka,ka->k", blocks[m, idx, :], beta_new.reshape(n_int, p_int)[idx]
            )
            resid[m, idx] = y[m, idx] - fitted
        diag_sum = np.nansum(resid**2)
        diag_cnt = np.isfinite(resid).sum()
        off_sum, off_cnt = 0.0, 0
        for m in range(n_days):
            r = resid[m][np.isfinite(resid[m])]
            s = r.sum()
            off_sum += s * s - (r**2).sum()
            off_cnt += len(r) * (len(r) - 1)
        tau2_new = max(0.0, off_sum / off_cnt) if off_cnt else 0.0
        sigma2_new = max(1e-10, diag_sum / diag_cnt - tau2_new)
        if not exchangeable:
            tau2_new = 0.0
            sigma2_new = max(1e-10, diag_sum / diag_cnt)
        delta = max(
            float(np.max(np.abs(beta_new - beta))),
            abs(tau2_new - tau2),
            abs(sigma2_new - sigma2),
        )
        beta, tau2, sigma2 = beta_new, tau2_new, sigma2_new
        if delta < tol:
            converged = True
            break
    if not converged:
        log.warning("estimating equations did not converge in %d iterations", max_iter)

    # Unstructured between-day covariance, reported for diagnostics.
    s_hat = np.zeros((n_int, n_int))
    counts = np.zeros((n_int, n_int))
    resid_f = np.where(np.isfinite(resid), resid, 0.0)
    mask = np.isfinite(resid).astype(float)
    s_hat = resid_f.T @ resid_f
    counts = mask.T @ mask
    with np.errstate(invalid="ignore", divide="ignore"):
        s_hat = np.where(counts > 0, s_hat / np.maximum(counts, 1), 0.0)
    sigma_eta = s_hat - sigma2 * np.eye(n_int)
    eigvals, eigvecs = np.linalg.eigh((sigma_eta + sigma_eta.T) / 2)
    sigma_eta = (eigvecs * np.maximum(eigvals, 0.0)) @ eigvecs.T

    return GeeFit(
        beta=beta.reshape(n_int, p_int),
        sigma_eta=sigma_eta,
        sigma2_eps=sigma2,
        tau2=tau2,
        converged=converged,
        n_iter=n_iter,
        unidentified=unidentified,
        x_blocks=blocks,
        y=y,
        valid=valid,
        bread_inv=bread_inv,
        outcome=outcome,
    )


@dataclass
class AteResult:
    ate: float
    se: float
    t: float
    df: int
    p_one_sided: float
    p_two_sided: float
    relative_improvement_pct: float
    variance_kind: str  # bias-adjusted | plain-sandwich | model-based
    outcome: str


def _half_inverse_adjust(i_minus_h: np.ndarray, r: np.ndarray) -> np.ndarray:
    """(I - H)^{-1/2} r via the principal matrix power.

    The half power (rather than the full inverse) keeps the cluster
    sandwich nearly unbiased in this many-parameters / few-days regime,
    where the full leverage inverse overshoots badly. H is not symmetric,
    so this goes through a general eigendecomposition.
    """
    w, vecs = np.linalg.eig(i_minus_h)
    if np.any(np.abs(w) < 1e-8):
        raise np.linalg.LinAlgError("leverage matrix nearly singular")
    adj = (vecs @ np.diag(w ** -0.5) @ np.linalg.inv(vecs)).real
    return adj @ r


def test_ate(fit: GeeFit, dt0: float = 1.0) -> AteResult:
    """t-test of the per-day treatment effect, clustered by day.

    The effect is dt0 times the sum of arm coefficients across intervals.
    The variance is the day-clustered sandwich with a half-power leverage
    bias-adjustment of each day's residual vector; with too few days for
    any sandwich the model-based variance is reported instead (flagged in
    ``variance_kind``).
    """
    n_days, n_int, p_int = fit.x_blocks.shape
    n_par = n_int * p_int
    g = np.zeros(n_par)
    g[np.arange(n_int) * p_int + (p_int - 1)] = dt0
    ate = float(g @ fit.beta.ravel())

    # Days minus the rank of the tested contrast (scalar, so days - 1),
    # the usual reference for cluster-robust t statistics.
    df = n_days - 1
    variance_kind = "bias-adjusted"
    if df <= 0:
        log.warning("too few days for the bias-adjusted sandwich; using model-based variance")
        cov = fit.bread_inv
        variance_kind = "model-based"
        df = max(1, n_days - 1)
    else:
        meat = np.zeros((n_par, n_par))
        plain = False
        for m in range(n_days):
            idx = np.flatnonzero(fit.valid[m])
            if len(idx) == 0:
                continue
            xb = fit.x_blocks[m, idx, :]
            x_m = np.zeros((len(idx), n_par))
            for pos, k in enumerate(idx):
                x_m[pos, k * p_int : (k + 1) * p_int] = xb[pos]
            v = fit.sigma2_eps * np.eye(len(idx)) + fit.tau2
            v_inv = np.linalg.inv(v)
            r = fit.y[m, idx] - x_m @ fit.beta.ravel()
            h = x_m @ fit.bread_inv @ x_m.T @ v_inv
            try:
                r_adj = _half_inverse_adjust(np.eye(len(idx)) - h, r)
            except np.linalg.LinAlgError:
                r_adj = r
                plain = True
            u = x_m.T @ (v_inv @ r_adj)
            meat += np.outer(u, u)
        if plain:
            log.warning("leverage adjustment singular for some day; plain sandwich used")
            variance_kind = "plain-sandwich"
        cov = fit.bread_inv @ meat @ fit.bread_inv
    se = float(np.sqrt(max(g @ cov @ g, 0.0)))
    t_stat = ate / se if se > 0 else 0.0
    p_two = float(2 * stats.t.sf(abs(t_stat), df))
    p_one = float(stats.t.sf(t_stat, df))

    treated = fit.y[(fit.x_blocks[..., -1] > 0) & fit.valid]
    control = fit.y[(fit.x_blocks[..., -1] < 0) & fit.valid]
    base = float(np.mean(control)) if len(control) else float("nan")
    rel = (
        100.0 * (float(np.mean(treated)) - base) / abs(base)
        if len(treated) and base not in (0.0,) and np.isfinite(base)
        else float("nan")
    )
    return AteResult(
        ate=ate,
        se=se,
        t=t_stat,
        df=df,
        p_one_sided=p_one,
        p_two_sided=p_two,
        relative_improvement_pct=rel,
        variance_kind=variance_kind,
        outcome=fit.outcome,
    )


# ---------------------------------------------------------------------------
# Files and reports


def write_panel_csv(path, panel: PanelDataset, provenance=None) -> None:
    rows = []
    for name in sorted(panel.outcomes):
        y = panel.outcomes[name]
        for m in range(panel.n_days):
            for k in range(panel.n_intervals):
                if not np.isfinite(y[m, k]):
                    continue
                rows.append(
                    [
                        m,
                        k,
                        int(panel.a[m, k]),
                        name,
                        fmt(y[m, k]),
                        fmt(panel.x[m, k, 0]),
                        fmt(panel.x[m, k, 1]),
                    ]
                )
    write_csv(
        path,
        ["day", "interval", "arm", "outcome_name", "outcome",
         "demand_total", "supply_time_total"],
        rows,
        provenance,
    )


def read_panel_csv(path, interval_min: int = 30) -> PanelDataset:
    rows = read_rows(
        path,
        ["day", "interval", "arm", "outcome_name", "outcome",
         "demand_total", "supply_time_total"],
    )
    if not rows:
        raise ValueError(f"{path}: empty panel")
    n_days = max(int(r["day"]) for r in rows) + 1
    n_int = max(int(r["interval"]) for r in rows) + 1
    names = sorted({r["outcome_name"] for r in rows})
    outcomes = {name: np.full((n_days, n_int), np.nan) for name in names}
    x = np.zeros((n_days, n_int, 2))
    a = np.zeros((n_days, n_int))
    for r in rows:
        m, k = int(r["day"]), int(r["interval"])
        outcomes[r["outcome_name"]][m, k] = float(r["outcome"])
        a[m, k] = float(r["arm"])
        x[m, k] = (float(r["demand_total"]), float(r["supply_time_total"]))
    return PanelDataset(outcomes=outcomes, x=x, a=a, interval_min=interval_min)


def ate_report_json(results: list[AteResult], provenance: dict | None = None) -> str:
    payload = {
        "provenance": provenance or {},
        "results": [
            {
                "outcome": r.outcome,
                "ate": r.ate,
                "se": r.se,
                "t": r.t,
                "df": r.df,
                "p_one_sided": r.p_one_sided,
                "p_two_sided": r.p_two_sided,
                "relative_improvement_pct": r.relative_improvement_pct,
                "variance_kind": r.variance_kind,
            }
            for r in results
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def ate_report_markdown(results: list[AteResult]) -> str:
    lines = [
        "| outcome | relative improvement (%) | p-value |",
        "| --- | --- | --- |",
    ]
    for r in results:
        lines.append(
            f"| {r.outcome} | {r.relative_improvement_pct:.2f} | {r.p_two_sided:.3g} |"
        )
    return "\n".join(lines)
