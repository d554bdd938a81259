"""Out-of-sample model comparison via PSIS-LOO and WAIC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dataio import Dataset
from .models import ModelSpec, constrain, log_likelihood_pointwise
from .nuts import Draws

K_THRESHOLD = 0.7
DEGENERATE_K = -np.inf  # sentinel for a constant tail


@dataclass
class LogLikMatrix:
    """Pointwise log likelihood, one row per posterior draw."""

    values: np.ndarray  # (S, n)
    chain_index: np.ndarray  # (S,)
    iteration_index: np.ndarray  # (S,)

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    @property
    def n_rows(self) -> int:
        return self.values.shape[1]


@dataclass
class LooResult:
    elpd_loo: float
    se_elpd: float
    p_loo: float
    pointwise: np.ndarray  # (n,) elpd_i
    pareto_k: np.ndarray  # (n,)
    n_draws: int
    flagged: np.ndarray = field(default=None)  # k > 0.7

    def __post_init__(self):
        if self.flagged is None:
            self.flagged = self.pareto_k > K_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "elpd_loo": self.elpd_loo,
            "se_elpd": self.se_elpd,
            "p_loo": self.p_loo,
            "n_draws": self.n_draws,
            "n_flagged": int(np.sum(self.flagged)),
            "pointwise": [float(v) for v in self.pointwise],
            "pareto_k": [float(v) for v in self.pareto_k],
        }


@dataclass
class WaicResult:
    elpd_waic: float
    se_elpd: float
    p_waic: float
    pointwise: np.ndarray


@dataclass
class ComparisonTable:
    """Models ranked best first, with differences to the immediately better one."""

    rows: list[dict]  # name, rank, elpd, diff, se_diff (diff fields None for best)

    def to_csv_rows(self) -> list[list]:
        out = [["model", "rank", "difference", "standard_error"]]
        for row in self.rows:
            diff = "" if row["diff"] is None else row["diff"]
            se = "" if row["se_diff"] is None else row["se_diff"]
            out.append([row["name"], row["rank"], diff, se])
        return out

    def to_dict(self) -> dict:
        return {"rows": self.rows}


def pointwise_loglik(spec: ModelSpec, draws: Draws, dataset) -> LogLikMatrix:
    """Evaluate the pointwise log likelihood at every posterior draw.

    ``dataset`` may be a Dataset, a (design, outcomes) pair, or a plain
    outcome array for the toy variant.
    """
    if draws.spec_dict is not None and ModelSpec.from_dict(draws.spec_dict) != spec:
        raise ValueError("draws were produced for a different model spec")
    if isinstance(dataset, Dataset):
        data = (dataset.design(), dataset.bugs())
        n = dataset.n_rows
    elif isinstance(dataset, tuple):
        data = dataset
        n = len(dataset[1])
    else:
        data = np.asarray(dataset, dtype=float)
        n = len(data)
    flat = draws.flat()
    values = np.empty((flat.shape[0], n))
    for s in range(flat.shape[0]):
        params = constrain(spec, flat[s])
        values[s] = log_likelihood_pointwise(spec, params, data)
    chain = np.repeat(np.arange(draws.n_chains), draws.n_draws)
    iteration = np.tile(np.arange(draws.n_draws), draws.n_chains)
    return LogLikMatrix(values, chain, iteration)


def gpd_fit(tail: np.ndarray) -> tuple[float, float]:
    """Generalized Pareto (k, sigma) by the Zhang-Stephens posterior mean.

    ``tail`` holds exceedances over the cutoff, not necessarily sorted.
    A constant tail is degenerate: returns (-inf, 0) and the caller is
    expected to skip smoothing.
    """
    x = np.sort(np.asarray(tail, dtype=float))
    n = len(x)
    if n < 5:
        raise ValueError("gpd_fit needs at least 5 tail samples")
    if x[0] <= 0:
        raise ValueError("gpd_fit needs strictly positive exceedances")
    if x[-1] - x[0] < 1e-12 * x[-1]:
        return DEGENERATE_K, 0.0
    prior_b, prior_k = 3.0, 10.0
    m = 30 + int(np.sqrt(n))
    quartile = x[int(n / 4 + 0.5) - 1]
    b = 1.0 / x[-1] + (1.0 - np.sqrt(m / (np.arange(1.0, m + 1) - 0.5))) / (prior_b * quartile)
    k_grid = np.mean(np.log1p(-b[:, None] * x), axis=1)
    profile = n * (np.log(-b / k_grid) - k_grid - 1.0)
    with np.errstate(over="ignore"):
        weights = 1.0 / np.sum(np.exp(profile - profile[:, None]), axis=1)
    weights /= weights.sum()
    b_post = float(np.sum(b * weights))
    k_post = float(np.mean(np.log1p(-b_post * x)))
    sigma = -k_post / b_post
    k_post = k_post * n / (n + prior_k) + prior_k * 0.5 / (n + prior_k)
    return k_post, float(sigma)


def _gpd_quantile(probs: np.ndarray, k: float, sigma: float) -> np.ndarray:
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-probs)
    return sigma * np.expm1(-k * np.log1p(-probs)) / k


def tail_length(n_draws: int) -> int:
    return int(np.ceil(min(0.2 * n_draws, 3.0 * np.sqrt(n_draws))))


def psis_smooth(log_ratios: np.ndarray) -> tuple[np.ndarray, float]:
    """Pareto-smooth one vector of log importance ratios.

    The largest ceil(min(0.2 S, 3 sqrt(S))) ratios are replaced by expected
    order statistics of the fitted generalized Pareto distribution, weights
    are truncated at the raw maximum, and the result is normalized so the
    log weights log-sum-exp to zero. Returns (log weights, k-hat); k-hat is
    -inf for a constant input and nan when the tail is too short to fit.
    """
    x = np.asarray(log_ratios, dtype=float)
    n = len(x)
    shifted = x - np.max(x)
    if np.max(shifted) - np.min(shifted) < 1e-14:
        return np.full(n, -np.log(n)), DEGENERATE_K
    n_tail = tail_length(n)
    order = np.argsort(shifted)
    cutoff = shifted[order[-n_tail - 1]]
    tail_mask = shifted > cutoff
    n_in_tail = int(np.sum(tail_mask))
    k = np.nan
    if n_in_tail >= 5:
        exp_cutoff = np.exp(cutoff)
        exceedances = np.exp(shifted[tail_mask]) - exp_cutoff
        if np.max(exceedances) - np.min(exceedances) < 1e-12 * max(np.max(exceedances), 1e-300):
            k = DEGENERATE_K
        else:
            k, sigma = gpd_fit(exceedances)
            if np.isfinite(k):
                probs = (np.arange(n_in_tail) + 0.5) / n_in_tail
                smoothed = np.log(_gpd_quantile(probs, k, sigma) + exp_cutoff)
                tail_order = np.argsort(shifted[tail_mask])
                replacement = np.empty(n_in_tail)
                replacement[tail_order] = smoothed
                shifted = shifted.copy()
                shifted[tail_mask] = np.minimum(replacement, 0.0)
    log_weights = shifted - logsumexp(shifted)
    return log_weights, float(k)


def loo(ll: LogLikMatrix) -> LooResult:
    """PSIS-LOO expected log pointwise predictive density.

    Importance ratios for row i are the negated log-likelihood column;
    rows whose Pareto k exceeds 0.7 are flagged, never refitted.
    """
    if ll.n_draws < 100:
        raise ValueError("loo needs at least 100 posterior draws")
    values = ll.values
    n = ll.n_rows
    pointwise = np.empty(n)
    pareto_k = np.empty(n)
    lpd = logsumexp(values, axis=0) - np.log(ll.n_draws)
    for i in range(n):
        log_weights, k = psis_smooth(-values[:, i])
        pointwise[i] = logsumexp(log_weights + values[:, i])
        pareto_k[i] = k
    elpd = float(np.sum(pointwise))
    se = float(np.sqrt(n * np.var(pointwise, ddof=1))) if n > 1 else 0.0
    p_loo = float(np.sum(lpd - pointwise))
    return LooResult(elpd, se, p_loo, pointwise, pareto_k, ll.n_draws)


def waic(ll: LogLikMatrix) -> WaicResult:
    """Widely applicable information criterion on the same matrix."""
    if ll.n_draws < 100:
        raise ValueError("waic needs at least 100 posterior draws")
    values = ll.values
    n = ll.n_rows
    lpd = logsumexp(values, axis=0) - np.log(ll.n_draws)
    penalty = np.var(values, axis=0, ddof=1)
    pointwise = lpd - penalty
    se = float(np.sqrt(n * np.var(pointwise, ddof=1))) if n > 1 else 0.0
    return WaicResult(float(np.sum(pointwise)), se, float(np.sum(penalty)), pointwise)


def compare(results: dict[str, LooResult]) -> ComparisonTable:
    """Rank models by elpd; report each one's difference to the next better.

    All results must share the same data rows in the same order.
    """
    if not results:
        raise ValueError("nothing to compare")
    n_rows = {name: r.pointwise.shape[0] for name, r in results.items()}
    if len(set(n_rows.values())) != 1:
        raise ValueError(f"mismatched row counts: {n_rows}")
    ordered = sorted(results.items(), key=lambda kv: (-kv[1].elpd_loo, kv[0]))
    rows = []
    for rank, (name, result) in enumerate(ordered, start=1):
        if rank == 1:
            rows.append(
                {"name": name, "rank": rank, "elpd": result.elpd_loo, "diff": None, "se_diff": None}
            )
            continue
        better = ordered[rank - 2][1]
        delta = result.pointwise - better.pointwise
        n = len(delta)
        rows.append(
            {
                "name": name,
                "rank": rank,
                "elpd": result.elpd_loo,
                "diff": float(np.sum(delta)),
                "se_diff": float(np.sqrt(n * np.var(delta, ddof=1))) if n > 1 else 0.0,
            }
        )
    return ComparisonTable(rows)


def differences_to_best(results: dict[str, LooResult]) -> ComparisonTable:
    """Same ranking, but differences are taken against the best model."""
    table = compare(results)
    best = table.rows[0]["name"]
    best_pw = results[best].pointwise
    for row in table.rows[1:]:
        delta = results[row["name"]].pointwise - best_pw
        row["diff"] = float(np.sum(delta))
        row["se_diff"] = float(np.sqrt(len(delta) * np.var(delta, ddof=1)))
    return table
