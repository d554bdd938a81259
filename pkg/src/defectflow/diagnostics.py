"""Convergence diagnostics: split R-hat, effective sample size, verdicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nuts import Draws

RHAT_LIMIT = 1.01
ESS_RATIO_FLOOR = 0.10


def _split_chains(x: np.ndarray) -> np.ndarray:
    """Halve each chain and stack the halves as separate chains."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    half = x.shape[1] // 2
    return np.vstack((x[:, :half], x[:, -half:]))


def split_rhat(x: np.ndarray) -> float:
    """Potential scale reduction over split half-chains.

    ``x`` has shape (n_chains, n_iterations); each chain is split in half and
    R-hat = sqrt(((n-1)/n * W + B/n) / W) is computed over the halves.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("split_rhat needs at least 2 chains and 4 iterations")
    halves = _split_chains(x)
    n = halves.shape[1]
    chain_means = halves.mean(axis=1)
    within = float(np.mean(np.var(halves, axis=1, ddof=1)))
    between = n * float(np.var(chain_means, ddof=1))
    if within == 0.0:
        return 1.0 if between == 0.0 else np.inf
    return float(np.sqrt(((n - 1) / n * within + between / n) / within))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT, lags 0..n-1."""
    n = x.shape[1]
    centered = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    spectrum = np.fft.rfft(centered, size, axis=1)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), size, axis=1)[:, :n]
    return acov / n


def ess(x: np.ndarray) -> float:
    """Effective sample size from chain-averaged autocorrelations.

    Autocorrelation sums are truncated by Geyer's initial monotone positive
    sequence. Constant input is reported as fully independent (the caller is
    expected to warn about the degeneracy).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] >= 4:
        x = _split_chains(x)
    n_chain, n_draw = x.shape
    if n_draw < 4:
        raise ValueError("ess needs at least 4 iterations")
    if np.max(x) - np.min(x) < np.finfo(float).resolution:
        return float(x.size)
    acov = _autocovariance(x)
    chain_means = x.mean(axis=1)
    mean_var = float(np.mean(acov[:, 0])) * n_draw / (n_draw - 1.0)
    var_plus = mean_var * (n_draw - 1.0) / n_draw
    if n_chain > 1:
        var_plus += float(np.var(chain_means, ddof=1))

    rho = np.zeros(n_draw)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - float(np.mean(acov[:, 1]))) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n_draw - 3 and (rho_even + rho_odd) > 0.0:
        rho_even = 1.0 - (mean_var - float(np.mean(acov[:, t + 1]))) / var_plus
        rho_odd = 1.0 - (mean_var - float(np.mean(acov[:, t + 2]))) / var_plus
        if rho_even + rho_odd >= 0.0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0.0:
        rho[max_t + 1] = rho_even
    # enforce monotone decrease over consecutive pairs
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    size = n_chain * n_draw
    tau = -1.0 + 2.0 * float(np.sum(rho[: max_t + 1])) + float(rho[max_t + 1])
    tau = max(tau, 1.0 / np.log10(size))
    return float(size / tau)


@dataclass
class Diagnostics:
    """Per-coordinate convergence table plus the overall verdict."""

    coordinate_names: list[str]
    rhat: np.ndarray | None  # None when fewer than 2 chains
    ess: np.ndarray
    ess_ratio: np.ndarray
    n_divergent: int
    energy_mean: np.ndarray  # per chain
    energy_sd: np.ndarray  # per chain
    total_draws: int
    passed: bool
    reasons: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def max_rhat(self) -> float | None:
        return None if self.rhat is None else float(np.max(self.rhat))

    @property
    def min_ess_ratio(self) -> float:
        return float(np.min(self.ess_ratio))

    @property
    def min_ess(self) -> float:
        return float(np.min(self.ess))

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "reasons": self.reasons,
            "warnings": self.warnings,
            "n_divergent": self.n_divergent,
            "total_draws": self.total_draws,
            "max_rhat": self.max_rhat,
            "min_ess": self.min_ess,
            "min_ess_ratio": self.min_ess_ratio,
            "coordinates": [
                {
                    "name": name,
                    "rhat": None if self.rhat is None else float(self.rhat[i]),
                    "ess": float(self.ess[i]),
                    "ess_ratio": float(self.ess_ratio[i]),
                }
                for i, name in enumerate(self.coordinate_names)
            ],
            "energy": {
                "mean": [float(v) for v in self.energy_mean],
                "sd": [float(v) for v in self.energy_sd],
            },
        }

    def table_rows(self) -> list[list]:
        rows = [["coordinate", "rhat", "ess", "ess_ratio"]]
        for i, name in enumerate(self.coordinate_names):
            rhat = "" if self.rhat is None else float(self.rhat[i])
            rows.append([name, rhat, float(self.ess[i]), float(self.ess_ratio[i])])
        return rows


def diagnose(draws: Draws, coordinate_names: list[str] | None = None) -> Diagnostics:
    """Aggregate split R-hat, ESS, and divergences into a pass/fail verdict.

    The verdict passes iff max R-hat < 1.01, every ESS ratio is at least 0.10,
    and no transition diverged.
    """
    dim = draws.dim
    names = coordinate_names or [f"u[{i}]" for i in range(dim)]
    if len(names) != dim:
        raise ValueError("coordinate name count does not match draw dimension")
    total = draws.n_chains * draws.n_draws
    warnings: list[str] = []
    reasons: list[str] = []

    rhat: np.ndarray | None
    if draws.n_chains >= 2:
        rhat = np.array([split_rhat(draws.sample[:, :, i]) for i in range(dim)])
    else:
        rhat = None
        warnings.append("rhat unavailable: fewer than 2 chains")

    ess_values = np.empty(dim)
    for i in range(dim):
        coords = draws.sample[:, :, i]
        if np.max(coords) - np.min(coords) < np.finfo(float).resolution:
            warnings.append(f"coordinate {names[i]} is constant; ess degenerate")
        ess_values[i] = ess(coords)
    ratios = ess_values / total

    n_div = draws.total_divergences()
    if rhat is not None and np.max(rhat) >= RHAT_LIMIT:
        reasons.append(f"max rhat {np.max(rhat):.4f} >= {RHAT_LIMIT}")
    if np.min(ratios) < ESS_RATIO_FLOOR:
        reasons.append(f"min ess ratio {np.min(ratios):.4f} < {ESS_RATIO_FLOOR}")
    if n_div > 0:
        reasons.append(f"divergences: {n_div}")

    return Diagnostics(
        coordinate_names=list(names),
        rhat=rhat,
        ess=ess_values,
        ess_ratio=ratios,
        n_divergent=n_div,
        energy_mean=draws.energy.mean(axis=1),
        energy_sd=draws.energy.std(axis=1, ddof=1),
        total_draws=total,
        passed=not reasons,
        reasons=reasons,
        warnings=warnings,
    )
