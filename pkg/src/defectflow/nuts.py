"""No-U-Turn sampler with dual-averaging step size and diagonal mass adaptation.

The trajectory is built by repeated doubling and sampled multinomially; a
doubling stops at a U-turn of the accumulated momentum or at the depth cap,
and a divergence is declared when the Hamiltonian error exceeds 1000.
Each chain owns a generator seeded by (seed, chain index), so results are
bit-identical no matter how chains are scheduled.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TargetFn = Callable[[np.ndarray], tuple[float, np.ndarray]]

DIVERGENCE_THRESHOLD = 1000.0
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75


class SamplerError(RuntimeError):
    """Raised when a chain cannot be initialized or the target misbehaves."""


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    init_radius: float = 2.0
    threads: int = 1

    def __post_init__(self) -> None:
        if min(self.n_chains, self.n_warmup, self.n_draws) < 1:
            raise ValueError("chain, warmup, and draw counts must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie strictly between 0 and 1")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be positive")

    def to_dict(self) -> dict:
        return {
            "n_chains": self.n_chains,
            "n_warmup": self.n_warmup,
            "n_draws": self.n_draws,
            "target_accept": self.target_accept,
            "max_tree_depth": self.max_tree_depth,
            "seed": self.seed,
            "init_radius": self.init_radius,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**d)


@dataclass
class Draws:
    """Post-warmup sample array plus per-iteration sampler statistics."""

    sample: np.ndarray  # (n_chains, n_draws, dim)
    divergent: np.ndarray  # (n_chains, n_draws) bool
    energy: np.ndarray  # (n_chains, n_draws)
    tree_depth: np.ndarray  # (n_chains, n_draws) int
    accept_stat: np.ndarray  # (n_chains, n_draws)
    config: SamplerConfig
    step_size: np.ndarray  # (n_chains,) adapted step size
    inv_mass: np.ndarray  # (n_chains, dim) diagonal inverse mass
    elapsed_seconds: float = 0.0
    spec_dict: dict | None = None  # ModelSpec.to_dict() when fitted to a model

    @property
    def n_chains(self) -> int:
        return self.sample.shape[0]

    @property
    def n_draws(self) -> int:
        return self.sample.shape[1]

    @property
    def dim(self) -> int:
        return self.sample.shape[2]

    def flat(self) -> np.ndarray:
        """Draws stacked chain-major: shape (n_chains * n_draws, dim)."""
        return self.sample.reshape(-1, self.dim)

    def total_divergences(self) -> int:
        return int(self.divergent.sum())


def leapfrog(
    target: TargetFn,
    theta: np.ndarray,
    momentum: np.ndarray,
    grad: np.ndarray,
    step: float,
    inv_mass: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """One leapfrog step; returns (theta, momentum, log prob, grad)."""
    momentum = momentum + 0.5 * step * grad
    theta = theta + step * inv_mass * momentum
    logp, grad = target(theta)
    momentum = momentum + 0.5 * step * grad
    return theta, momentum, logp, grad


def _kinetic(momentum: np.ndarray, inv_mass: np.ndarray) -> float:
    with np.errstate(over="ignore"):
        return 0.5 * float(np.sum(momentum**2 * inv_mass))


def _find_reasonable_step(
    target: TargetFn,
    theta: np.ndarray,
    logp: float,
    grad: np.ndarray,
    inv_mass: np.ndarray,
    rng: np.random.Generator,
) -> float:
    """Heuristic initial step size: cross an acceptance probability of 0.5."""
    step = 1.0
    momentum = rng.standard_normal(len(theta)) / np.sqrt(inv_mass)
    h0 = -logp + _kinetic(momentum, inv_mass)
    _, p1, logp1, _ = leapfrog(target, theta, momentum, grad, step, inv_mass)
    log_accept = h0 - (-logp1 + _kinetic(p1, inv_mass))
    if not np.isfinite(log_accept):
        log_accept = -np.inf
    direction = 1.0 if log_accept > np.log(0.5) else -1.0
    for _ in range(100):
        step *= 2.0**direction
        _, p1, logp1, _ = leapfrog(target, theta, momentum, grad, step, inv_mass)
        log_accept = h0 - (-logp1 + _kinetic(p1, inv_mass))
        if not np.isfinite(log_accept):
            log_accept = -np.inf
        if direction * log_accept <= direction * np.log(0.5):
            break
        if not 1e-10 < step < 1e10:
            break
    return float(np.clip(step, 1e-10, 1e10))


@dataclass
class _DualAveraging:
    mu: float
    target: float
    log_step: float = 0.0
    log_step_bar: float = 0.0
    h_bar: float = 0.0
    count: int = 0

    @classmethod
    def start(cls, step: float, target: float) -> "_DualAveraging":
        return cls(mu=float(np.log(10.0 * step)), target=target, log_step=float(np.log(step)))

    def update(self, accept_prob: float) -> float:
        self.count += 1
        eta = 1.0 / (self.count + _DA_T0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept_prob)
        self.log_step = self.mu - np.sqrt(self.count) / _DA_GAMMA * self.h_bar
        weight = self.count**-_DA_KAPPA
        self.log_step_bar = (1 - weight) * self.log_step_bar + weight * self.log_step
        return float(np.exp(self.log_step))

    def adapted(self) -> float:
        return float(np.exp(self.log_step_bar))


@dataclass
class _Welford:
    """Running mean/variance of warmup positions for the mass matrix."""

    mean: np.ndarray
    m2: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, dim: int) -> "_Welford":
        return cls(np.zeros(dim), np.zeros(dim))

    def push(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def regularized_variance(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.count - 1)
        # shrink toward a small diagonal, as a guard against few samples
        w = self.count / (self.count + 5.0)
        return w * var + (1.0 - w) * 1e-3


def _adaptation_windows(n_warmup: int) -> tuple[int, int, list[int]]:
    """(initial buffer, terminal buffer, variance-window closing iterations)."""
    if n_warmup < 40:
        return n_warmup, 0, []
    init = min(75, int(0.15 * n_warmup))
    term = min(50, int(0.10 * n_warmup))
    closes = []
    size = 25
    start = init
    while start + size < n_warmup - term:
        next_size = size * 2
        if start + size + next_size >= n_warmup - term:
            size = n_warmup - term - start
        closes.append(start + size)
        start += size
        size *= 2
    if not closes and n_warmup - term > init:
        closes.append(n_warmup - term)
    return init, term, closes


@dataclass
class _Tree:
    theta_minus: np.ndarray
    momentum_minus: np.ndarray
    grad_minus: np.ndarray
    theta_plus: np.ndarray
    momentum_plus: np.ndarray
    grad_plus: np.ndarray
    theta: np.ndarray  # proposal
    logp: float
    grad: np.ndarray
    momentum_prop: np.ndarray
    log_weight: float
    rho: np.ndarray  # accumulated momentum
    sum_accept: float
    n_leaves: int
    divergent: bool
    turning: bool


def _build_tree(
    target: TargetFn,
    theta: np.ndarray,
    momentum: np.ndarray,
    grad: np.ndarray,
    direction: int,
    depth: int,
    step: float,
    h0: float,
    inv_mass: np.ndarray,
    rng: np.random.Generator,
) -> _Tree:
    if depth == 0:
        theta1, p1, logp1, grad1 = leapfrog(target, theta, momentum, grad, direction * step, inv_mass)
        h1 = -logp1 + _kinetic(p1, inv_mass)
        energy_error = h1 - h0
        if not np.isfinite(energy_error):
            energy_error = np.inf
        divergent = energy_error > DIVERGENCE_THRESHOLD
        accept = float(np.exp(min(0.0, -energy_error))) if np.isfinite(energy_error) else 0.0
        return _Tree(
            theta1, p1, grad1, theta1, p1, grad1, theta1, logp1, grad1, p1,
            log_weight=-energy_error if np.isfinite(energy_error) else -np.inf,
            rho=p1.copy(), sum_accept=accept, n_leaves=1,
            divergent=divergent, turning=False,
        )

    first = _build_tree(target, theta, momentum, grad, direction, depth - 1, step, h0, inv_mass, rng)
    if first.divergent or first.turning:
        return first
    if direction == 1:
        second = _build_tree(
            target, first.theta_plus, first.momentum_plus, first.grad_plus,
            direction, depth - 1, step, h0, inv_mass, rng,
        )
        first.theta_plus = second.theta_plus
        first.momentum_plus = second.momentum_plus
        first.grad_plus = second.grad_plus
    else:
        second = _build_tree(
            target, first.theta_minus, first.momentum_minus, first.grad_minus,
            direction, depth - 1, step, h0, inv_mass, rng,
        )
        first.theta_minus = second.theta_minus
        first.momentum_minus = second.momentum_minus
        first.grad_minus = second.grad_minus

    first.sum_accept += second.sum_accept
    first.n_leaves += second.n_leaves
    first.divergent = second.divergent
    if not second.divergent:
        total = np.logaddexp(first.log_weight, second.log_weight)
        if np.log(rng.uniform()) < second.log_weight - total:
            first.theta, first.logp, first.grad = second.theta, second.logp, second.grad
            first.momentum_prop = second.momentum_prop
        first.log_weight = total
        first.rho = first.rho + second.rho
        first.turning = second.turning or _is_turning(
            first.rho, first.momentum_minus, first.momentum_plus, inv_mass
        )
    return first


def _is_turning(rho, momentum_minus, momentum_plus, inv_mass) -> bool:
    return (
        float(np.dot(rho * inv_mass, momentum_minus)) <= 0.0
        or float(np.dot(rho * inv_mass, momentum_plus)) <= 0.0
    )


def _init_chain(
    target: TargetFn, dim: int, config: SamplerConfig, rng: np.random.Generator
) -> tuple[np.ndarray, float, np.ndarray]:
    for _ in range(100):
        theta = rng.uniform(-config.init_radius, config.init_radius, dim)
        logp, grad = target(theta)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return theta, logp, grad
    raise SamplerError(
        "could not find a finite starting point after 100 attempts; "
        "the target may be improper or the init radius unsuitable"
    )


def _run_chain(target: TargetFn, dim: int, config: SamplerConfig, chain: int):
    rng = np.random.default_rng((config.seed, chain))
    theta, logp, grad = _init_chain(target, dim, config, rng)
    inv_mass = np.ones(dim)
    step = _find_reasonable_step(target, theta, logp, grad, inv_mass, rng)
    da = _DualAveraging.start(step, config.target_accept)
    init_buffer, _, window_closes = _adaptation_windows(config.n_warmup)
    welford = _Welford.empty(dim)
    closes = set(window_closes)

    n_total = config.n_warmup + config.n_draws
    sample = np.empty((config.n_draws, dim))
    divergent = np.zeros(config.n_draws, dtype=bool)
    energy = np.empty(config.n_draws)
    tree_depth = np.zeros(config.n_draws, dtype=int)
    accept_stat = np.empty(config.n_draws)

    for it in range(n_total):
        warming = it < config.n_warmup
        momentum = rng.standard_normal(dim) / np.sqrt(inv_mass)
        h0 = -logp + _kinetic(momentum, inv_mass)
        tree = _Tree(
            theta, momentum, grad, theta, momentum, grad, theta, logp, grad, momentum,
            log_weight=0.0, rho=momentum.copy(), sum_accept=0.0, n_leaves=0,
            divergent=False, turning=False,
        )
        depth = 0
        diverged = False
        while depth < config.max_tree_depth:
            direction = 1 if rng.uniform() < 0.5 else -1
            if direction == 1:
                sub = _build_tree(
                    target, tree.theta_plus, tree.momentum_plus, tree.grad_plus,
                    direction, depth, step, h0, inv_mass, rng,
                )
                tree.theta_plus = sub.theta_plus
                tree.momentum_plus = sub.momentum_plus
                tree.grad_plus = sub.grad_plus
            else:
                sub = _build_tree(
                    target, tree.theta_minus, tree.momentum_minus, tree.grad_minus,
                    direction, depth, step, h0, inv_mass, rng,
                )
                tree.theta_minus = sub.theta_minus
                tree.momentum_minus = sub.momentum_minus
                tree.grad_minus = sub.grad_minus
            tree.sum_accept += sub.sum_accept
            tree.n_leaves += sub.n_leaves
            if sub.divergent:
                diverged = True
                break
            if sub.turning:
                break
            # biased progressive sampling: favor the fresh half of the trajectory
            if np.log(rng.uniform()) < sub.log_weight - tree.log_weight:
                tree.theta, tree.logp, tree.grad = sub.theta, sub.logp, sub.grad
                tree.momentum_prop = sub.momentum_prop
            tree.log_weight = np.logaddexp(tree.log_weight, sub.log_weight)
            tree.rho = tree.rho + sub.rho
            depth += 1
            if _is_turning(tree.rho, tree.momentum_minus, tree.momentum_plus, inv_mass):
                break

        theta, logp, grad = tree.theta, tree.logp, tree.grad
        final_momentum = tree.momentum_prop
        accept = tree.sum_accept / max(tree.n_leaves, 1)

        if warming:
            step = da.update(accept)
            if it >= init_buffer:
                welford.push(theta)
            if it + 1 in closes:
                inv_mass = welford.regularized_variance()
                welford = _Welford.empty(dim)
                step = _find_reasonable_step(target, theta, logp, grad, inv_mass, rng)
                da = _DualAveraging.start(step, config.target_accept)
            if it + 1 == config.n_warmup:
                step = da.adapted()
        else:
            keep = it - config.n_warmup
            sample[keep] = theta
            divergent[keep] = diverged
            energy[keep] = -logp + _kinetic(final_momentum, inv_mass)
            tree_depth[keep] = depth
            accept_stat[keep] = accept

    return sample, divergent, energy, tree_depth, accept_stat, step, inv_mass


def nuts_sample(
    config: SamplerConfig, target: TargetFn, dim: int, spec_dict: dict | None = None
) -> Draws:
    """Run ``config.n_chains`` independent NUTS chains against ``target``.

    ``target`` maps an unconstrained vector to (log density, gradient) and
    must be pure; chains may execute on a thread pool but their RNG streams
    depend only on (seed, chain index).
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    start = time.monotonic()
    chains = range(config.n_chains)
    if config.threads > 1 and config.n_chains > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(lambda c: _run_chain(target, dim, config, c), chains))
    else:
        results = [_run_chain(target, dim, config, c) for c in chains]
    elapsed = time.monotonic() - start
    return Draws(
        sample=np.stack([r[0] for r in results]),
        divergent=np.stack([r[1] for r in results]),
        energy=np.stack([r[2] for r in results]),
        tree_depth=np.stack([r[3] for r in results]),
        accept_stat=np.stack([r[4] for r in results]),
        config=config,
        step_size=np.array([r[5] for r in results]),
        inv_mass=np.stack([r[6] for r in results]),
        elapsed_seconds=elapsed,
        spec_dict=spec_dict,
    )
