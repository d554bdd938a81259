"""Statistical models: parameter layout, transforms, priors, likelihoods, simulation.

Four variants share one interface:

* ``toy`` -- normal model of adult heights (mu, sigma), used for calibration
  and oracle tests.
* ``m1`` -- negative-binomial counts with a population intercept and
  partially-pooled language intercepts.
* ``m2`` -- adds population slopes for the four log predictors.
* ``m3`` -- adds correlated language-level slopes (multivariate normal with
  an LKJ-prior correlation) and project intercepts.

The sampler works on an unconstrained vector; positive scales go through log,
and the correlation Cholesky factor through the canonical-partial-correlation
map (tanh of free elements, rows normalized to unit length). All log-density
functions on the unconstrained space include the transform Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import betaln, digamma, expit, gammaln

from .dataio import Dataset, Design, PreparedRow, PREDICTOR_NAMES, toy_design

TOY = "toy"
M1 = "m1"
M2 = "m2"
M3 = "m3"
VARIANTS = (TOY, M1, M2, M3)

N_PREDICTORS = 4
EFFECT_DIM = 5  # language intercept + four language slopes
CORR_FREE = EFFECT_DIM * (EFFECT_DIM - 1) // 2

_LOG_2PI = float(np.log(2.0 * np.pi))
_EFFECT_NAMES = ("intercept",) + PREDICTOR_NAMES

# simulation-only guards against float overflow in exp / gamma scale
_MAX_LOG_RATE = 690.0
_MAX_COUNT = 1e300
_POISSON_EXACT_LIMIT = 1e15


def normalize_variant(name: str) -> str:
    v = name.strip().lower()
    if v not in VARIANTS:
        raise ValueError(f"unknown model variant {name!r}; expected one of {VARIANTS}")
    return v


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the weakly informative priors."""

    intercept_sd: float = 5.0
    slope_sd: float = 0.5
    group_sd_shape: float = 2.0  # Weibull shape for group-level sds
    group_sd_scale: float = 1.0
    dispersion_shape: float = 0.01  # Gamma(shape, rate) for phi
    dispersion_rate: float = 0.01
    lkj_eta: float = 2.0
    toy_mu_mean: float = 170.0
    toy_mu_sd: float = 50.0
    toy_sigma_scale: float = 1.0  # half-Cauchy scale

    def __post_init__(self) -> None:
        positive = (
            self.intercept_sd,
            self.slope_sd,
            self.group_sd_shape,
            self.group_sd_scale,
            self.dispersion_shape,
            self.dispersion_rate,
            self.toy_mu_sd,
            self.toy_sigma_scale,
        )
        if any(not np.isfinite(v) or v <= 0 for v in positive):
            raise ValueError("prior scales and shapes must be strictly positive")
        if self.lkj_eta < 1.0:
            raise ValueError("LKJ eta must be >= 1")

    def to_dict(self) -> dict:
        return {
            "intercept_sd": self.intercept_sd,
            "slope_sd": self.slope_sd,
            "group_sd_shape": self.group_sd_shape,
            "group_sd_scale": self.group_sd_scale,
            "dispersion_shape": self.dispersion_shape,
            "dispersion_rate": self.dispersion_rate,
            "lkj_eta": self.lkj_eta,
            "toy_mu_mean": self.toy_mu_mean,
            "toy_mu_sd": self.toy_mu_sd,
            "toy_sigma_scale": self.toy_sigma_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    """Which variant plus the group sizes it is wired for."""

    variant: str
    n_languages: int = 0
    n_projects: int = 0
    priors: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        if self.variant == TOY:
            if self.n_languages or self.n_projects:
                raise ValueError("the toy model has no group structure")
        else:
            if self.n_languages < 1:
                raise ValueError(f"{self.variant} requires n_languages >= 1")
            if self.variant == M3 and self.n_projects < 1:
                raise ValueError("m3 requires n_projects >= 1")
            if self.variant != M3 and self.n_projects:
                raise ValueError(f"{self.variant} does not use project effects")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_languages": self.n_languages,
            "n_projects": self.n_projects,
            "priors": self.priors.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            variant=d["variant"],
            n_languages=d.get("n_languages", 0),
            n_projects=d.get("n_projects", 0),
            priors=PriorConfig.from_dict(d.get("priors", {})),
        )

    @classmethod
    def for_dataset(cls, variant: str, dataset: Dataset, priors: PriorConfig | None = None) -> "ModelSpec":
        variant = normalize_variant(variant)
        if variant == TOY:
            return cls(TOY, priors=priors or PriorConfig())
        return cls(
            variant,
            n_languages=dataset.n_languages,
            n_projects=dataset.n_projects if variant == M3 else 0,
            priors=priors or PriorConfig(),
        )


@dataclass(frozen=True)
class Params:
    """Natural-space parameter values for one model variant."""

    variant: str
    alpha: float | None = None
    beta: np.ndarray | None = None  # (4,)
    alpha_language: np.ndarray | None = None  # (L,)
    beta_language: np.ndarray | None = None  # (L, 4), m3 only
    alpha_project: np.ndarray | None = None  # (P,), m3 only
    sigma_alpha: float | None = None
    sigma_beta: np.ndarray | None = None  # (4,), m3 only
    sigma_gamma: float | None = None  # m3 only
    corr_chol: np.ndarray | None = None  # (5, 5) lower triangular, m3 only
    phi: float | None = None
    mu: float | None = None  # toy only
    sigma: float | None = None  # toy only

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "variant": self.variant,
            "alpha": self.alpha,
            "beta": arr(self.beta),
            "alpha_language": arr(self.alpha_language),
            "beta_language": arr(self.beta_language),
            "alpha_project": arr(self.alpha_project),
            "sigma_alpha": self.sigma_alpha,
            "sigma_beta": arr(self.sigma_beta),
            "sigma_gamma": self.sigma_gamma,
            "corr_chol": arr(self.corr_chol),
            "phi": self.phi,
            "mu": self.mu,
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Params":
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        return cls(
            variant=normalize_variant(d["variant"]),
            alpha=d.get("alpha"),
            beta=arr(d.get("beta")),
            alpha_language=arr(d.get("alpha_language")),
            beta_language=arr(d.get("beta_language")),
            alpha_project=arr(d.get("alpha_project")),
            sigma_alpha=d.get("sigma_alpha"),
            sigma_beta=arr(d.get("sigma_beta")),
            sigma_gamma=d.get("sigma_gamma"),
            corr_chol=arr(d.get("corr_chol")),
            phi=d.get("phi"),
            mu=d.get("mu"),
            sigma=d.get("sigma"),
        )


# ---------------------------------------------------------------------------
# unconstrained layout


def dim(spec: ModelSpec) -> int:
    """Length of the unconstrained parameter vector."""
    L, P = spec.n_languages, spec.n_projects
    if spec.variant == TOY:
        return 2
    if spec.variant == M1:
        return 1 + L + 1 + 1
    if spec.variant == M2:
        return 1 + N_PREDICTORS + L + 1 + 1
    return 1 + N_PREDICTORS + EFFECT_DIM * L + P + 1 + N_PREDICTORS + 1 + CORR_FREE + 1


def coordinate_names(spec: ModelSpec) -> list[str]:
    """Human-readable name per unconstrained coordinate, in layout order."""
    if spec.variant == TOY:
        return ["mu", "log_sigma"]
    names = ["alpha"]
    if spec.variant in (M2, M3):
        names += [f"beta[{p}]" for p in PREDICTOR_NAMES]
    if spec.variant in (M1, M2):
        names += [f"z_language[{k}]" for k in range(spec.n_languages)]
    else:
        names += [
            f"z_language[{k},{e}]"
            for k in range(spec.n_languages)
            for e in _EFFECT_NAMES
        ]
        names += [f"z_project[{p}]" for p in range(spec.n_projects)]
    names += ["log_sigma_alpha"]
    if spec.variant == M3:
        names += [f"log_sigma_beta[{p}]" for p in PREDICTOR_NAMES]
        names += ["log_sigma_gamma"]
        rows, cols = np.tril_indices(EFFECT_DIM, k=-1)
        names += [f"corr_free[{i},{j}]" for i, j in zip(rows, cols)]
    names += ["log_phi"]
    return names


def _check_len(spec: ModelSpec, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (dim(spec),):
        raise ValueError(f"expected unconstrained vector of length {dim(spec)}, got shape {u.shape}")
    return u


# ---------------------------------------------------------------------------
# correlation Cholesky via canonical partial correlations


def corr_chol_from_free(y: np.ndarray, k: int = EFFECT_DIM) -> np.ndarray:
    """Build a valid correlation Cholesky factor from k(k-1)/2 free reals."""
    z = np.tanh(np.asarray(y, dtype=float))
    rows, cols = np.tril_indices(k, k=-1)
    zmat = np.zeros((k, k))
    zmat[rows, cols] = z
    chol = np.zeros((k, k))
    for i in range(k):
        rem = 1.0
        for j in range(i):
            chol[i, j] = zmat[i, j] * np.sqrt(rem)
            rem *= 1.0 - zmat[i, j] ** 2
        chol[i, i] = np.sqrt(rem)
    return chol


def free_from_corr_chol(chol: np.ndarray) -> np.ndarray:
    """Invert :func:`corr_chol_from_free`."""
    chol = np.asarray(chol, dtype=float)
    k = chol.shape[0]
    out = []
    for i in range(1, k):
        rem = 1.0
        for j in range(i):
            z = chol[i, j] / np.sqrt(rem)
            out.append(np.arctanh(z))
            rem *= 1.0 - z**2
    return np.asarray(out)


def _corr_prior_shapes(eta: float, k: int = EFFECT_DIM) -> np.ndarray:
    """Beta shape of each free element's stretched-beta prior, in packed order."""
    _, cols = np.tril_indices(k, k=-1)
    return eta + (k - 2 - cols) / 2.0


# ---------------------------------------------------------------------------
# constrain / unconstrain


def constrain(spec: ModelSpec, u: np.ndarray) -> Params:
    """Map an unconstrained vector to natural-space parameters (total on R^n)."""
    u = _check_len(spec, u)
    v = spec.variant
    if v == TOY:
        return Params(TOY, mu=float(u[0]), sigma=float(np.exp(u[1])))
    L = spec.n_languages
    if v in (M1, M2):
        o = 1 + (N_PREDICTORS if v == M2 else 0)
        alpha = float(u[0])
        beta = u[1 : 1 + N_PREDICTORS].copy() if v == M2 else None
        raw = u[o : o + L]
        sigma_alpha = float(_exp_capped(u[o + L]))
        phi = float(_exp_capped(u[o + L + 1]))
        return Params(
            v,
            alpha=alpha,
            beta=beta,
            alpha_language=sigma_alpha * raw,
            sigma_alpha=sigma_alpha,
            phi=phi,
        )
    P = spec.n_projects
    alpha = float(u[0])
    beta = u[1 : 1 + N_PREDICTORS].copy()
    o = 1 + N_PREDICTORS
    raw_lang = u[o : o + EFFECT_DIM * L].reshape(L, EFFECT_DIM)
    o += EFFECT_DIM * L
    raw_proj = u[o : o + P]
    o += P
    sigma_alpha = float(_exp_capped(u[o]))
    sigma_beta = _exp_capped(u[o + 1 : o + 1 + N_PREDICTORS])
    sigma_gamma = float(_exp_capped(u[o + 1 + N_PREDICTORS]))
    y = u[o + 2 + N_PREDICTORS : o + 2 + N_PREDICTORS + CORR_FREE]
    phi = float(_exp_capped(u[-1]))
    chol = corr_chol_from_free(y)
    scales = np.concatenate(([sigma_alpha], sigma_beta))
    effects = raw_lang @ (scales[:, None] * chol).T  # (L, 5)
    return Params(
        M3,
        alpha=alpha,
        beta=beta,
        alpha_language=effects[:, 0].copy(),
        beta_language=effects[:, 1:].copy(),
        alpha_project=sigma_gamma * raw_proj,
        sigma_alpha=sigma_alpha,
        sigma_beta=sigma_beta,
        sigma_gamma=sigma_gamma,
        corr_chol=chol,
        phi=phi,
    )


def unconstrain(spec: ModelSpec, params: Params) -> np.ndarray:
    """Map natural-space parameters back to the sampler's coordinates."""
    v = spec.variant
    if params.variant != v:
        raise ValueError(f"params are for {params.variant!r}, spec is {v!r}")
    if v == TOY:
        return np.array([params.mu, np.log(params.sigma)])
    L = spec.n_languages
    if v in (M1, M2):
        raw = np.asarray(params.alpha_language) / params.sigma_alpha
        parts = [np.array([params.alpha])]
        if v == M2:
            parts.append(np.asarray(params.beta, dtype=float))
        parts += [raw, np.array([np.log(params.sigma_alpha)]), np.array([np.log(params.phi)])]
        return np.concatenate(parts)
    scales = np.concatenate(([params.sigma_alpha], np.asarray(params.sigma_beta)))
    effects = np.column_stack([params.alpha_language, params.beta_language])  # (L, 5)
    b = scales[:, None] * params.corr_chol
    raw_lang = solve_triangular(b, effects.T, lower=True).T
    return np.concatenate(
        [
            np.array([params.alpha]),
            np.asarray(params.beta, dtype=float),
            raw_lang.reshape(-1),
            np.asarray(params.alpha_project) / params.sigma_gamma,
            np.array([np.log(params.sigma_alpha)]),
            np.log(np.asarray(params.sigma_beta)),
            np.array([np.log(params.sigma_gamma)]),
            free_from_corr_chol(params.corr_chol),
            np.array([np.log(params.phi)]),
        ]
    )


# ---------------------------------------------------------------------------
# densities


def nb_logpmf(y, lam, phi):
    """Log pmf of the mean/dispersion negative binomial.

    Mean is ``lam`` and variance ``lam + lam**2 / phi``; this is the unique
    negative binomial with those moments.
    """
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(~np.isfinite(y)) or np.any(~np.isfinite(lam)) or np.any(~np.isfinite(phi)):
        raise ValueError("nb_logpmf arguments must be finite")
    if np.any(lam <= 0) or np.any(phi <= 0):
        raise ValueError("nb_logpmf requires lam > 0 and phi > 0")
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise ValueError("nb_logpmf requires nonnegative integer counts")
    log_lam = np.log(lam)
    log_phi = np.log(phi)
    log_total = np.logaddexp(log_phi, log_lam)
    out = (
        gammaln(y + phi)
        - gammaln(phi)
        - gammaln(y + 1.0)
        + phi * (log_phi - log_total)
        + y * (log_lam - log_total)
    )
    return out if out.ndim else float(out)


def _normal_logpdf(x, mean, sd):
    return -0.5 * _LOG_2PI - np.log(sd) - 0.5 * ((x - mean) / sd) ** 2


def _nb_terms(y: np.ndarray, eta: np.ndarray, log_phi: float):
    """Pointwise NB2 log pmf at log-rate eta, plus gradients wrt eta and log phi."""
    log_phi = float(np.clip(log_phi, -_EXP_CAP, _EXP_CAP))
    phi = np.exp(log_phi)
    eta = np.clip(eta, -1e300, 1e300)
    with np.errstate(over="ignore", invalid="ignore"):
        log_total = np.logaddexp(log_phi, eta)  # log(phi + lam)
        values = (
            gammaln(y + phi)
            - gammaln(phi)
            - gammaln(y + 1.0)
            + phi * (log_phi - log_total)
            + y * (eta - log_total)
        )
        values = np.where(np.isnan(values), -np.inf, values)
        frac = expit(eta - log_phi)  # lam / (phi + lam)
        g_eta = y - (y + phi) * frac
        d_phi = (
            digamma(y + phi)
            - digamma(phi)
            + log_phi
            + 1.0
            - log_total
            - np.exp(np.log(y + phi) - log_total)
        )
        g_phi = phi * float(np.sum(d_phi))
    return values, g_eta, g_phi


# ---------------------------------------------------------------------------
# linear predictor and pointwise likelihood


def _eta(spec: ModelSpec, params: Params, design: Design) -> np.ndarray:
    lang = design.language_index
    if spec.variant == M1:
        return params.alpha + params.alpha_language[lang]
    if spec.variant == M2:
        return params.alpha + design.x @ params.beta + params.alpha_language[lang]
    eta = params.alpha + design.x @ params.beta + params.alpha_language[lang]
    eta += np.einsum("ij,ij->i", design.x, params.beta_language[lang])
    eta += params.alpha_project[design.project_index]
    return eta


def linear_predictor(spec: ModelSpec, params: Params, row: PreparedRow) -> float:
    """Log rate for one observation (the variant-appropriate sum of terms)."""
    if spec.variant == TOY:
        raise ValueError("the toy model has no linear predictor")
    if not 0 <= row.language_index < spec.n_languages:
        raise IndexError(f"language index {row.language_index} out of range")
    if spec.variant == M3 and not 0 <= row.project_index < spec.n_projects:
        raise IndexError(f"project index {row.project_index} out of range")
    design = Design(
        np.asarray([row.x], dtype=float),
        np.array([row.language_index]),
        np.array([row.project_index]),
        spec.n_languages,
        max(spec.n_projects, 1),
    )
    return float(_eta(spec, params, design)[0])


def _as_design_and_outcomes(spec: ModelSpec, data) -> tuple[Design, np.ndarray]:
    if isinstance(data, Dataset):
        return data.design(), data.bugs()
    if isinstance(data, tuple):
        design, y = data
        return design, np.asarray(y, dtype=float)
    # plain outcome array (toy heights)
    y = np.asarray(data, dtype=float)
    return toy_design(len(y)), y


def log_likelihood_pointwise(spec: ModelSpec, params: Params, data) -> np.ndarray:
    """Per-observation log likelihood; ``data`` is a Dataset or (design, y).

    The toy variant accepts a plain array of heights.
    """
    design, y = _as_design_and_outcomes(spec, data)
    if spec.variant == TOY:
        return _normal_logpdf(y, params.mu, params.sigma)
    if np.any(design.language_index >= spec.n_languages):
        raise IndexError("language index out of range for spec")
    if spec.variant == M3 and np.any(design.project_index >= spec.n_projects):
        raise IndexError("project index out of range for spec")
    eta = _eta(spec, params, design)
    values, _, _ = _nb_terms(y, eta, np.log(params.phi))
    return values


# ---------------------------------------------------------------------------
# priors (on the unconstrained space, Jacobians included)


# exp is saturated near the float boundary so extreme warmup excursions keep
# finite values and non-NaN gradients instead of poisoning a trajectory
_EXP_CAP = 700.0


def _exp_capped(t):
    return np.exp(np.clip(t, -_EXP_CAP, _EXP_CAP))


def _weibull_term(t: float, shape: float, scale: float) -> tuple[float, float]:
    """Log prior + log Jacobian for sigma = exp(t) ~ Weibull(shape, scale)."""
    ratio_pow = np.exp(min(shape * (t - np.log(scale)), _EXP_CAP))
    value = np.log(shape) - shape * np.log(scale) + shape * t - ratio_pow
    return float(value), float(shape - shape * ratio_pow)


def _gamma_term(t: float, shape: float, rate: float) -> tuple[float, float]:
    """Log prior + log Jacobian for phi = exp(t) ~ Gamma(shape, rate)."""
    phi = np.exp(min(t, _EXP_CAP))
    value = shape * np.log(rate) - gammaln(shape) + shape * t - rate * phi
    return float(value), float(shape - rate * phi)


def _half_cauchy_term(t: float, scale: float) -> tuple[float, float]:
    centered = 2.0 * (t - np.log(scale))
    value = np.log(2.0) - np.log(np.pi) - np.log(scale) - np.logaddexp(0.0, centered) + t
    grad = 1.0 - 2.0 * expit(centered)
    return float(value), float(grad)


def _log_prior_and_grad(spec: ModelSpec, u: np.ndarray) -> tuple[float, np.ndarray]:
    pc = spec.priors
    v = spec.variant
    grad = np.zeros_like(u)
    if v == TOY:
        mu, t = u
        value = float(_normal_logpdf(mu, pc.toy_mu_mean, pc.toy_mu_sd))
        grad[0] = -(mu - pc.toy_mu_mean) / pc.toy_mu_sd**2
        hc_value, hc_grad = _half_cauchy_term(t, pc.toy_sigma_scale)
        grad[1] = hc_grad
        return value + hc_value, grad

    L = spec.n_languages
    alpha = u[0]
    value = float(_normal_logpdf(alpha, 0.0, pc.intercept_sd))
    grad[0] = -alpha / pc.intercept_sd**2

    if v in (M2, M3):
        beta = u[1 : 1 + N_PREDICTORS]
        value += float(np.sum(_normal_logpdf(beta, 0.0, pc.slope_sd)))
        grad[1 : 1 + N_PREDICTORS] = -beta / pc.slope_sd**2
        o = 1 + N_PREDICTORS
    else:
        o = 1

    n_raw = EFFECT_DIM * L if v == M3 else L
    raw = u[o : o + n_raw]
    value += float(np.sum(_normal_logpdf(raw, 0.0, 1.0)))
    grad[o : o + n_raw] = -raw
    o += n_raw

    if v == M3:
        P = spec.n_projects
        raw_proj = u[o : o + P]
        value += float(np.sum(_normal_logpdf(raw_proj, 0.0, 1.0)))
        grad[o : o + P] = -raw_proj
        o += P

    w_value, w_grad = _weibull_term(u[o], pc.group_sd_shape, pc.group_sd_scale)
    value += w_value
    grad[o] = w_grad
    o += 1

    if v == M3:
        for j in range(N_PREDICTORS):
            w_value, w_grad = _weibull_term(u[o + j], pc.group_sd_shape, pc.group_sd_scale)
            value += w_value
            grad[o + j] = w_grad
        o += N_PREDICTORS
        w_value, w_grad = _weibull_term(u[o], pc.group_sd_shape, pc.group_sd_scale)
        value += w_value
        grad[o] = w_grad
        o += 1
        y = u[o : o + CORR_FREE]
        z = np.tanh(y)
        shapes = _corr_prior_shapes(pc.lkj_eta)
        # stretched Beta(b, b) on each partial correlation, tanh Jacobian folded
        # in; log(1 - tanh^2 y) = log 4 - 2*logaddexp(y, -y) stays exact where
        # tanh saturates in floats
        const = -(2.0 * shapes - 1.0) * np.log(2.0) - betaln(shapes, shapes)
        log_one_minus_z2 = np.log(4.0) - 2.0 * np.logaddexp(y, -y)
        value += float(np.sum(shapes * log_one_minus_z2 + const))
        grad[o : o + CORR_FREE] = -2.0 * shapes * z
        o += CORR_FREE

    g_value, g_grad = _gamma_term(u[o], pc.dispersion_shape, pc.dispersion_rate)
    value += g_value
    grad[o] = g_grad
    return value, grad


def log_prior(spec: ModelSpec, u: np.ndarray) -> float:
    """Log density of all priors at constrain(u), plus transform Jacobians."""
    u = _check_len(spec, u)
    value, _ = _log_prior_and_grad(spec, u)
    return value


# ---------------------------------------------------------------------------
# joint log posterior with analytic gradient


def log_posterior_and_grad(spec: ModelSpec, u: np.ndarray, data) -> tuple[float, np.ndarray]:
    """Joint log posterior and its exact gradient in unconstrained coordinates."""
    u = _check_len(spec, u)
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite unconstrained vector")
    design, y = _as_design_and_outcomes(spec, data)
    value, grad = _log_prior_and_grad(spec, u)
    v = spec.variant

    if v == TOY:
        mu, t = u
        inv_var = np.exp(-2.0 * np.clip(t, -_EXP_CAP / 2, _EXP_CAP / 2))
        resid = y - mu
        value += float(-0.5 * len(y) * _LOG_2PI - len(y) * t - 0.5 * np.sum(resid**2) * inv_var)
        grad[0] += float(np.sum(resid) * inv_var)
        grad[1] += float(-len(y) + np.sum(resid**2) * inv_var)
        return value, grad

    L = spec.n_languages
    lang = design.language_index
    if v in (M1, M2):
        o = 1 + (N_PREDICTORS if v == M2 else 0)
        raw = u[o : o + L]
        t_alpha = u[o + L]
        log_phi = u[o + L + 1]
        sigma_alpha = float(_exp_capped(t_alpha))
        eta = u[0] + sigma_alpha * raw[lang]
        if v == M2:
            eta = eta + design.x @ u[1 : 1 + N_PREDICTORS]
        values, g_eta, g_tphi = _nb_terms(y, eta, log_phi)
        value += float(np.sum(values))
        grad[0] += float(np.sum(g_eta))
        if v == M2:
            grad[1 : 1 + N_PREDICTORS] += design.x.T @ g_eta
        grad[o : o + L] += sigma_alpha * np.bincount(lang, weights=g_eta, minlength=L)
        grad[o + L] += sigma_alpha * float(np.sum(g_eta * raw[lang]))
        grad[o + L + 1] += g_tphi
        return value, grad

    # m3
    P = spec.n_projects
    o = 1 + N_PREDICTORS
    raw_lang = u[o : o + EFFECT_DIM * L].reshape(L, EFFECT_DIM)
    o_lang = o
    o += EFFECT_DIM * L
    raw_proj = u[o : o + P]
    o_proj = o
    o += P
    t_alpha = u[o]
    t_beta = u[o + 1 : o + 1 + N_PREDICTORS]
    t_gamma = u[o + 1 + N_PREDICTORS]
    o_scales = o
    y_corr = u[o + 2 + N_PREDICTORS : o + 2 + N_PREDICTORS + CORR_FREE]
    o_corr = o + 2 + N_PREDICTORS
    log_phi = u[-1]

    scales = _exp_capped(np.concatenate(([t_alpha], t_beta)))  # (5,)
    sigma_gamma = float(_exp_capped(t_gamma))
    z = np.clip(np.tanh(y_corr), -1.0 + 1e-15, 1.0 - 1e-15)
    rows, cols = np.tril_indices(EFFECT_DIM, k=-1)
    zmat = np.zeros((EFFECT_DIM, EFFECT_DIM))
    zmat[rows, cols] = z
    chol = np.zeros((EFFECT_DIM, EFFECT_DIM))
    prefix = np.ones((EFFECT_DIM, EFFECT_DIM))  # prefix[i, j] = prod_{m<j} sqrt(1 - z_im^2)
    for i in range(EFFECT_DIM):
        rem = 1.0
        for j in range(i):
            prefix[i, j] = np.sqrt(rem)
            chol[i, j] = zmat[i, j] * prefix[i, j]
            rem *= 1.0 - zmat[i, j] ** 2
        prefix[i, i] = np.sqrt(rem)
        chol[i, i] = prefix[i, i]

    scaled_chol = scales[:, None] * chol  # (5, 5)
    effects = raw_lang @ scaled_chol.T  # (L, 5)
    w = np.column_stack([np.ones(design.n_rows), design.x])  # (n, 5)
    eta = (
        u[0]
        + design.x @ u[1 : 1 + N_PREDICTORS]
        + np.einsum("ij,ij->i", w, effects[lang])
        + sigma_gamma * raw_proj[design.project_index]
    )
    values, g_eta, g_tphi = _nb_terms(y, eta, log_phi)
    value += float(np.sum(values))

    grad[0] += float(np.sum(g_eta))
    grad[1 : 1 + N_PREDICTORS] += design.x.T @ g_eta
    g_effects = np.zeros((L, EFFECT_DIM))
    for j in range(EFFECT_DIM):
        g_effects[:, j] = np.bincount(lang, weights=g_eta * w[:, j], minlength=L)
    grad[o_lang : o_lang + EFFECT_DIM * L] += (g_effects @ scaled_chol).reshape(-1)
    g_scaled = g_effects.T @ raw_lang  # (5, 5): d/d(scaled_chol)
    g_chol = scales[:, None] * g_scaled
    grad[o_scales] += scales[0] * float(np.sum(g_scaled[0] * chol[0]))
    for j in range(N_PREDICTORS):
        grad[o_scales + 1 + j] += scales[1 + j] * float(np.sum(g_scaled[1 + j] * chol[1 + j]))
    # back through the partial-correlation construction, row by row
    g_y = np.zeros(CORR_FREE)
    pos = 0
    for i in range(1, EFFECT_DIM):
        tail = 0.0  # sum_{k > m, k <= i} g_chol[i, k] * chol[i, k], built right to left
        row_grad = np.zeros(i)
        for m in range(i - 1, -1, -1):
            tail += g_chol[i, m + 1] * chol[i, m + 1]
            row_grad[m] = (
                g_chol[i, m] * prefix[i, m] * (1.0 - zmat[i, m] ** 2) - zmat[i, m] * tail
            )
        g_y[pos : pos + i] = row_grad
        pos += i
    grad[o_corr : o_corr + CORR_FREE] += g_y

    grad[o_proj : o_proj + P] += sigma_gamma * np.bincount(
        design.project_index, weights=g_eta, minlength=P
    )
    grad[o_scales + 1 + N_PREDICTORS] += sigma_gamma * float(
        np.sum(g_eta * raw_proj[design.project_index])
    )
    grad[-1] += g_tphi
    if not value > -1e280:
        # deep saturation zone: the value already rejects the point, so a
        # finite descent direction is all the gradient needs to provide
        grad = np.nan_to_num(grad, nan=0.0, posinf=1e15, neginf=-1e15)
    return value, grad


def make_target(spec: ModelSpec, data):
    """Closure (u) -> (log posterior, gradient) for the sampler."""
    design, y = _as_design_and_outcomes(spec, data)

    def target(u: np.ndarray) -> tuple[float, np.ndarray]:
        return log_posterior_and_grad(spec, u, (design, y))

    return target


# ---------------------------------------------------------------------------
# forward simulation


def sample_prior(rng: np.random.Generator, spec: ModelSpec) -> Params:
    """One independent draw from every prior of the variant."""
    pc = spec.priors
    v = spec.variant
    if v == TOY:
        mu = rng.normal(pc.toy_mu_mean, pc.toy_mu_sd)
        sigma = abs(rng.standard_cauchy()) * pc.toy_sigma_scale
        return Params(TOY, mu=float(mu), sigma=float(sigma))
    L = spec.n_languages
    alpha = float(rng.normal(0.0, pc.intercept_sd))
    # numpy's gamma sampler can underflow to exactly 0 at tiny shape
    phi = float(max(rng.gamma(pc.dispersion_shape, 1.0 / pc.dispersion_rate), 1e-290))
    sigma_alpha = float(pc.group_sd_scale * rng.weibull(pc.group_sd_shape))
    if v in (M1, M2):
        beta = rng.normal(0.0, pc.slope_sd, N_PREDICTORS) if v == M2 else None
        return Params(
            v,
            alpha=alpha,
            beta=beta,
            alpha_language=sigma_alpha * rng.standard_normal(L),
            sigma_alpha=sigma_alpha,
            phi=phi,
        )
    P = spec.n_projects
    beta = rng.normal(0.0, pc.slope_sd, N_PREDICTORS)
    sigma_beta = pc.group_sd_scale * rng.weibull(pc.group_sd_shape, N_PREDICTORS)
    sigma_gamma = float(pc.group_sd_scale * rng.weibull(pc.group_sd_shape))
    shapes = _corr_prior_shapes(pc.lkj_eta)
    z = 2.0 * rng.beta(shapes, shapes) - 1.0
    chol = corr_chol_from_free(np.arctanh(z))
    scales = np.concatenate(([sigma_alpha], sigma_beta))
    effects = rng.standard_normal((L, EFFECT_DIM)) @ (scales[:, None] * chol).T
    return Params(
        M3,
        alpha=alpha,
        beta=beta,
        alpha_language=effects[:, 0].copy(),
        beta_language=effects[:, 1:].copy(),
        alpha_project=sigma_gamma * rng.standard_normal(P),
        sigma_alpha=sigma_alpha,
        sigma_beta=sigma_beta,
        sigma_gamma=sigma_gamma,
        corr_chol=chol,
        phi=phi,
    )


def simulate_outcomes(
    rng: np.random.Generator, spec: ModelSpec, params: Params, design: Design
) -> np.ndarray:
    """One simulated outcome per design row (NB counts, or heights for toy).

    Counts are returned as an integer-valued float array; astronomically large
    rates fall back to the rounded gamma mixture rate (relative error below
    1e-7 at that scale) so diffuse-prior simulations cannot overflow.
    """
    if spec.variant == TOY:
        return rng.normal(params.mu, params.sigma, design.n_rows)
    eta = np.minimum(_eta(spec, params, design), _MAX_LOG_RATE)
    lam = np.exp(eta)
    rate = rng.gamma(params.phi, np.minimum(lam / params.phi, _MAX_COUNT))
    counts = np.where(rate < _POISSON_EXACT_LIMIT, rate, 0.0)
    counts = rng.poisson(counts).astype(float)
    big = rate >= _POISSON_EXACT_LIMIT
    if np.any(big):
        counts[big] = np.minimum(np.round(rate[big]), _MAX_COUNT)
    return counts


def simulate_rates(
    rng: np.random.Generator, spec: ModelSpec, params: Params, design: Design
) -> np.ndarray:
    """Expected counts (exp of the linear predictor) per design row."""
    eta = np.minimum(_eta(spec, params, design), _MAX_LOG_RATE)
    return np.exp(eta)
