from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defectflow.dataio import Design, PreparedRow, toy_design
from defectflow.models import (
    M1,
    M2,
    M3,
    TOY,
    ModelSpec,
    Params,
    constrain,
    coordinate_names,
    corr_chol_from_free,
    dim,
    free_from_corr_chol,
    linear_predictor,
    log_likelihood_pointwise,
    log_posterior_and_grad,
    log_prior,
    nb_logpmf,
    sample_prior,
    simulate_outcomes,
    unconstrain,
)


def toy_spec():
    return ModelSpec(TOY)


def m1_spec(L=3):
    return ModelSpec(M1, n_languages=L)


def m2_spec(L=3):
    return ModelSpec(M2, n_languages=L)


def m3_spec(L=3, P=5):
    return ModelSpec(M3, n_languages=L, n_projects=P)


# ---------------------------------------------------------------------------
# dimensions and layout


def test_dim_counts():
    assert dim(toy_spec()) == 2
    assert dim(m1_spec(17)) == 20
    assert dim(m2_spec(17)) == 24
    # hand enumeration for L=2, P=3:
    # alpha 1, beta 4, language effects 5*2, project effects 3,
    # log sd's 1+4+1, correlation free elements 10, log phi 1
    assert dim(m3_spec(2, 3)) == 1 + 4 + 10 + 3 + 6 + 10 + 1 == 35


def test_coordinate_names_match_dim():
    for spec in (toy_spec(), m1_spec(4), m2_spec(4), m3_spec(4, 7)):
        names = coordinate_names(spec)
        assert len(names) == dim(spec)
        assert len(set(names)) == len(names)


# ---------------------------------------------------------------------------
# constrain / unconstrain


def test_constrain_toy():
    p = constrain(toy_spec(), np.array([170.0, 0.0]))
    assert p.mu == 170.0 and p.sigma == 1.0


def test_constrain_identity_correlation():
    spec = m3_spec()
    u = np.zeros(dim(spec))
    p = constrain(spec, u)
    assert np.allclose(p.corr_chol, np.eye(5))


def test_constrain_noncentered_scaling():
    spec = m1_spec(2)
    u = np.zeros(dim(spec))
    u[1] = 0.5  # raw intercept for language 0
    u[3] = np.log(2.0)  # log sigma_alpha
    p = constrain(spec, u)
    assert abs(p.alpha_language[0] - 1.0) < 1e-12


def test_roundtrip_all_variants():
    rng = np.random.default_rng(3)
    for spec in (toy_spec(), m1_spec(4), m2_spec(4), m3_spec(4, 6)):
        u = rng.normal(0, 1, dim(spec))
        p = constrain(spec, u)
        back = unconstrain(spec, p)
        assert np.max(np.abs(back - u)) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10**6))
def test_roundtrip_property_m3(seed):
    # natural-space round trip: constrain(unconstrain(p)) == p componentwise
    rng = np.random.default_rng(seed)
    spec = m3_spec(3, 4)
    p = constrain(spec, rng.normal(0, 1.5, dim(spec)))
    q = constrain(spec, unconstrain(spec, p))
    for name in ("alpha", "sigma_alpha", "sigma_gamma", "phi"):
        assert abs(getattr(p, name) - getattr(q, name)) < 1e-10
    for name in ("beta", "alpha_language", "beta_language", "alpha_project", "sigma_beta", "corr_chol"):
        assert np.max(np.abs(getattr(p, name) - getattr(q, name))) < 1e-10


def test_corr_chol_rows_unit_norm():
    rng = np.random.default_rng(9)
    y = rng.normal(0, 1, 10)
    chol = corr_chol_from_free(y)
    assert np.allclose(np.sum(chol**2, axis=1), 1.0)
    assert np.all(np.diag(chol) > 0)
    assert np.max(np.abs(free_from_corr_chol(chol) - y)) < 1e-10


# ---------------------------------------------------------------------------
# log prior


def test_log_prior_toy_mu_contribution():
    # at (mu=170, sigma=1), the mu prior contributes -ln(50*sqrt(2*pi))
    spec = toy_spec()
    value = log_prior(spec, np.array([170.0, 0.0]))
    mu_part = -np.log(50.0 * np.sqrt(2 * np.pi))
    sigma_part = np.log(2 / np.pi) - np.log(2.0)  # half-Cauchy at 1 plus zero Jacobian
    assert abs(value - (mu_part + sigma_part)) < 1e-12
    assert abs(mu_part - (-4.8283)) < 5e-3


def test_log_prior_weibull_at_one():
    spec = m1_spec(1)
    u = np.zeros(dim(spec))
    base = log_prior(spec, u)
    # the log sigma_alpha coordinate sits at t=0 (sigma=1); Weibull(2,1)
    # contributes ln 2 - 1 there with zero Jacobian
    contribution = np.log(2.0) - 1.0
    assert abs(contribution - (-0.3069)) < 1e-4
    # moving a raw language effect from 0 to 1 changes the prior by -0.5
    u2 = u.copy()
    u2[1] = 1.0
    assert abs((log_prior(spec, u2) - base) - (-0.5)) < 1e-12


def test_log_prior_finite_everywhere():
    rng = np.random.default_rng(12)
    for spec in (toy_spec(), m1_spec(3), m2_spec(3), m3_spec(3, 4)):
        for _ in range(20):
            u = rng.normal(0, 4, dim(spec))
            assert np.isfinite(log_prior(spec, u))


# ---------------------------------------------------------------------------
# negative binomial pmf


def test_nb_logpmf_geometric_reduction():
    assert abs(nb_logpmf(3, 2.0, 1.0) - np.log((1 / 3) * (2 / 3) ** 3)) < 1e-12
    assert abs(nb_logpmf(3, 2.0, 1.0) - (-2.315)) < 1e-3
    assert abs(nb_logpmf(0, 2.0, 1.0) - np.log(1 / 3)) < 1e-12


def test_nb_logpmf_normalizes():
    ys = np.arange(0, 10_000)
    for lam in (0.5, 5.0, 50.0):
        for phi in (0.5, 1.0, 5.0):
            total = np.sum(np.exp(nb_logpmf(ys, lam, phi)))
            assert abs(total - 1.0) < 1e-9


def test_nb_logpmf_domain_errors():
    with pytest.raises(ValueError):
        nb_logpmf(1, -1.0, 1.0)
    with pytest.raises(ValueError):
        nb_logpmf(1, 1.0, 0.0)
    with pytest.raises(ValueError):
        nb_logpmf(1.5, 1.0, 1.0)


def test_nb_moments_via_simulation():
    rng = np.random.default_rng(5)
    spec = m1_spec(1)
    params = Params(M1, alpha=np.log(5.0), alpha_language=np.zeros(1), sigma_alpha=1.0, phi=2.0)
    design = Design(np.zeros((10**6, 4)), np.zeros(10**6, int), np.zeros(10**6, int), 1, 1)
    draws = simulate_outcomes(rng, spec, params, design)
    assert abs(draws.mean() / 5.0 - 1) < 0.02
    assert abs(draws.var() / 17.5 - 1) < 0.05


def test_simulate_vanishing_rate():
    rng = np.random.default_rng(6)
    spec = m1_spec(1)
    params = Params(M1, alpha=-20.0, alpha_language=np.zeros(1), sigma_alpha=1.0, phi=1.0)
    design = Design(np.zeros((10**4, 4)), np.zeros(10**4, int), np.zeros(10**4, int), 1, 1)
    assert np.all(simulate_outcomes(rng, spec, params, design) == 0)


def test_simulate_deterministic_under_seed(small_dataset):
    spec = ModelSpec.for_dataset(M2, small_dataset)
    params = sample_prior(np.random.default_rng(1), spec)
    a = simulate_outcomes(np.random.default_rng(99), spec, params, small_dataset.design())
    b = simulate_outcomes(np.random.default_rng(99), spec, params, small_dataset.design())
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# linear predictor


def row(x=(0.0, 0.0, 0.0, 0.0), lang=0, proj=0):
    return PreparedRow(proj, lang, tuple(x), 0)


def test_linear_predictor_m1():
    spec = m1_spec(2)
    p = Params(M1, alpha=1.0, alpha_language=np.array([0.5, -0.5]), sigma_alpha=1.0, phi=1.0)
    assert linear_predictor(spec, p, row(lang=0)) == 1.5
    assert linear_predictor(spec, p, row(lang=1)) == 0.5


def test_linear_predictor_m2_dot_product():
    spec = m2_spec(1)
    p = Params(
        M2,
        alpha=0.0,
        beta=np.array([0.1, 0.0, 0.0, 0.0]),
        alpha_language=np.zeros(1),
        sigma_alpha=1.0,
        phi=1.0,
    )
    assert abs(linear_predictor(spec, p, row(x=(2.0, 1.0, 1.0, 1.0))) - 0.2) < 1e-12


def test_m3_nests_m2():
    rng = np.random.default_rng(8)
    spec2, spec3 = m2_spec(3), m3_spec(3, 4)
    alpha, beta = 0.7, rng.normal(0, 0.3, 4)
    alpha_lang = rng.normal(0, 0.5, 3)
    p2 = Params(M2, alpha=alpha, beta=beta, alpha_language=alpha_lang, sigma_alpha=1.0, phi=2.0)
    p3 = Params(
        M3,
        alpha=alpha,
        beta=beta,
        alpha_language=alpha_lang,
        beta_language=np.zeros((3, 4)),
        alpha_project=np.zeros(4),
        sigma_alpha=1.0,
        sigma_beta=np.ones(4),
        sigma_gamma=1.0,
        corr_chol=np.eye(5),
        phi=2.0,
    )
    for _ in range(5):
        r = row(x=rng.normal(0, 2, 4), lang=int(rng.integers(3)), proj=int(rng.integers(4)))
        assert abs(linear_predictor(spec2, p2, r) - linear_predictor(spec3, p3, r)) < 1e-12


def test_index_out_of_range():
    spec = m1_spec(2)
    p = Params(M1, alpha=0.0, alpha_language=np.zeros(2), sigma_alpha=1.0, phi=1.0)
    with pytest.raises(IndexError):
        linear_predictor(spec, p, row(lang=5))


# ---------------------------------------------------------------------------
# pointwise log likelihood


def test_pointwise_single_row():
    spec = m1_spec(1)
    p = Params(M1, alpha=np.log(2.0), alpha_language=np.zeros(1), sigma_alpha=1.0, phi=1.0)
    design = Design(np.zeros((1, 4)), np.zeros(1, int), np.zeros(1, int), 1, 1)
    ll = log_likelihood_pointwise(spec, p, (design, np.array([3.0])))
    assert abs(ll[0] - np.log((1 / 3) * (2 / 3) ** 3)) < 1e-12


def test_pointwise_sums_to_joint(medium_dataset):
    spec = ModelSpec.for_dataset(M2, medium_dataset)
    params = sample_prior(np.random.default_rng(4), spec)
    ll = log_likelihood_pointwise(spec, params, medium_dataset)
    lam = np.array(
        [np.exp(linear_predictor(spec, params, r)) for r in medium_dataset.rows]
    )
    direct = np.array(
        [nb_logpmf(r.bugs, l, params.phi) for r, l in zip(medium_dataset.rows, lam)]
    )
    assert np.allclose(ll, direct)


def test_pointwise_toy_standard_normal_mode():
    spec = toy_spec()
    p = Params(TOY, mu=170.0, sigma=1.0)
    ll = log_likelihood_pointwise(spec, p, np.array([170.0]))
    assert abs(ll[0] - (-np.log(np.sqrt(2 * np.pi)))) < 1e-12
    assert abs(ll[0] - (-0.91894)) < 1e-5


# ---------------------------------------------------------------------------
# joint log posterior: gradients vs central finite differences


def finite_difference(f, u, h=1e-5):
    g = np.zeros_like(u)
    for i in range(len(u)):
        up, down = u.copy(), u.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def _simulated_data(spec, rng):
    if spec.variant == TOY:
        return rng.normal(172.0, 6.0, 25)
    n = 30
    x = rng.normal(0.0, 1.0, (n, 4))
    lang = rng.integers(0, spec.n_languages, n)
    proj = rng.integers(0, max(spec.n_projects, 1), n)
    design = Design(x, lang, proj, spec.n_languages, max(spec.n_projects, 1))
    truth = sample_prior(rng, spec)
    if truth.phi < 0.5:
        truth = replace(truth, phi=2.0)
    y = simulate_outcomes(rng, spec, truth, design)
    return design, np.minimum(y, 10_000)


@pytest.mark.parametrize("make_spec", [toy_spec, m1_spec, m2_spec, m3_spec])
def test_gradient_matches_finite_differences(make_spec):
    spec = make_spec()
    rng = np.random.default_rng(17)
    data = _simulated_data(spec, rng)
    worst = 0.0
    for _ in range(20):
        u = rng.normal(0, 1.0, dim(spec))
        value, grad = log_posterior_and_grad(spec, u, data)
        assert np.isfinite(value) and np.all(np.isfinite(grad))
        fd = finite_difference(lambda v: log_posterior_and_grad(spec, v, data)[0], u)
        rel = np.max(np.abs(grad - fd) / np.maximum(1.0, np.abs(fd)))
        worst = max(worst, rel)
    assert worst < 1e-6, f"max relative gradient error {worst:.2e}"


def test_gradient_zero_at_conjugate_mode():
    # toy model with sigma fixed at the truth: the mu-gradient vanishes at the
    # closed-form normal-normal posterior mode
    spec = toy_spec()
    rng = np.random.default_rng(2)
    sigma = 6.0
    heights = rng.normal(171.0, sigma, 25)
    prior_mean, prior_sd = 170.0, 50.0
    precision = 1 / prior_sd**2 + len(heights) / sigma**2
    mode = (prior_mean / prior_sd**2 + heights.sum() / sigma**2) / precision
    _, grad = log_posterior_and_grad(spec, np.array([mode, np.log(sigma)]), heights)
    assert abs(grad[0]) < 1e-9


def test_log_posterior_additive_over_rows(medium_dataset):
    spec = ModelSpec.for_dataset(M2, medium_dataset)
    rng = np.random.default_rng(21)
    u = rng.normal(0, 0.5, dim(spec))
    design = medium_dataset.design()
    y = medium_dataset.bugs()
    half = design.n_rows // 2
    d1 = Design(design.x[:half], design.language_index[:half], design.project_index[:half],
                design.n_languages, design.n_projects)
    d2 = Design(design.x[half:], design.language_index[half:], design.project_index[half:],
                design.n_languages, design.n_projects)
    lp_all, _ = log_posterior_and_grad(spec, u, (design, y))
    lp1, _ = log_posterior_and_grad(spec, u, (d1, y[:half]))
    lp2, _ = log_posterior_and_grad(spec, u, (d2, y[half:]))
    prior = log_prior(spec, u)
    assert abs(lp_all - lp1 - lp2 + prior) < 1e-9


def test_log_posterior_rejects_nonfinite(medium_dataset):
    spec = ModelSpec.for_dataset(M1, medium_dataset)
    u = np.zeros(dim(spec))
    u[0] = np.nan
    with pytest.raises(ValueError):
        log_posterior_and_grad(spec, u, medium_dataset)


# ---------------------------------------------------------------------------
# prior sampling


def test_sample_prior_toy_moments():
    rng = np.random.default_rng(31)
    draws = np.array([sample_prior(rng, toy_spec()).mu for _ in range(10**5)])
    assert abs(draws.mean() - 170.0) < 1.0
    assert abs(draws.std() - 50.0) < 1.0


def test_sample_prior_weibull_mean():
    rng = np.random.default_rng(32)
    spec = m1_spec(1)
    draws = np.array([sample_prior(rng, spec).sigma_alpha for _ in range(10**5)])
    assert abs(draws.mean() / (np.sqrt(np.pi) / 2) - 1) < 0.01


def test_sample_prior_positivity():
    rng = np.random.default_rng(33)
    spec = m3_spec(2, 3)
    for _ in range(2000):
        p = sample_prior(rng, spec)
        assert p.sigma_alpha > 0 and p.sigma_gamma > 0 and p.phi > 0
        assert np.all(p.sigma_beta > 0)


def test_sample_prior_lkj_marginal():
    # for a 5x5 LKJ(2) matrix, each correlation is marginally a stretched
    # Beta(a, a) on (-1, 1) with a = eta + (K-2)/2, so variance 1/(2a+1) = 1/8
    rng = np.random.default_rng(34)
    spec = m3_spec(2, 3)
    vals = []
    for _ in range(4000):
        chol = sample_prior(rng, spec).corr_chol
        corr = chol @ chol.T
        vals.append(corr[1, 0])
    vals = np.array(vals)
    assert abs(vals.mean()) < 0.02
    assert abs(vals.var() - 1 / 8) < 0.012


def test_params_serialization_roundtrip():
    rng = np.random.default_rng(35)
    for spec in (toy_spec(), m1_spec(2), m2_spec(2), m3_spec(2, 3)):
        p = sample_prior(rng, spec)
        q = Params.from_dict(p.to_dict())
        assert np.max(np.abs(unconstrain(spec, p) - unconstrain(spec, q))) < 1e-12
