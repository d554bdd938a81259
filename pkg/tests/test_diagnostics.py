import numpy as np
import pytest

from defectflow.diagnostics import Diagnostics, diagnose, ess, split_rhat
from defectflow.nuts import Draws, SamplerConfig


def make_draws(sample, divergent=None):
    sample = np.asarray(sample, dtype=float)
    if sample.ndim == 2:
        sample = sample[:, :, None]
    chains, iters, dim = sample.shape
    divergent = (
        np.zeros((chains, iters), dtype=bool) if divergent is None else np.asarray(divergent)
    )
    config = SamplerConfig(n_chains=chains, n_warmup=1, n_draws=iters, seed=0)
    return Draws(
        sample=sample,
        divergent=divergent,
        energy=np.zeros((chains, iters)),
        tree_depth=np.ones((chains, iters), dtype=int),
        accept_stat=np.full((chains, iters), 0.9),
        config=config,
        step_size=np.ones(chains),
        inv_mass=np.ones((chains, dim)),
    )


def test_split_rhat_identical_mirror_chains():
    # identical chains whose halves share mean and variance: B = 0 exactly,
    # so rhat = sqrt((n - 1) / n) with n the split-half length
    n = 1000
    half = np.sin(np.linspace(0, 37, n))
    chain = np.concatenate([half, half[::-1]])
    x = np.tile(chain, (4, 1))
    expected = np.sqrt((n - 1) / n)
    assert abs(split_rhat(x) - expected) < 1e-12


def test_split_rhat_separated_chains():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(0, 1, 1000), rng.normal(5, 1, 1000)])
    assert split_rhat(x) > 1.5


def test_split_rhat_iid_chains():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1, (4, 1000))
    assert split_rhat(x) < 1.01


def test_split_rhat_within_chain_trend_detected():
    # plain (unsplit) R-hat misses a trend shared by all chains; the split
    # version flags it
    t = np.linspace(0, 3, 1000)
    x = np.tile(t, (4, 1))
    assert split_rhat(x) > 1.5


def test_split_rhat_degenerate_constant():
    x = np.ones((4, 100))
    assert split_rhat(x) == 1.0


def test_split_rhat_preconditions():
    with pytest.raises(ValueError):
        split_rhat(np.zeros((1, 100)))
    with pytest.raises(ValueError):
        split_rhat(np.zeros((2, 3)))


def test_ess_iid():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 1, (4, 1000))
    value = ess(x)
    assert 3600 <= value <= 4400


def test_ess_ar1():
    # AR(1) with coefficient rho: ESS/total -> (1 - rho) / (1 + rho) = 1/19
    rng = np.random.default_rng(3)
    rho = 0.9
    chains = np.empty((4, 5000))
    for c in range(4):
        noise = rng.normal(0, 1, 5000)
        x = np.empty(5000)
        x[0] = noise[0]
        for t in range(1, 5000):
            x[t] = rho * x[t - 1] + np.sqrt(1 - rho**2) * noise[t]
        chains[c] = x
    value = ess(chains)
    expected = 20000 / 19
    assert abs(value / expected - 1) < 0.25


def test_ess_constant_chain_degenerate():
    x = np.full((4, 1000), 3.14)
    assert ess(x) == 4000.0


def test_diagnose_pass_on_iid():
    rng = np.random.default_rng(4)
    draws = make_draws(rng.normal(0, 1, (4, 1000, 3)))
    diag = diagnose(draws)
    assert diag.passed
    assert diag.max_rhat < 1.01
    assert 0.9 <= diag.min_ess_ratio
    assert diag.n_divergent == 0


def test_diagnose_divergence_flips_verdict():
    rng = np.random.default_rng(5)
    sample = rng.normal(0, 1, (4, 1000, 2))
    divergent = np.zeros((4, 1000), dtype=bool)
    divergent[1, 17] = True
    diag = diagnose(make_draws(sample, divergent))
    assert not diag.passed
    assert any("divergences" in r for r in diag.reasons)


def test_diagnose_bimodal_chains_fail():
    rng = np.random.default_rng(6)
    sample = np.stack(
        [
            rng.normal(0, 1, (1000, 2)),
            rng.normal(0, 1, (1000, 2)),
            rng.normal(8, 1, (1000, 2)),
            rng.normal(8, 1, (1000, 2)),
        ]
    )
    diag = diagnose(make_draws(sample))
    assert not diag.passed
    assert any("rhat" in r for r in diag.reasons)
    assert diag.max_rhat > 1.5


def test_diagnose_monotone_in_divergences():
    rng = np.random.default_rng(7)
    sample = rng.normal(0, 1, (4, 500, 2))
    divergent = np.zeros((4, 500), dtype=bool)
    previous_failed = False
    for k in (0, 1, 5):
        div = divergent.copy()
        div[0, :k] = True
        verdict = diagnose(make_draws(sample, div)).passed
        if previous_failed:
            assert not verdict
        previous_failed = previous_failed or not verdict


def test_diagnose_single_chain_warns():
    rng = np.random.default_rng(8)
    draws = make_draws(rng.normal(0, 1, (1, 1000, 2)))
    diag = diagnose(draws)
    assert diag.rhat is None
    assert any("rhat unavailable" in w for w in diag.warnings)


def test_diagnose_constant_coordinate_warns():
    rng = np.random.default_rng(9)
    sample = rng.normal(0, 1, (4, 500, 2))
    sample[:, :, 1] = 2.0
    diag = diagnose(make_draws(sample))
    assert any("constant" in w for w in diag.warnings)


def test_diagnostics_serialization_roundtrip():
    rng = np.random.default_rng(10)
    diag = diagnose(make_draws(rng.normal(0, 1, (4, 500, 2))))
    d = diag.to_dict()
    assert d["passed"] is True
    assert len(d["coordinates"]) == 2
    assert d["max_rhat"] == diag.max_rhat
