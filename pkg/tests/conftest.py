"""Shared fixtures: synthetic datasets and reusable fits."""

from __future__ import annotations

import numpy as np
import pytest

from defectflow.dataio import Dataset, PreparedRow, RawRecord, prepare
from defectflow.models import M3, ModelSpec, Params, simulate_outcomes


LANGUAGES = ("C", "Go", "Python", "Ruby", "Haskell")


def synthetic_records(n_projects: int = 60, rows: int = 150, seed: int = 11) -> list[RawRecord]:
    """Commit-aggregate records with realistic magnitudes and sparse projects."""
    rng = np.random.default_rng(seed)
    records: list[RawRecord] = []
    project = 0
    while len(records) < rows:
        name = f"proj{project % n_projects:03d}"
        n_langs = 1 + (project % 3 == 0)
        langs = rng.choice(len(LANGUAGES), size=n_langs, replace=False)
        for k in langs:
            if len(records) >= rows:
                break
            pair = (name, LANGUAGES[k])
            if any((r.project, r.language) == pair for r in records):
                continue
            commits = int(np.exp(rng.normal(5.5, 1.2))) + 1
            insertions = int(np.exp(rng.normal(9.0, 1.5))) + 1
            age = float(int(np.exp(rng.normal(6.5, 0.8))) + 1)
            devs = int(np.exp(rng.normal(2.0, 1.0))) + 1
            bugs = int(min(commits, np.round(commits * rng.beta(2, 18))))
            records.append(RawRecord(name, LANGUAGES[k], commits, insertions, age, devs, bugs))
        project += 1
    return records


@pytest.fixture(scope="session")
def small_dataset() -> Dataset:
    return prepare(synthetic_records(n_projects=12, rows=30, seed=7))


@pytest.fixture(scope="session")
def medium_dataset() -> Dataset:
    return prepare(synthetic_records(n_projects=60, rows=150, seed=11))


def dataset_from_m3_process(
    seed: int = 42,
    n_languages: int = 5,
    n_projects: int = 60,
    n_rows: int = 150,
    sigma_gamma: float = 1.5,
) -> tuple[Dataset, Params]:
    """Simulate bugs from an m3-style generative process with strong project effects.

    Returns the dataset (with the simulated counts swapped in) and the
    generating parameters.
    """
    rng = np.random.default_rng(seed)
    base = prepare(synthetic_records(n_projects=n_projects, rows=n_rows, seed=seed))
    spec = ModelSpec(M3, n_languages=base.n_languages, n_projects=base.n_projects)
    corr = np.eye(5)
    truth = Params(
        M3,
        alpha=2.5,
        beta=np.array([0.45, 0.05, 0.15, 0.3]),
        alpha_language=rng.normal(0.0, 0.6, base.n_languages),
        beta_language=rng.normal(0.0, 0.12, (base.n_languages, 4)),
        alpha_project=rng.normal(0.0, sigma_gamma, base.n_projects),
        sigma_alpha=0.6,
        sigma_beta=np.full(4, 0.12),
        sigma_gamma=sigma_gamma,
        corr_chol=corr,
        phi=8.0,
    )
    counts = simulate_outcomes(rng, spec, truth, base.design())
    rows = tuple(
        PreparedRow(r.project_index, r.language_index, r.x, int(c))
        for r, c in zip(base.rows, counts)
    )
    return Dataset(rows, base.language_names, base.project_names), truth
