"""Shared fixtures: hypothesis profiles and session-scoped Monte Carlo runs."""

import os
from datetime import timedelta
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("ci", deadline=timedelta(milliseconds=4000))
settings.register_profile("dev", max_examples=20)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))

DATA_DIR = Path(__file__).parent / "data"

# One fixed master seed for every shared Monte Carlo fixture.
MC_SEED = 20240601


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def asymmetric_coverage_run():
    """1000-replication coverage run: K=3, d=2, n=200, N=800, ~0.6-accuracy
    asymmetric noise, tuned lambda. Shared by the ppi/simulate tests and the
    acceptance criteria 4-5."""
    from multippi import simulate

    spec = simulate.default_spec(seed=MC_SEED)
    return simulate.coverage_experiment(
        spec, simulate.ASYMMETRIC_3CLASS, reps=1000, alpha=0.05,
        lambda_mode="tuned", keep_replications=True)


@pytest.fixture(scope="session")
def identity_coverage_run():
    from multippi import simulate

    spec = simulate.default_spec(seed=MC_SEED + 2)
    return simulate.coverage_experiment(
        spec, simulate.NoiseModel.identity(3), reps=200, alpha=0.05)


@pytest.fixture(scope="session")
def uniform_coverage_run():
    from multippi import simulate

    spec = simulate.default_spec(seed=MC_SEED + 3)
    return simulate.coverage_experiment(
        spec, simulate.NoiseModel.uniform(3), reps=200, alpha=0.05)
