"""
Pytest configuration and fixtures for BiFAMP tests.
"""
import numpy as np
import pytest

from bifamp.schemas.problem import Application, ProblemSpec
from bifamp.schemas.run import SeOptions


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running phase-diagram and finite-size checks")


@pytest.fixture
def rng():
    """Fixed generator for Monte-Carlo checks."""
    return np.random.default_rng(20240611)


@pytest.fixture
def dictionary_problem():
    """Noiseless dictionary learning at alpha=0.5, rho=0.2."""
    return ProblemSpec(application=Application.DICTIONARY, alpha=0.5, pi=2.0, rho=0.2, delta=0.0)


@pytest.fixture
def completion_problem():
    """Noiseless completion of a Gaussian product at alpha=pi=4."""
    return ProblemSpec(application=Application.COMPLETION, alpha=4.0, pi=4.0, eps=0.55, delta=0.0)


@pytest.fixture
def cs_problem():
    """Known factor, sparse signal, small noise."""
    return ProblemSpec(application=Application.CS, alpha=0.6, pi=1.0, rho=0.2, delta=1e-4)


@pytest.fixture
def fast_se():
    """State-evolution options without the quadrature gate."""
    return SeOptions(check_quadrature=False)
