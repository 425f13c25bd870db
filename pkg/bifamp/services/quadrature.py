"""
BiFAMP Quadrature Helpers
Gauss-Hermite and Gauss-Legendre rules for Gaussian expectations
"""
from functools import lru_cache

import numpy as np
from scipy.special import roots_legendre


@lru_cache(maxsize=16)
def _hermite(order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite.hermgauss(order)
    # Rescale from the e^{-x^2} weight to the standard normal density.
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


def standard_normal_nodes(order: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Nodes and weights such that sum(w * f(z)) approximates E[f(z)], z ~ N(0, 1).

    Returned arrays are read-only views of a cached rule.
    """
    z, w = _hermite(int(order))
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


@lru_cache(maxsize=16)
def unit_interval_nodes(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule mapped to (0, 1); weights sum to one."""
    x, w = roots_legendre(int(order))
    return 0.5 * (x + 1.0), 0.5 * w
