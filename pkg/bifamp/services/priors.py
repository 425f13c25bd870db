"""
BiFAMP Priors Service
Separable scalar priors and their Gaussian-tilted input functions

Every prior exposes the mean and variance of the tilted measure

    M(x) ∝ P(x) N(x; field, var)

together with its log-normalization. The signal side calls these with
(Sigma, T), the factor side with (Z, W). Factor quantities live in the
scaled units sqrt(N) * F, so no explicit N appears here.
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy import special, stats

from bifamp.core.errors import InvalidArgumentError, require_finite
from bifamp.services.quadrature import standard_normal_nodes, unit_interval_nodes

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


class PriorKind(Enum):
    GAUSS_BERNOULLI = "gauss_bernoulli"
    GAUSSIAN_FACTOR = "gaussian_factor"
    CALIBRATION = "calibration"
    NONNEG_GAUSS_BERNOULLI = "nonneg_gauss_bernoulli"


def _log_normal_pdf(x, mean, var):
    return -0.5 * (x - mean) ** 2 / var - 0.5 * (LOG_2PI + np.log(var))


class Prior:
    """
    Base class for separable priors.

    Subclasses implement `moments`, `log_partition`, `sample` and the prior
    moments; the state-evolution helpers `overlap` and `entropy` have
    quadrature defaults that subclasses replace with closed forms where
    one exists.
    """

    kind: PriorKind

    def moments(self, var, field):
        """Mean and variance of the tilted measure (vectorized)."""
        raise NotImplementedError

    def log_partition(self, var, field):
        """log ∫ P(x) N(x; field, var) dx, window normalization included."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        raise NotImplementedError

    def first_moment(self) -> float:
        raise NotImplementedError

    def second_moment(self) -> float:
        raise NotImplementedError

    def variance(self) -> float:
        return self.second_moment() - self.first_moment() ** 2

    def initial_overlap(self) -> float:
        """Overlap carried by the prior alone (uninformative initialization)."""
        return self.first_moment() ** 2

    def expand(self, axis: int = -1) -> "Prior":
        """Prior whose per-element parameters broadcast one axis further."""
        return self

    def restrict(self, index) -> "Prior":
        """Prior for a sub-block of the elements it describes."""
        return self

    def quadrature(self, order: int):
        """
        Discretized law of a ground-truth element x0.

        Returns:
            (nodes, weights, node_prior) where node_prior is the prior to
            denoise with at those nodes, broadcastable against (nodes, k).
        """
        raise NotImplementedError

    # -- scalar channels used by state evolution -------------------------

    def _field_samples(self, h: float, order: int):
        """Joint nodes of T = x0 + xi / sqrt(h) and the prior to use there."""
        x0, w0, node_prior = self.quadrature(order)
        z, wz = standard_normal_nodes(order)
        T = x0[:, None] + z[None, :] / np.sqrt(h)
        weights = w0[:, None] * wz[None, :]
        return T, weights, node_prior

    def overlap(self, h: float, order: int) -> float:
        """
        E[f(1/h, x0 + xi/sqrt(h))^2] for a scalar Gaussian channel of SNR h.

        On the Nishimori line this equals E[x0 f], the overlap after one
        state-evolution step.
        """
        if h <= 0.0:
            return self.initial_overlap()
        T, weights, node_prior = self._field_samples(h, order)
        mean, _ = node_prior.moments(1.0 / h, T)
        return float(np.sum(weights * mean ** 2))

    def entropy(self, h: float, order: int) -> float:
        """E log ∫ P(x) exp(-h x^2 / 2 + h T x) dx with the same field law."""
        if h <= 0.0:
            return 0.0
        T, weights, node_prior = self._field_samples(h, order)
        values = (
            node_prior.log_partition(1.0 / h, T)
            + 0.5 * (LOG_2PI - np.log(h))
            + 0.5 * h * T ** 2
        )
        return float(np.sum(weights * values))


@dataclass(frozen=True)
class GaussBernoulli(Prior):
    """(1 - rho) δ(x) + rho N(x; mean, var)."""

    rho: float = 1.0
    mean: float = 0.0
    var: float = 1.0

    kind = PriorKind.GAUSS_BERNOULLI

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidArgumentError(f"rho must lie in [0, 1], got {self.rho}")
        if not self.var > 0.0:
            raise InvalidArgumentError(f"var must be positive, got {self.var}")

    def _slab(self, var, field):
        """Posterior mean/variance of the Gaussian branch and its log weight."""
        total = var + self.var
        m1 = (self.mean * var + field * self.var) / total
        v1 = var * self.var / total
        with np.errstate(divide="ignore"):
            log_w = np.log(self.rho) + _log_normal_pdf(field, self.mean, total)
        return m1, v1, log_w

    def _spike(self, var, field):
        with np.errstate(divide="ignore"):
            return np.log1p(-self.rho) + _log_normal_pdf(field, 0.0, var)

    def moments(self, var, field):
        m1, v1, log_slab = self._slab(var, field)
        log_spike = self._spike(var, field)
        p = special.expit(log_slab - log_spike)
        mean = p * m1
        variance = p * v1 + p * (1.0 - p) * m1 ** 2
        return mean, variance

    def log_partition(self, var, field):
        _, _, log_slab = self._slab(var, field)
        return np.logaddexp(self._spike(var, field), log_slab)

    def sample(self, rng, shape):
        support = rng.random(shape) < self.rho
        values = self.mean + np.sqrt(self.var) * rng.standard_normal(shape)
        return np.where(support, values, 0.0)

    def first_moment(self):
        return self.rho * self.mean

    def second_moment(self):
        return self.rho * (self.mean ** 2 + self.var)

    def quadrature(self, order):
        z, wz = standard_normal_nodes(order)
        nodes = np.concatenate([[0.0], self.mean + np.sqrt(self.var) * z])
        weights = np.concatenate([[1.0 - self.rho], self.rho * wz])
        return nodes, weights, self

    def _field_samples(self, h, order):
        # The Bernoulli atom and the Gaussian branch each give a Gaussian law
        # for T, so a single Hermite rule per branch is exact in x0.
        z, wz = standard_normal_nodes(order)
        T = np.concatenate([z / np.sqrt(h), self.mean + z * np.sqrt(self.var + 1.0 / h)])
        weights = np.concatenate([(1.0 - self.rho) * wz, self.rho * wz])
        return T, weights, self


@dataclass(frozen=True)
class NonNegGaussBernoulli(Prior):
    """(1 - rho) δ(x) + rho N(x; mean, var) restricted to x >= 0."""

    rho: float = 1.0
    mean: float = 0.0
    var: float = 1.0

    kind = PriorKind.NONNEG_GAUSS_BERNOULLI

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidArgumentError(f"rho must lie in [0, 1], got {self.rho}")
        if not self.var > 0.0:
            raise InvalidArgumentError(f"var must be positive, got {self.var}")

    @property
    def _log_mass(self) -> float:
        return float(special.log_ndtr(self.mean / np.sqrt(self.var)))

    @staticmethod
    def _truncated(m, v):
        """Mean and variance of N(m, v) conditioned on x >= 0."""
        u = m / np.sqrt(v)
        # Inverse Mills ratio phi(u)/Phi(u) through erfcx, stable for u << 0.
        with np.errstate(over="ignore"):
            lam = np.sqrt(2.0 / np.pi) / special.erfcx(-u / np.sqrt(2.0))
        mean = m + np.sqrt(v) * lam
        variance = v * np.maximum(1.0 - lam * (lam + u), 0.0)
        return mean, variance

    def _slab(self, var, field):
        total = var + self.var
        m1 = (self.mean * var + field * self.var) / total
        v1 = var * self.var / total
        with np.errstate(divide="ignore"):
            log_w = (
                np.log(self.rho)
                + _log_normal_pdf(field, self.mean, total)
                + special.log_ndtr(m1 / np.sqrt(v1))
                - self._log_mass
            )
        return m1, v1, log_w

    def _spike(self, var, field):
        with np.errstate(divide="ignore"):
            return np.log1p(-self.rho) + _log_normal_pdf(field, 0.0, var)

    def moments(self, var, field):
        m1, v1, log_slab = self._slab(var, field)
        tm, tv = self._truncated(m1, v1)
        p = special.expit(log_slab - self._spike(var, field))
        return p * tm, p * tv + p * (1.0 - p) * tm ** 2

    def log_partition(self, var, field):
        _, _, log_slab = self._slab(var, field)
        return np.logaddexp(self._spike(var, field), log_slab)

    def _slab_law(self):
        sd = np.sqrt(self.var)
        return stats.truncnorm(a=-self.mean / sd, b=np.inf, loc=self.mean, scale=sd)

    def sample(self, rng, shape):
        support = rng.random(shape) < self.rho
        values = self._slab_law().rvs(size=shape, random_state=rng)
        return np.where(support, values, 0.0)

    def first_moment(self):
        tm, _ = self._truncated(self.mean, self.var)
        return self.rho * float(tm)

    def second_moment(self):
        tm, tv = self._truncated(self.mean, self.var)
        return self.rho * float(tv + tm ** 2)

    def quadrature(self, order):
        t, wt = unit_interval_nodes(order)
        nodes = np.concatenate([[0.0], self._slab_law().ppf(t)])
        weights = np.concatenate([[1.0 - self.rho], self.rho * wt])
        return nodes, weights, self


@dataclass(frozen=True)
class GaussianFactor(Prior):
    """Zero-mean Gaussian factor prior, N(0, var) in scaled units."""

    var: float = 1.0

    kind = PriorKind.GAUSSIAN_FACTOR

    def __post_init__(self):
        if not self.var > 0.0:
            raise InvalidArgumentError(f"var must be positive, got {self.var}")

    def moments(self, var, field):
        total = var + self.var
        return field * self.var / total, var * self.var / total

    def log_partition(self, var, field):
        return _log_normal_pdf(field, 0.0, var + self.var)

    def sample(self, rng, shape):
        return np.sqrt(self.var) * rng.standard_normal(shape)

    def first_moment(self):
        return 0.0

    def second_moment(self):
        return self.var

    def quadrature(self, order):
        z, wz = standard_normal_nodes(order)
        return np.sqrt(self.var) * z, np.asarray(wz), self

    def overlap(self, h, order):
        h = max(h, 0.0)
        return self.var ** 2 * h / (1.0 + self.var * h)

    def entropy(self, h, order):
        h = max(h, 0.0)
        return 0.5 * self.var * h - 0.5 * np.log1p(self.var * h)


@dataclass(frozen=True, eq=False)
class Calibration(Prior):
    """
    Factor prior given a noisy known estimate.

    The truth u and the stored estimate w' = (u + sqrt(eta) xi)/sqrt(1+eta)
    are jointly Gaussian, so u | w' ~ N(w'/sqrt(1+eta), eta/(1+eta)).
    eta = 0 is exact knowledge, eta = inf recovers GaussianFactor.
    """

    w_prime: np.ndarray
    eta: float = np.inf

    kind = PriorKind.CALIBRATION

    def __post_init__(self):
        if not self.eta >= 0.0:
            raise InvalidArgumentError(f"eta must be nonnegative, got {self.eta}")
        object.__setattr__(self, "w_prime", np.asarray(self.w_prime, dtype=float))

    @property
    def center(self):
        if np.isinf(self.eta):
            return np.zeros_like(self.w_prime)
        return self.w_prime / np.sqrt(1.0 + self.eta)

    @property
    def spread(self) -> float:
        if np.isinf(self.eta):
            return 1.0
        return self.eta / (1.0 + self.eta)

    def moments(self, var, field):
        v = self.spread
        total = var + v
        return (field * v + self.center * var) / total, var * v / total

    def log_partition(self, var, field):
        return _log_normal_pdf(field, self.center, var + self.spread)

    def sample(self, rng, shape):
        center = np.broadcast_to(self.center, shape)
        return center + np.sqrt(self.spread) * rng.standard_normal(shape)

    def first_moment(self):
        return 0.0

    def second_moment(self):
        return 1.0

    def variance(self):
        """Conditional variance given the estimate."""
        return self.spread

    def initial_overlap(self):
        return 1.0 / (1.0 + self.eta)

    def expand(self, axis=-1):
        return replace(self, w_prime=np.expand_dims(self.w_prime, axis))

    def restrict(self, index):
        if self.w_prime.ndim == 0:
            return self
        return replace(self, w_prime=self.w_prime[index])

    def quadrature(self, order):
        z, wz = standard_normal_nodes(order)
        w_nodes = np.repeat(z, z.size)
        window = Calibration(w_prime=w_nodes, eta=self.eta)
        nodes = window.center + np.sqrt(window.spread) * np.tile(z, z.size)
        weights = np.outer(wz, wz).ravel()
        return nodes, weights, window.expand(-1)

    def overlap(self, h, order):
        h = max(h, 0.0)
        if self.eta == 0.0:
            return 1.0
        inv_eta = 0.0 if np.isinf(self.eta) else 1.0 / self.eta
        return (inv_eta + h) / (1.0 + inv_eta + h)

    def entropy(self, h, order):
        h = max(h, 0.0)
        return 0.5 * h - 0.5 * np.log1p(h * self.spread)


# ---------------------------------------------------------------------------
# Module-level operations (validated entry points)
# ---------------------------------------------------------------------------

def _check(var_name: str, var, field_name: str, field) -> None:
    require_finite(var_name, var)
    require_finite(field_name, field)
    if np.any(np.asarray(var) <= 0.0):
        raise InvalidArgumentError(f"{var_name} must be positive")


def input_moments_x(prior: Prior, Sigma, T):
    """
    Signal-side input functions (f_a, f_c).

    Args:
        prior: signal prior
        Sigma: variance of the Gaussian window (> 0)
        T: center of the window

    Returns:
        Tuple (f_a, f_c) broadcast over the inputs
    """
    _check("Sigma", Sigma, "T", T)
    return prior.moments(Sigma, T)


def input_moments_f(prior: Prior, Z, W):
    """Factor-side input functions (f_r, f_s) in scaled units."""
    _check("Z", Z, "W", W)
    return prior.moments(Z, W)


def log_partition_x(prior: Prior, Sigma, T):
    """log Ẑ_X(Sigma, T); the window carries its 1/sqrt(2 pi Sigma) factor."""
    _check("Sigma", Sigma, "T", T)
    return prior.log_partition(Sigma, T)


def log_partition_f(prior: Prior, Z, W):
    _check("Z", Z, "W", W)
    return prior.log_partition(Z, W)


def log_window_partition(prior: Prior, var, field):
    """log ∫ P(x) exp(-(x - field)^2 / (2 var)) dx, the unnormalized window."""
    return prior.log_partition(var, field) + 0.5 * (LOG_2PI + np.log(var))


def neg_kl(prior: Prior, var, field, moments: Optional[tuple] = None):
    """-KL(M || P) for the tilted measure M, elementwise."""
    mean, variance = moments if moments is not None else prior.moments(var, field)
    return log_window_partition(prior, var, field) + (variance + (mean - field) ** 2) / (2.0 * var)
