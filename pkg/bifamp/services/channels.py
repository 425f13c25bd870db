"""
BiFAMP Channels Service
Output channels P_out(y|z): output function, its derivative, log-partition and sampler

All methods are vectorized. Per-element parameters (the completion mask, the
factor-analysis row variances) are stored in an array that broadcasts against
the M x P data; `expand` inserts an axis so the same channel works on the
M x N x P edge arrays of relaxed BP.
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy import special

from bifamp.core.errors import InvalidArgumentError, UnsupportedError, require_finite
from bifamp.services.quadrature import standard_normal_nodes

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


class ChannelKind(Enum):
    AWGN = "awgn"
    MASKED_AWGN = "masked_awgn"
    TWO_GAUSSIAN_MIXTURE = "two_gaussian_mixture"
    ROWWISE_AWGN = "rowwise_awgn"


def _awgn_log_partition(omega, y, total):
    return -0.5 * (y - omega) ** 2 / total - 0.5 * (LOG_2PI + np.log(total))


class Channel:
    """Base class; subclasses are frozen dataclasses."""

    kind: ChannelKind

    def g_out(self, omega, y, V):
        raise NotImplementedError

    def dg_out(self, omega, y, V):
        raise NotImplementedError

    def log_partition(self, omega, y, V):
        """log ∫ P_out(y|z) N(z; omega, V) dz."""
        raise NotImplementedError

    def sample(self, z, rng: np.random.Generator):
        raise NotImplementedError

    def min_noise(self) -> float:
        """Smallest noise variance; V = 0 is only allowed when this is positive."""
        raise NotImplementedError

    def element(self, index) -> "Channel":
        """Channel acting on one element, or on a block when `index` holds slices."""
        return self

    def expand(self, axis: int = 1) -> "Channel":
        return self

    # -- state evolution (Nishimori line) --------------------------------

    def classes(self) -> list[tuple[float, "Channel"]]:
        """Groups of rows sharing one homogeneous channel, with their weights."""
        return [(1.0, self)]

    def mhat(self, V: float, order: int) -> float:
        """E[g_out^2] when y - omega carries the noise plus a N(0, V) error."""
        raise NotImplementedError

    def out_entropy(self, V: float, order: int) -> float:
        """E[log Z_out] under the same law."""
        raise NotImplementedError


@dataclass(frozen=True)
class Awgn(Channel):
    """y = z + sqrt(delta) w."""

    delta: float = 0.0

    kind = ChannelKind.AWGN

    def __post_init__(self):
        if not self.delta >= 0.0:
            raise InvalidArgumentError(f"delta must be nonnegative, got {self.delta}")

    def g_out(self, omega, y, V):
        return (y - omega) / (self.delta + V)

    def dg_out(self, omega, y, V):
        return np.broadcast_to(-1.0 / (self.delta + V), np.broadcast(omega, y, V).shape).copy()

    def log_partition(self, omega, y, V):
        return _awgn_log_partition(omega, y, self.delta + V)

    def sample(self, z, rng):
        z = np.asarray(z, dtype=float)
        if self.delta == 0.0:
            return z.copy()
        return z + np.sqrt(self.delta) * rng.standard_normal(z.shape)

    def min_noise(self):
        return self.delta

    def mhat(self, V, order):
        return 1.0 / (self.delta + V)

    def out_entropy(self, V, order):
        return -0.5 - 0.5 * (LOG_2PI + np.log(self.delta + V))


@dataclass(frozen=True, eq=False)
class MaskedAwgn(Channel):
    """
    AWGN on the known entries, a fixed dummy N(y; 0, 1) on the unknown ones.

    The dummy does not depend on z, so unknown entries have g_out = 0.
    `fraction` is the known fraction used by state evolution when no mask
    is attached.
    """

    delta: float = 0.0
    mask: Optional[np.ndarray] = None
    fraction: float = 1.0

    kind = ChannelKind.MASKED_AWGN

    def __post_init__(self):
        if not self.delta >= 0.0:
            raise InvalidArgumentError(f"delta must be nonnegative, got {self.delta}")
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            object.__setattr__(self, "mask", mask)
            object.__setattr__(self, "fraction", float(mask.mean()) if mask.size else 1.0)
        elif not 0.0 < self.fraction <= 1.0:
            raise InvalidArgumentError(f"fraction must lie in (0, 1], got {self.fraction}")

    @property
    def known(self):
        if self.mask is None:
            if self.fraction < 1.0:
                raise UnsupportedError("elementwise evaluation needs an explicit mask")
            return True
        return self.mask

    def g_out(self, omega, y, V):
        return np.where(self.known, (y - omega) / (self.delta + V), 0.0)

    def dg_out(self, omega, y, V):
        shape = np.broadcast(omega, y, V).shape
        return np.broadcast_to(np.where(self.known, -1.0 / (self.delta + V), 0.0), shape).copy()

    def log_partition(self, omega, y, V):
        known = _awgn_log_partition(omega, y, self.delta + V)
        dummy = -0.5 * np.asarray(y) ** 2 - 0.5 * LOG_2PI
        return np.where(self.known, known, dummy)

    def sample(self, z, rng):
        z = np.asarray(z, dtype=float)
        noise = rng.standard_normal(z.shape)
        observed = z + np.sqrt(self.delta) * noise if self.delta > 0 else z.copy()
        return np.where(self.known, observed, noise)

    def min_noise(self):
        return self.delta

    def element(self, index):
        if self.mask is None:
            return self
        return replace(self, mask=np.asarray(self.mask[index]))

    def expand(self, axis=1):
        if self.mask is None:
            return self
        return replace(self, mask=np.expand_dims(self.mask, axis))

    def mhat(self, V, order):
        return self.fraction / (self.delta + V)

    def out_entropy(self, V, order):
        observed = -0.5 - 0.5 * (LOG_2PI + np.log(self.delta + V))
        return self.fraction * observed + (1.0 - self.fraction) * (-0.5 - 0.5 * LOG_2PI)


@dataclass(frozen=True)
class TwoGaussianMixture(Channel):
    """
    Sparse large distortions: y = z + w with w ~ eps N(0, delta_s) + (1 - eps) N(0, delta_l).

    The output function is the exact posterior mean under the two-component
    convolution, i.e. weighted by the component responsibilities.
    """

    eps: float = 1.0
    delta_s: float = 0.0
    delta_l: float = 1.0

    kind = ChannelKind.TWO_GAUSSIAN_MIXTURE

    def __post_init__(self):
        if not 0.0 <= self.eps <= 1.0:
            raise InvalidArgumentError(f"eps must lie in [0, 1], got {self.eps}")
        if not self.delta_s >= 0.0:
            raise InvalidArgumentError("delta_s must be nonnegative")
        if not self.delta_l > 0.0:
            raise InvalidArgumentError("delta_l must be positive")

    def _components(self, omega, y, V):
        v_s = self.delta_s + V
        v_l = self.delta_l + V
        with np.errstate(divide="ignore"):
            log_s = np.log(self.eps) + _awgn_log_partition(omega, y, v_s)
            log_l = np.log1p(-self.eps) + _awgn_log_partition(omega, y, v_l)
        p_s = special.expit(log_s - log_l)
        return v_s, v_l, log_s, log_l, p_s

    def g_out(self, omega, y, V):
        v_s, v_l, _, _, p_s = self._components(omega, y, V)
        return (y - omega) * (p_s / v_s + (1.0 - p_s) / v_l)

    def dg_out(self, omega, y, V):
        v_s, v_l, _, _, p_s = self._components(omega, y, V)
        g_s = (y - omega) / v_s
        g_l = (y - omega) / v_l
        g = p_s * g_s + (1.0 - p_s) * g_l
        # Responsibilities move with omega: d p_s / d omega = p_s (g_s - g).
        spread = p_s * g_s ** 2 + (1.0 - p_s) * g_l ** 2 - g ** 2
        return spread - (p_s / v_s + (1.0 - p_s) / v_l)

    def log_partition(self, omega, y, V):
        _, _, log_s, log_l, _ = self._components(omega, y, V)
        return np.logaddexp(log_s, log_l)

    def sample(self, z, rng):
        z = np.asarray(z, dtype=float)
        small = rng.random(z.shape) < self.eps
        scale = np.where(small, np.sqrt(self.delta_s), np.sqrt(self.delta_l))
        return z + scale * rng.standard_normal(z.shape)

    def min_noise(self):
        return self.delta_s if self.eps > 0.0 else self.delta_l

    def _error_law(self, V, order):
        z, wz = standard_normal_nodes(order)
        e = np.concatenate([z * np.sqrt(self.delta_s + V), z * np.sqrt(self.delta_l + V)])
        w = np.concatenate([self.eps * wz, (1.0 - self.eps) * wz])
        return e, w

    def mhat(self, V, order):
        e, w = self._error_law(V, order)
        return float(np.sum(w * self.g_out(0.0, e, V) ** 2))

    def out_entropy(self, V, order):
        e, w = self._error_law(V, order)
        return float(np.sum(w * self.log_partition(0.0, e, V)))


@dataclass(frozen=True, eq=False)
class RowwiseAwgn(Channel):
    """
    Factor analysis: y = z + sqrt(psi_mu) w with a known variance per row.

    For AMP `psi` holds one value per row shaped (M, 1). For state evolution
    `psi` may instead list the distinct values with their `weights`.
    """

    psi: np.ndarray
    weights: Optional[np.ndarray] = None

    kind = ChannelKind.ROWWISE_AWGN

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float)
        if np.any(psi <= 0.0):
            raise InvalidArgumentError("psi must be positive")
        object.__setattr__(self, "psi", psi)
        if self.weights is not None:
            weights = np.asarray(self.weights, dtype=float)
            if weights.shape != psi.shape or not np.isclose(weights.sum(), 1.0):
                raise InvalidArgumentError("psi weights must match psi and sum to one")
            object.__setattr__(self, "weights", weights)

    @classmethod
    def from_rows(cls, psi_rows) -> "RowwiseAwgn":
        return cls(psi=np.asarray(psi_rows, dtype=float).reshape(-1, 1))

    def g_out(self, omega, y, V):
        return (y - omega) / (self.psi + V)

    def dg_out(self, omega, y, V):
        shape = np.broadcast(omega, y, V, self.psi).shape
        return np.broadcast_to(-1.0 / (self.psi + V), shape).copy()

    def log_partition(self, omega, y, V):
        return _awgn_log_partition(omega, y, self.psi + V)

    def sample(self, z, rng):
        z = np.asarray(z, dtype=float)
        return z + np.sqrt(self.psi) * rng.standard_normal(z.shape)

    def min_noise(self):
        return float(self.psi.min())

    def element(self, index):
        row = index[0] if isinstance(index, tuple) else index
        psi = self.psi.reshape(-1)[row]
        if np.ndim(psi) == 0:
            return Awgn(delta=float(psi))
        return RowwiseAwgn.from_rows(psi)

    def expand(self, axis=1):
        return replace(self, psi=np.expand_dims(self.psi, axis))

    def classes(self):
        if self.weights is not None:
            return [(float(w), Awgn(delta=float(p))) for p, w in zip(self.psi.ravel(), self.weights.ravel())]
        values, counts = np.unique(self.psi.ravel(), return_counts=True)
        total = counts.sum()
        return [(c / total, Awgn(delta=float(v))) for v, c in zip(values, counts)]

    def mhat(self, V, order):
        return sum(w * ch.mhat(V, order) for w, ch in self.classes())

    def out_entropy(self, V, order):
        return sum(w * ch.out_entropy(V, order) for w, ch in self.classes())


# ---------------------------------------------------------------------------
# Module-level operations (validated entry points)
# ---------------------------------------------------------------------------

def _resolve(channel: Channel, index) -> Channel:
    return channel if index is None else channel.element(index)


def _check(channel: Channel, omega, y, V) -> None:
    require_finite("omega", omega)
    require_finite("y", y)
    require_finite("V", V)
    V = np.asarray(V)
    if np.any(V < 0.0):
        raise InvalidArgumentError("V must be nonnegative")
    if channel.min_noise() == 0.0 and np.any(V <= 0.0):
        raise InvalidArgumentError("V must be positive for a noiseless channel")


def g_out(channel: Channel, omega, y, V, index=None):
    """
    Output function g_out = E[(z - omega)] / V under P_out(y|z) N(z; omega, V).

    Args:
        channel: output channel
        omega, y, V: cavity mean, observation, cavity variance
        index: row (or (row, column)) selecting per-element parameters

    Returns:
        g_out broadcast over the inputs
    """
    channel = _resolve(channel, index)
    _check(channel, omega, y, V)
    return channel.g_out(omega, y, V)


def dg_out(channel: Channel, omega, y, V, index=None):
    """Derivative of g_out with respect to omega."""
    channel = _resolve(channel, index)
    _check(channel, omega, y, V)
    return channel.dg_out(omega, y, V)


def log_partition_out(channel: Channel, omega, y, V, index=None):
    channel = _resolve(channel, index)
    _check(channel, omega, y, V)
    return channel.log_partition(omega, y, V)


def sample_output(channel: Channel, z, rng: np.random.Generator, index=None):
    """Draw y ~ P_out(.|z); deterministic given the generator state."""
    return _resolve(channel, index).sample(z, rng)


def mixture_rational_g_out(channel: TwoGaussianMixture, omega, y, V):
    """
    Prior-weighted rational form (y - omega)/V [1 - eps ds/(ds+V) - (1-eps) dl/(dl+V)].

    Coincides with the exact output function only when delta_s == delta_l;
    kept for comparison.
    """
    return (y - omega) / V * (
        1.0
        - channel.eps * channel.delta_s / (channel.delta_s + V)
        - (1.0 - channel.eps) * channel.delta_l / (channel.delta_l + V)
    )
