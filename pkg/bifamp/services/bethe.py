"""
BiFAMP Bethe Service
Bethe free entropy at AMP fixed points, its variational form and the VMF baseline

All functions return raw totals; `free_entropy_report` also divides by N^2.
Sums go through numpy's pairwise reduction, so results do not depend on
thread count.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from bifamp.core.errors import NumericalError, UnsupportedError
from bifamp.schemas.reports import FreeEntropyReport
from bifamp.services.channels import Awgn, Channel, MaskedAwgn
from bifamp.services.priors import LOG_2PI, Prior, neg_kl

logger = logging.getLogger(__name__)

NON_FIXED_POINT_TOL = 1e-4


@dataclass(frozen=True)
class BetheParams:
    """Free parameters of the variational form (signal window, factor window)"""
    Sigma: np.ndarray
    T: np.ndarray
    Zvar: np.ndarray
    W: np.ndarray

    @classmethod
    def from_state(cls, state) -> "BetheParams":
        return cls(state.Sigma, state.T, state.Zvar, state.W)


@dataclass(frozen=True)
class BetheTerms:
    kl_x: float
    kl_f: float
    output: float
    correction: float

    @property
    def total(self) -> float:
        return self.kl_x + self.kl_f + self.output + self.correction


def _kl_sums(prior_x: Prior, prior_f: Prior, params: BetheParams, factor_known: bool):
    kl_x = float(np.sum(neg_kl(prior_x, params.Sigma, params.T)))
    kl_f = 0.0 if factor_known else float(np.sum(neg_kl(prior_f, params.Zvar, params.W)))
    return kl_x, kl_f


def bethe_terms(state, Y, prior_x: Prior, prior_f: Prior, channel: Channel) -> BetheTerms:
    """
    The four groups of the Bethe free entropy at an AMP state.

    The correction term (1/2N) sum g^2 (s a^2 + r^2 c) shares the sweep over
    M x P with the output term.
    """
    n = state.a.shape[0]
    kl_x, kl_f = _kl_sums(prior_x, prior_f, BetheParams.from_state(state), state.factor_known)
    g = channel.g_out(state.omega, Y, state.V)
    output = float(np.sum(channel.log_partition(state.omega, Y, state.V)))
    spread = (state.s @ state.a ** 2 + state.r ** 2 @ state.c) / n
    correction = 0.5 * float(np.sum(g ** 2 * spread))
    return BetheTerms(kl_x, kl_f, output, correction)


def bethe_free_entropy(state, Y, prior_x: Prior, prior_f: Prior, channel: Channel) -> float:
    return bethe_terms(state, Y, prior_x, prior_f, channel).total


def generating_free_entropy(state, Y, prior_x: Prior, prior_f: Prior, channel: Channel) -> float:
    """
    Fixed-point-generating form: the correction becomes 1/2 sum (omega - p)^2 / (V - v_s)
    with p = r a / sqrt(N) and v_s = s c / N. Equal to the Bethe form at a GAMP fixed point.
    """
    n = state.a.shape[0]
    kl_x, kl_f = _kl_sums(prior_x, prior_f, BetheParams.from_state(state), state.factor_known)
    p = state.r @ state.a / np.sqrt(n)
    spread = np.maximum(state.V - state.s @ state.c / n, np.finfo(float).tiny)
    output = float(np.sum(channel.log_partition(state.omega, Y, state.V)))
    correction = 0.5 * float(np.sum((state.omega - p) ** 2 / spread))
    return kl_x + kl_f + output + correction


# ---------------------------------------------------------------------------
# Variational form
# ---------------------------------------------------------------------------

def _star(params: BetheParams, prior_x: Prior, prior_f: Prior, r_known: Optional[np.ndarray]):
    a, c = prior_x.moments(params.Sigma, params.T)
    if r_known is None:
        r, s = prior_f.moments(params.Zvar, params.W)
    else:
        r, s = r_known, np.zeros_like(r_known)
    n = a.shape[0]
    p = r @ a / np.sqrt(n)
    v_s = s @ c / n
    spread = (s @ a ** 2 + r ** 2 @ c) / n
    return p, v_s, spread


def solve_omega(channel: Channel, Y, p, V, spread, tol: float = 1e-12, max_newton: int = 60):
    """
    Root of g_out(omega) + (omega - p) / spread in omega, elementwise.

    The left side is nondecreasing because -dg_out <= 1/V and spread <= V,
    so Newton steps are tried first and brentq takes over on stragglers.
    """
    if isinstance(channel, (Awgn, MaskedAwgn)):
        known = True if isinstance(channel, Awgn) else channel.known
        noise = channel.delta
        denominator = np.maximum(noise + V - spread, np.finfo(float).tiny)
        omega = p + spread * (p - Y) / denominator
        return np.where(known, omega, p)

    safe = np.maximum(spread, np.finfo(float).tiny)
    omega = np.array(p, dtype=float, copy=True)
    for _ in range(max_newton):
        h = channel.g_out(omega, Y, V) + (omega - p) / safe
        slope = channel.dg_out(omega, Y, V) + 1.0 / safe
        step = np.where(slope > 0.0, h / np.where(slope > 0.0, slope, 1.0), 0.0)
        omega = omega - step
        if np.max(np.abs(h)) < tol:
            return omega

    residual = np.abs(channel.g_out(omega, Y, V) + (omega - p) / safe)
    for index in zip(*np.nonzero(residual >= tol)):
        element = channel.element(index)
        y, v, center, width = Y[index], V[index], p[index], safe[index]

        def h(w):
            return float(element.g_out(w, y, v) + (w - center) / width)

        half = 1.0 + abs(y - center)
        while h(center - half) > 0 or h(center + half) < 0:
            half *= 2.0
            if half > 1e12:
                raise NumericalError(f"omega* bracket failed at {index}, residual {residual[index]:.3e}")
        omega[index] = optimize.brentq(h, center - half, center + half, xtol=1e-14)
    return omega


def variational_bethe(
    params: BetheParams,
    Y,
    prior_x: Prior,
    prior_f: Prior,
    channel: Channel,
    r_known: Optional[np.ndarray] = None,
) -> float:
    """
    Variational Bethe free entropy as a function of (Sigma, T, Z, W).

    Args:
        params: window variances and centers on both sides
        Y: observations
        prior_x, prior_f, channel: model
        r_known: scaled factor when F is known (cs mode); the factor KL is dropped

    Returns:
        -sum KL_F - sum KL_X + sum[log Z_out(omega*, V*) + 1/2 g_out^2 (V* - v_s)]
    """
    p, v_s, spread = _star(params, prior_x, prior_f, r_known)
    V = v_s + spread
    omega = solve_omega(channel, Y, p, V, spread)
    kl_x, kl_f = _kl_sums(prior_x, prior_f, params, r_known is not None)
    g = channel.g_out(omega, Y, V)
    value = kl_x + kl_f + float(np.sum(channel.log_partition(omega, Y, V) + 0.5 * g ** 2 * spread))
    if not np.isfinite(value):
        raise NumericalError("variational Bethe free entropy is not finite")
    return value


def awgn_bethe(params: BetheParams, Y, prior_x: Prior, prior_f: Prior, delta: float,
               r_known: Optional[np.ndarray] = None) -> float:
    """Closed form of the variational entropy for AWGN."""
    p, v_s, spread = _star(params, prior_x, prior_f, r_known)
    kl_x, kl_f = _kl_sums(prior_x, prior_f, params, r_known is not None)
    output = -np.sum((Y - p) ** 2 / (2.0 * (delta + v_s))) - 0.5 * np.sum(LOG_2PI + np.log(delta + v_s + spread))
    return kl_x + kl_f + float(output)


def vmf_free_entropy(params: BetheParams, Y, prior_x: Prior, prior_f: Prior, delta: float,
                     r_known: Optional[np.ndarray] = None) -> float:
    """Variational mean-field free entropy; AWGN with delta > 0 only."""
    if not delta > 0.0:
        raise UnsupportedError("the mean-field free entropy needs delta > 0")
    p, v_s, spread = _star(params, prior_x, prior_f, r_known)
    kl_x, kl_f = _kl_sums(prior_x, prior_f, params, r_known is not None)
    squared = np.sum((Y - p) ** 2 + v_s + spread)
    return kl_x + kl_f - float(squared) / (2.0 * delta) - 0.5 * Y.size * (LOG_2PI + np.log(delta))


def free_entropy_report(state, Y, prior_x: Prior, prior_f: Prior, channel: Channel,
                        mean_delta_a: Optional[float] = None) -> FreeEntropyReport:
    """All free entropies of one state, per N^2 and in total."""
    n = state.a.shape[0]
    terms = bethe_terms(state, Y, prior_x, prior_f, channel)
    params = BetheParams.from_state(state)
    r_known = state.r if state.factor_known else None
    flagged = mean_delta_a is not None and mean_delta_a > NON_FIXED_POINT_TOL
    if flagged:
        logger.warning("Bethe free entropy evaluated away from a fixed point (mean |da| = %.3e)", mean_delta_a)

    phi_vmf = None
    if isinstance(channel, Awgn) and channel.delta > 0.0:
        phi_vmf = vmf_free_entropy(params, Y, prior_x, prior_f, channel.delta, r_known) / n ** 2
    return FreeEntropyReport(
        n=n,
        phi_bethe=terms.total / n ** 2,
        phi_bethe_total=terms.total,
        phi_generating=generating_free_entropy(state, Y, prior_x, prior_f, channel) / n ** 2,
        phi_variational=variational_bethe(params, Y, prior_x, prior_f, channel, r_known) / n ** 2,
        phi_vmf=phi_vmf,
        kl_x=terms.kl_x,
        kl_f=terms.kl_f,
        output_term=terms.output,
        correction_term=terms.correction,
        non_fixed_point=flagged,
    )
