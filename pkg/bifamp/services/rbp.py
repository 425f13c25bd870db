"""
BiFAMP Relaxed BP Service
Per-edge message passing, the small-instance oracle for GAMP

Edge arrays have shape (M, N, P): a_msg[mu, i, l] is the message from x_il
to factor (mu, l), r_msg[mu, i, l] the one from F_mu_i. Memory is O(NMP).
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from bifamp.core.config import settings
from bifamp.core.errors import DivergenceError, InvalidArgumentError, SizeGuardError
from bifamp.schemas.problem import ProblemSpec
from bifamp.schemas.run import AmpOptions, InitMode
from bifamp.services.amp import PLANTED_VARIANCE, AmpState
from bifamp.services.bethe import solve_omega
from bifamp.services.factory import Model, build_model
from bifamp.services.priors import Calibration

logger = logging.getLogger(__name__)


@dataclass
class RbpResult:
    state: AmpState        # node marginals packed like an AMP state
    iterations: int
    converged: bool
    min_variance: float    # smallest c or s message seen during the run


def _positive(x):
    return np.maximum(x, settings.VARIANCE_FLOOR)


def _signal_window(A, B, n: int):
    sum_a = _positive(A.sum(axis=0))
    return n / sum_a, np.sqrt(n) * B.sum(axis=0) / sum_a


def _node_marginals(model: Model, A, B, S, R, n: int):
    """Marginals from the full sums over incoming factor messages."""
    Sigma, T = _signal_window(A, B, n)
    sum_s, sum_r = _positive(S.sum(axis=2)), R.sum(axis=2)
    Zvar, W = n / sum_s, np.sqrt(n) * sum_r / sum_s
    a, c = model.prior_x.moments(Sigma, T)
    r, s = model.prior_f.moments(Zvar, W)
    return a, c, r, s, Sigma, T, Zvar, W


def rbp_run(
    problem: ProblemSpec,
    Y: np.ndarray,
    options: AmpOptions,
    rng: np.random.Generator,
    n: int,
    model: Optional[Model] = None,
    truth: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> RbpResult:
    """
    Iterate the relaxed-BP messages to tolerance and return the node marginals.

    Args:
        problem: experiment description
        Y: M x P observations
        options: damping, tolerance, iteration cap, init mode
        rng: generator for the random initialization
        n: latent dimension N
        model: priors and channel; built from `problem` when omitted
        truth: (scaled F0, X0) for planted or cs init

    Returns:
        RbpResult whose state can be passed to the Bethe evaluators
    """
    m, p = problem.dims(n)
    if Y.shape != (m, p):
        raise InvalidArgumentError(f"Y has shape {Y.shape}, expected {(m, p)}")
    if n * m * p > settings.RBP_MAX_EDGES:
        raise SizeGuardError(f"relaxed BP refused: N*M*P = {n * m * p} exceeds {settings.RBP_MAX_EDGES}")
    model = model or build_model(problem)
    channel = model.channel.expand(1)
    prior_f_edges = model.prior_f.expand(-1)
    beta = options.damping
    factor_known = options.init is InitMode.CS

    if options.init is InitMode.PLANTED:
        if truth is None:
            raise InvalidArgumentError("planted init needs the ground truth")
        r0, a0 = truth
        a_node, c_node = np.asarray(a0, float), np.full((n, p), PLANTED_VARIANCE)
        r_node, s_node = np.asarray(r0, float), np.full((m, n), PLANTED_VARIANCE)
    else:
        a_node = np.asarray(model.prior_x.sample(rng, (n, p)), float)
        c_node = np.full((n, p), max(model.prior_x.variance(), settings.VARIANCE_FLOOR))
        if factor_known:
            if truth is not None:
                r_node = np.asarray(truth[0], float)
            elif isinstance(model.prior_f, Calibration) and model.prior_f.eta == 0.0:
                r_node = np.array(np.broadcast_to(model.prior_f.center, (m, n)))
            else:
                raise InvalidArgumentError("cs init needs the known factor")
            s_node = np.zeros((m, n))
        else:
            r_node = np.asarray(model.prior_f.sample(rng, (m, n)), float)
            s_node = np.full((m, n), max(model.prior_f.variance(), settings.VARIANCE_FLOOR))

    a_msg = np.broadcast_to(a_node[None, :, :], (m, n, p)).copy()
    c_msg = np.broadcast_to(c_node[None, :, :], (m, n, p)).copy()
    r_msg = np.broadcast_to(r_node[:, :, None], (m, n, p)).copy()
    s_msg = np.broadcast_to(s_node[:, :, None], (m, n, p)).copy()
    y = Y[:, None, :]
    min_variance = float(min(c_msg.min(), s_msg.min()))

    converged = False
    a_prev = a_node
    iteration = 0
    for iteration in range(1, options.max_iterations + 1):
        edge_v = (s_msg * c_msg + s_msg * a_msg ** 2 + r_msg ** 2 * c_msg) / n
        edge_w = r_msg * a_msg / np.sqrt(n)
        V_cav = _positive(edge_v.sum(axis=1, keepdims=True) - edge_v)
        omega_cav = edge_w.sum(axis=1, keepdims=True) - edge_w
        g = channel.g_out(omega_cav, y, V_cav)
        dg = channel.dg_out(omega_cav, y, V_cav)

        B = g * r_msg
        A = -dg * (r_msg ** 2 + s_msg) - g ** 2 * s_msg
        R = g * a_msg
        S = -dg * (c_msg + a_msg ** 2) - g ** 2 * c_msg

        cav_a = _positive(A.sum(axis=0, keepdims=True) - A)
        cav_b = B.sum(axis=0, keepdims=True) - B
        a_new, c_new = model.prior_x.moments(n / cav_a, np.sqrt(n) * cav_b / cav_a)
        a_msg = beta * a_new + (1.0 - beta) * a_msg
        c_msg = beta * c_new + (1.0 - beta) * c_msg
        if not factor_known:
            cav_s = _positive(S.sum(axis=2, keepdims=True) - S)
            cav_r = R.sum(axis=2, keepdims=True) - R
            r_new, s_new = prior_f_edges.moments(n / cav_s, np.sqrt(n) * cav_r / cav_s)
            r_msg = beta * r_new + (1.0 - beta) * r_msg
            s_msg = beta * s_new + (1.0 - beta) * s_msg
            min_variance = min(min_variance, float(s_msg.min()))
        min_variance = min(min_variance, float(c_msg.min()))

        if not (np.all(np.isfinite(a_msg)) and np.all(np.isfinite(r_msg))):
            raise DivergenceError(f"relaxed BP diverged at iteration {iteration}", iteration=iteration)

        a_node = model.prior_x.moments(*_signal_window(A, B, n))[0]
        delta = float(np.mean(np.abs(a_node - a_prev)))
        a_prev = a_node
        logger.debug("rBP iteration %d: mean|da|=%.3e", iteration, delta)
        if delta < options.tolerance:
            converged = True
            break

    a, c, r, s, Sigma, T, Zvar, W = _node_marginals(model, A, B, S, R, n)
    if factor_known:
        r, s = r_msg[:, :, 0], np.zeros((m, n))
    spread = (r ** 2 @ c + s @ a ** 2) / n
    V = _positive(s @ c / n + spread)
    # Fixed-point omega: the Onsager shift is evaluated self-consistently.
    omega = solve_omega(model.channel, Y, r @ a / np.sqrt(n), V, spread)
    state = AmpState(
        a=a, c=c, r=r, s=s, omega=omega, V=V, Sigma=Sigma, T=T, Zvar=Zvar, W=W,
        g_prev=model.channel.g_out(omega, Y, V), a_prev=a.copy(), r_prev=r.copy(),
        iteration=iteration, factor_known=factor_known,
    )
    if not converged:
        logger.warning("relaxed BP stopped unconverged after %d iterations", iteration)
    return RbpResult(state=state, iterations=iteration, converged=converged, min_variance=min_variance)
