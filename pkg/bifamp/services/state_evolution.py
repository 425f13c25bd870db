"""
BiFAMP State Evolution Service
Scalar recursions for the large-N behavior of AMP and the replica free entropy

On the Nishimori line the state is (m_x, m_F), with one m_F per class of
rows sharing a channel (two or more only in factor analysis). The general
recursion tracks m, q, Q on both sides for AWGN and may use a separate
ground-truth problem to describe mismatched priors.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from bifamp.core.config import settings
from bifamp.core.errors import InvalidArgumentError, NumericalError, QuadratureError, UnsupportedError
from bifamp.schemas.problem import ProblemSpec
from bifamp.schemas.reports import MmseResult, Regime, SeFixedPoint
from bifamp.schemas.run import SeInit, SeOptions
from bifamp.services.channels import LOG_2PI, Awgn
from bifamp.services.factory import Model, build_model
from bifamp.services.priors import Calibration, Prior
from bifamp.services.quadrature import standard_normal_nodes

logger = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-10
V_FLOOR = 1e-14
INFORMATIVE_OFFSET = 1e-8
QUADRATURE_GATE_TOL = 1e-8
QUADRATURE_GATE_ITERATIONS = 10_000
EXACT_RECOVERY_TOL = 1e-6
DIVERGENCE_STARTS = (1e-6, 1e-9)


@dataclass(frozen=True)
class SeState:
    """Nishimori-line order parameters"""
    m_x: float
    m_f: np.ndarray

    def distance(self, other: "SeState") -> float:
        return float(max(abs(self.m_x - other.m_x), np.max(np.abs(self.m_f - other.m_f))))


@dataclass(frozen=True)
class GeneralState:
    """Overlaps m, self-overlaps q and second moments Q on both sides"""
    m_x: float
    q_x: float
    Q_x: float
    m_f: float
    q_f: float
    Q_f: float
    m_hat: Optional[float] = None
    q_hat: Optional[float] = None
    chi_hat: Optional[float] = None

    def vector(self) -> np.ndarray:
        return np.array([self.m_x, self.q_x, self.Q_x, self.m_f, self.q_f, self.Q_f])


@dataclass
class SeRun:
    fixed_point: SeState
    converged: bool
    iterations: int
    order: int
    e_x: float
    e_f: float
    trajectory: list[SeState] = field(default_factory=list)
    monotonicity_violations: int = 0

    def report(self, phi: Optional[float] = None) -> SeFixedPoint:
        return SeFixedPoint(
            m_x=self.fixed_point.m_x,
            m_f=self.fixed_point.m_f.tolist(),
            e_x=self.e_x,
            e_f=self.e_f,
            phi=phi,
            iterations=self.iterations,
            converged=self.converged,
        )


# ---------------------------------------------------------------------------
# Nishimori line
# ---------------------------------------------------------------------------

def _second_moments(model: Model) -> tuple[float, float, float]:
    qx0 = model.prior_x.second_moment()
    qf0 = model.prior_f.second_moment()
    return qx0, qf0, qx0 * qf0


def _channel_hats(model: Model, state: SeState, order: int):
    """(weight, m_hat, V, channel) per class of rows."""
    _, _, qz = _second_moments(model)
    hats = []
    for k, (weight, channel) in enumerate(model.channel.classes()):
        V = max(qz - state.m_f[k] * state.m_x, V_FLOOR * qz)
        hats.append((weight, channel.mhat(V, order), V, channel))
    return hats


def se_step(problem: ProblemSpec, state: SeState, order: Optional[int] = None,
            model: Optional[Model] = None, sequential: bool = False) -> SeState:
    """
    One synchronous update of (m_x, m_F):

        m_x <- overlap_X(alpha sum_k w_k m_F_k m_hat_k)
        m_F_k <- overlap_F(pi m_x m_hat_k)

    Both right-hand sides use the incoming state. With `sequential` the
    factor side reads the new m_x instead.
    """
    model = model or build_model(problem)
    order = order or problem.quadrature_order
    hats = _channel_hats(model, state, order)
    field_x = problem.alpha * sum(w * state.m_f[k] * mhat for k, (w, mhat, _, _) in enumerate(hats))
    m_x = model.prior_x.overlap(field_x, order)
    source = state.m_x
    if sequential:
        source = m_x
        hats = _channel_hats(model, SeState(m_x, state.m_f), order)
    m_f = np.array([model.prior_f.overlap(problem.pi * source * mhat, order) for _, mhat, _, _ in hats])
    return SeState(m_x=m_x, m_f=m_f)


def errors_of(model: Model, state: SeState) -> tuple[float, float]:
    """(E_X, E_F) = (Q_x0 - m_x, Q_F0 - sum_k w_k m_F_k)."""
    qx0, qf0, _ = _second_moments(model)
    weights = np.array([w for w, _ in model.channel.classes()])
    return qx0 - state.m_x, qf0 - float(weights @ state.m_f)


def initial_state(problem: ProblemSpec, options: SeOptions, model: Optional[Model] = None) -> SeState:
    model = model or build_model(problem)
    classes = len(model.channel.classes())
    qx0, qf0, _ = _second_moments(model)
    if options.init is SeInit.INFORMATIVE:
        return SeState(qx0 - INFORMATIVE_OFFSET, np.full(classes, qf0 - INFORMATIVE_OFFSET))
    if options.init is SeInit.CUSTOM:
        return SeState(float(options.m_x), np.full(classes, float(options.m_f)))
    m_x = model.prior_x.initial_overlap()
    m_f = model.prior_f.initial_overlap()
    if m_x == 0.0 and m_f == 0.0:
        # Zero-mean priors: the all-zero state is a fixed point, seed it. A
        # synchronous step maps (0, m_F) to (m_x, 0), so both sides get the seed.
        m_f = options.seed_overlap
        if not options.sequential:
            m_x = options.seed_overlap
    return SeState(m_x, np.full(classes, m_f))


def _iterate(problem, model, state, order, tolerance, max_iterations, keep_trajectory, monotone, sequential=False):
    trajectory = [state] if keep_trajectory else []
    violations = 0
    for iteration in range(1, max_iterations + 1):
        new = se_step(problem, state, order, model, sequential)
        if not np.isfinite(new.m_x) or not np.all(np.isfinite(new.m_f)):
            raise NumericalError(f"state evolution produced a non-finite state at iteration {iteration}")
        if monotone and (new.m_x < state.m_x - MONOTONE_SLACK or np.any(new.m_f < state.m_f - MONOTONE_SLACK)):
            violations += 1
        if keep_trajectory:
            trajectory.append(new)
        step = new.distance(state)
        state = new
        if step < tolerance:
            return state, True, iteration, trajectory, violations
    return state, False, max_iterations, trajectory, violations


def se_run(
    problem: ProblemSpec,
    options: Optional[SeOptions] = None,
    model: Optional[Model] = None,
    keep_trajectory: bool = True,
) -> SeRun:
    """
    Iterate se_step to |dm| < tolerance.

    Unconverged runs return the last state with converged=False. The
    quadrature gate reruns from the fixed point at doubled order until the
    fixed point moves by less than 1e-8; QuadratureError when the maximum
    order is reached first.
    """
    options = options or SeOptions()
    model = model or build_model(problem)
    order = problem.quadrature_order
    start = initial_state(problem, options, model)
    monotone = options.init is SeInit.UNINFORMATIVE
    state, converged, iterations, trajectory, violations = _iterate(
        problem, model, start, order, options.tolerance, options.max_iterations, keep_trajectory, monotone,
        options.sequential,
    )
    if violations:
        logger.warning("state evolution trajectory decreased %d times", violations)
    if not converged:
        logger.warning("state evolution unconverged after %d iterations (%s init)", iterations, options.init.value)

    if options.check_quadrature and converged:
        while True:
            finer = 2 * order
            if finer > settings.QUADRATURE_MAX_ORDER:
                raise QuadratureError(f"fixed point still moves at quadrature order {order}")
            refined, _, _, _, _ = _iterate(
                problem, model, state, finer, options.tolerance,
                min(QUADRATURE_GATE_ITERATIONS, options.max_iterations), False, False, options.sequential,
            )
            moved = refined.distance(state)
            if moved < QUADRATURE_GATE_TOL:
                break
            logger.info("quadrature order %d moved the fixed point by %.2e, escalating", finer, moved)
            state, order = refined, finer

    e_x, e_f = errors_of(model, state)
    return SeRun(state, converged, iterations, order, e_x, e_f, trajectory, violations)


# ---------------------------------------------------------------------------
# General recursion (AWGN)
# ---------------------------------------------------------------------------

def _awgn_delta(model: Model) -> float:
    if not isinstance(model.channel, Awgn):
        raise UnsupportedError("the general recursion is implemented for AWGN channels only")
    return model.channel.delta


def _denoiser(node_prior: Prior, assumed: Prior) -> Prior:
    """Prior to denoise with at the quadrature nodes of the true law."""
    if isinstance(node_prior, Calibration) and isinstance(assumed, Calibration):
        return replace(node_prior, eta=assumed.eta)
    return assumed


def _side_update(true_prior: Prior, assumed: Prior, precision: float, signal: float, noise: float, order: int):
    """(m, q, Q) of a scalar channel T = (signal x0 + sqrt(noise) xi) / precision."""
    if not precision > 0.0:
        raise NumericalError(f"general state evolution reached a nonpositive precision {precision:.3e}")
    x0, w0, node_prior = true_prior.quadrature(order)
    z, wz = standard_normal_nodes(order)
    T = (signal * x0[:, None] + np.sqrt(max(noise, 0.0)) * z[None, :]) / precision
    weights = w0[:, None] * wz[None, :]
    mean, variance = _denoiser(node_prior, assumed).moments(1.0 / precision, T)
    m = float(np.sum(weights * x0[:, None] * mean))
    q = float(np.sum(weights * mean ** 2))
    return m, q, q + float(np.sum(weights * variance))


def se_step_general(problem: ProblemSpec, state: GeneralState, truth: Optional[ProblemSpec] = None,
                    order: Optional[int] = None) -> GeneralState:
    """
    One synchronous update of the six order parameters.

    chi_hat = m_hat = 1/(Delta + V), V = Q_F Q_x - q_F q_x,
    q_hat = (Delta0 + Qz0 + q_F q_x - 2 m_F m_x) / (Delta + V)^2.
    `truth` describes the generating priors and noise; defaults to `problem`.
    """
    if not (state.Q_x >= state.q_x >= 0.0 and state.Q_f >= state.q_f >= 0.0):
        raise InvalidArgumentError("general state needs Q >= q >= 0 on both sides")
    order = order or problem.quadrature_order
    model = build_model(problem)
    true_model = build_model(truth) if truth is not None else model
    delta, delta0 = _awgn_delta(model), _awgn_delta(true_model)
    _, _, qz0 = _second_moments(true_model)

    V = state.Q_f * state.Q_x - state.q_f * state.q_x
    m_hat = 1.0 / (delta + V)
    q_hat = (delta0 + qz0 + state.q_f * state.q_x - 2.0 * state.m_f * state.m_x) * m_hat ** 2

    alpha, pi = problem.alpha, problem.pi
    m_x, q_x, Q_x = _side_update(
        true_model.prior_x, model.prior_x,
        precision=alpha * (state.Q_f * m_hat - (state.Q_f - state.q_f) * q_hat),
        signal=alpha * state.m_f * m_hat,
        noise=alpha * state.q_f * q_hat,
        order=order,
    )
    m_f, q_f, Q_f = _side_update(
        true_model.prior_f, model.prior_f,
        precision=pi * (state.Q_x * m_hat - (state.Q_x - state.q_x) * q_hat),
        signal=pi * state.m_x * m_hat,
        noise=pi * state.q_x * q_hat,
        order=order,
    )
    return GeneralState(m_x, q_x, Q_x, m_f, q_f, Q_f, m_hat=m_hat, q_hat=q_hat, chi_hat=m_hat)


def nishimori_general_state(problem: ProblemSpec, m_x: float, m_f: float) -> GeneralState:
    """General state on the Nishimori manifold: q = m, Q = prior second moment."""
    model = build_model(problem)
    qx0, qf0, _ = _second_moments(model)
    return GeneralState(m_x, m_x, qx0, m_f, m_f, qf0)


@dataclass
class GeneralRun:
    fixed_point: GeneralState
    converged: bool
    iterations: int
    e_x: float
    e_f: float
    trajectory: list[GeneralState] = field(default_factory=list)


def general_errors(truth: ProblemSpec, state: GeneralState) -> tuple[float, float]:
    """(E_X, E_F) = (Q0 - 2 m + q) per side, which is Q0 - m on the Nishimori manifold."""
    qx0, qf0, _ = _second_moments(build_model(truth))
    return qx0 - 2.0 * state.m_x + state.q_x, qf0 - 2.0 * state.m_f + state.q_f


def general_initial_state(problem: ProblemSpec, options: SeOptions) -> GeneralState:
    """
    The Nishimori-line starting point lifted to six parameters.

    A side that starts without overlap gets the seed, since a zero self-overlap
    leaves the other side with no precision.
    """
    start = initial_state(problem, options)
    m_x = max(start.m_x, options.seed_overlap)
    m_f = max(float(start.m_f[0]), options.seed_overlap)
    return nishimori_general_state(problem, m_x, m_f)


def se_run_general(
    problem: ProblemSpec,
    options: Optional[SeOptions] = None,
    truth: Optional[ProblemSpec] = None,
    state: Optional[GeneralState] = None,
    keep_trajectory: bool = True,
) -> GeneralRun:
    """
    Iterate se_step_general until no parameter moves by more than the tolerance.

    `truth` describes the generating priors and noise when they differ from
    the ones assumed by the denoisers; it must share alpha and pi.
    """
    options = options or SeOptions()
    if truth is not None and (truth.alpha != problem.alpha or truth.pi != problem.pi):
        raise InvalidArgumentError("the generating problem must share alpha and pi")
    state = state or general_initial_state(problem, options)
    trajectory = [state] if keep_trajectory else []
    converged, iterations = False, options.max_iterations
    for iteration in range(1, options.max_iterations + 1):
        new = se_step_general(problem, state, truth)
        if not np.all(np.isfinite(new.vector())):
            raise NumericalError(f"general state evolution produced a non-finite state at iteration {iteration}")
        if keep_trajectory:
            trajectory.append(new)
        step = float(np.max(np.abs(new.vector() - state.vector())))
        state = new
        if step < options.tolerance:
            converged, iterations = True, iteration
            break
    if not converged:
        logger.warning("general state evolution unconverged after %d iterations", iterations)
    e_x, e_f = general_errors(truth or problem, state)
    return GeneralRun(state, converged, iterations, e_x, e_f, trajectory)


# ---------------------------------------------------------------------------
# Replica free entropy
# ---------------------------------------------------------------------------

def replica_free_entropy(problem: ProblemSpec, m_x: float, m_f, model: Optional[Model] = None,
                         order: Optional[int] = None) -> float:
    """
    Replica-symmetric free entropy per N^2 on the Nishimori line.

    phi = alpha pi sum_k w_k out_k(V_k)
          + alpha sum_k w_k [-mhat_F_k m_F_k / 2 + psi_F(mhat_F_k)]
          + pi [-mhat_x m_x / 2 + psi_X(mhat_x)]

    with mhat_F_k = pi m_x mhat_k and mhat_x = alpha sum_k w_k m_F_k mhat_k.
    """
    model = model or build_model(problem)
    order = order or problem.quadrature_order
    classes = model.channel.classes()
    m_f = np.broadcast_to(np.asarray(m_f, dtype=float), (len(classes),))
    qx0, qf0, qz = _second_moments(model)
    if m_x < 0.0 or np.any(m_f < 0.0) or np.any(m_f * m_x > qz * (1.0 + 1e-9)):
        raise InvalidArgumentError("order parameters outside the domain m >= 0, m_F m_x <= <z0^2>")

    state = SeState(m_x, np.array(m_f))
    hats = _channel_hats(model, state, order)
    alpha, pi = problem.alpha, problem.pi
    output = sum(w * channel.out_entropy(V, order) for w, _, V, channel in hats)
    factor = 0.0
    for k, (w, mhat, _, _) in enumerate(hats):
        mhat_f = pi * m_x * mhat
        factor += w * (-0.5 * mhat_f * m_f[k] + model.prior_f.entropy(mhat_f, order))
    mhat_x = alpha * sum(w * m_f[k] * mhat for k, (w, mhat, _, _) in enumerate(hats))
    signal = -0.5 * mhat_x * m_x + model.prior_x.entropy(mhat_x, order)
    return alpha * pi * output + alpha * factor + pi * signal


def dictionary_free_entropy(problem: ProblemSpec, m_x: float, m_f: float, order: Optional[int] = None) -> float:
    """
    Closed form for dictionary learning and calibration (x_mean = 0, x_var = 1, AWGN).

    Only the signal term keeps a one-dimensional Gaussian integral, written
    here directly over the two branches of the Gauss-Bernoulli law of T.
    """
    if problem.x_mean != 0.0 or problem.x_var != 1.0 or problem.nonneg:
        raise UnsupportedError("closed form needs x_mean = 0 and x_var = 1")
    model = build_model(problem)
    delta = _awgn_delta(model)
    order = order or problem.quadrature_order
    alpha, pi, rho, eta = problem.alpha, problem.pi, problem.rho, problem.eta_value

    V = rho - m_f * m_x
    mhat = 1.0 / (delta + V)
    mhat_f = pi * m_x * mhat
    mhat_x = alpha * m_f * mhat
    spread = 1.0 if np.isinf(eta) else eta / (1.0 + eta)

    output = -0.5 - 0.5 * (LOG_2PI + np.log(delta + V))
    factor = -0.5 * mhat_f * m_f + 0.5 * mhat_f - 0.5 * np.log1p(mhat_f * spread)

    z, wz = standard_normal_nodes(order)
    h = mhat_x
    if h > 0.0:
        def psi(u):
            with np.errstate(divide="ignore"):
                slab = np.log(rho) - 0.5 * np.log1p(h) + u ** 2 / (2.0 * (1.0 + h))
                return np.logaddexp(np.log1p(-rho), slab)

        psi_x = (1.0 - rho) * np.sum(wz * psi(np.sqrt(h) * z)) + rho * np.sum(wz * psi(np.sqrt(h * (1.0 + h)) * z))
    else:
        psi_x = 0.0
    signal = -0.5 * mhat_x * m_x + float(psi_x)
    return alpha * pi * output + alpha * factor + pi * signal


def recovery_divergence(problem: ProblemSpec, model: Optional[Model] = None) -> float:
    """
    Slope of phi against log(1/t) on the approach m = (1 - t) Q0 to exact recovery.

    Without noise the free entropy of the recovered fixed point grows like
    c log(1/V) with c = (alpha pi * observed fraction - alpha * factor dof - pi * signal dof) / 2,
    so a positive slope means exact recovery dominates every finite-error fixed point.
    """
    model = model or build_model(problem)
    qx0, qf0, _ = _second_moments(model)
    coarse, fine = DIVERGENCE_STARTS
    phi = [replica_free_entropy(problem, qx0 * (1.0 - t), qf0 * (1.0 - t), model) for t in (coarse, fine)]
    return (phi[1] - phi[0]) / np.log(coarse / fine)


# ---------------------------------------------------------------------------
# Fixed-point selection
# ---------------------------------------------------------------------------

def mmse_select(problem: ProblemSpec, options: Optional[SeOptions] = None) -> MmseResult:
    """
    Run state evolution from both initializations and pick the dominant fixed point.

    AMP-MSE always comes from the uninformative run; the MMSE comes from the
    fixed point with the larger replica free entropy.
    """
    options = options or SeOptions()
    model = build_model(problem)
    runs = {}
    for init in (SeInit.UNINFORMATIVE, SeInit.INFORMATIVE):
        runs[init] = se_run(problem, options.model_copy(update={"init": init}), model, keep_trajectory=False)
    easy, planted = runs[SeInit.UNINFORMATIVE], runs[SeInit.INFORMATIVE]
    phi_easy = replica_free_entropy(problem, easy.fixed_point.m_x, easy.fixed_point.m_f, model)
    phi_planted = replica_free_entropy(problem, planted.fixed_point.m_x, planted.fixed_point.m_f, model)

    if easy.fixed_point.distance(planted.fixed_point) < settings.FIXED_POINT_MATCH_TOL:
        regime, best = Regime.UNIQUE, easy
    elif model.channel.min_noise() == 0.0 and planted.e_x < EXACT_RECOVERY_TOL * model.prior_x.second_moment():
        # phi of exact recovery diverges without noise; only the sign of its slope matters
        slope = recovery_divergence(problem, model)
        regime, best = (Regime.SPINODAL_HARD, planted) if slope > 0.0 else (Regime.SPINODAL_EASY, easy)
    elif phi_planted > phi_easy:
        regime, best = Regime.SPINODAL_HARD, planted
    else:
        regime, best = Regime.SPINODAL_EASY, easy
    logger.debug("mmse_select %s: regime=%s phi=(%.6g, %.6g)", problem.application.value, regime.value,
                 phi_easy, phi_planted)
    return MmseResult(
        mmse_x=best.e_x,
        mmse_f=best.e_f,
        amp_mse_x=easy.e_x,
        amp_mse_f=easy.e_f,
        regime=regime,
        phi_uninformative=phi_easy,
        phi_informative=phi_planted,
        converged=easy.converged and planted.converged,
    )
