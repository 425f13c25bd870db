"""
BiFAMP AMP Service
GAMP for bilinear inference: Onsager-corrected iteration, variance modes, schedules and MSE evaluation

Factor quantities r, s, Zvar, W are in scaled units sqrt(N) F. Time indices
follow the iteration exactly: omega^t uses g^{t-1}, a^{t-1}, r^{t-1}; the
windows (Sigma, T) and (Zvar, W) use g^t and the current estimates.
"""
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from bifamp.core.config import settings
from bifamp.core.errors import DivergenceError, InvalidArgumentError
from bifamp.schemas.problem import ProblemSpec
from bifamp.schemas.reports import MseReport
from bifamp.schemas.run import AmpOptions, InitMode, Schedule, VarianceMode
from bifamp.services.bethe import bethe_free_entropy
from bifamp.services.factory import Model, build_model
from bifamp.services.priors import Calibration

logger = logging.getLogger(__name__)

PLANTED_VARIANCE = 1e-8
FULL = slice(None)


@dataclass
class AmpState:
    """Per-element AMP quantities of one instance"""
    a: np.ndarray          # N x P
    c: np.ndarray          # N x P
    r: np.ndarray          # M x N
    s: np.ndarray          # M x N
    omega: np.ndarray      # M x P
    V: np.ndarray          # M x P
    Sigma: np.ndarray      # N x P
    T: np.ndarray          # N x P
    Zvar: np.ndarray       # M x N
    W: np.ndarray          # M x N
    g_prev: np.ndarray     # M x P
    a_prev: np.ndarray     # N x P
    r_prev: np.ndarray     # M x N
    iteration: int = 0
    factor_known: bool = False

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def copy(self) -> "AmpState":
        arrays = {f.name: getattr(self, f.name).copy() for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)}
        return replace(self, **arrays)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, f.name))) for f in fields(self)
                   if isinstance(getattr(self, f.name), np.ndarray))


@dataclass
class AmpDiagnostics:
    iteration: int
    mean_delta_a: float
    nishimori_dg: float        # mean of -dg_out
    nishimori_g2: float        # mean of g_out^2
    v_mean: float
    v_min: float
    v_max: float
    clamped: int = 0
    disputed_sigma: float = 0.0    # size of the s g^2 term in 1/Sigma
    disputed_z: float = 0.0        # size of the g^2 c term in 1/Zvar


@dataclass
class TraceRow:
    iteration: int
    mean_delta_a: Optional[float] = None
    m_x: Optional[float] = None
    m_f: Optional[float] = None
    mse_x: Optional[float] = None
    mse_f: Optional[float] = None
    mse_z: Optional[float] = None
    phi_bethe: Optional[float] = None
    nishimori_dg: Optional[float] = None
    nishimori_g2: Optional[float] = None


@dataclass
class AmpResult:
    state: AmpState
    converged: bool
    iterations: int
    trace: list[TraceRow] = field(default_factory=list)
    diagnostics: list[AmpDiagnostics] = field(default_factory=list)

    @property
    def clamped_total(self) -> int:
        return sum(d.clamped for d in self.diagnostics)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def _self_overlaps(state: AmpState):
    """(Q_x, q_x, Q_F, q_F) as empirical averages."""
    a2 = state.a ** 2
    r2 = state.r ** 2
    return (
        float(np.mean(a2 + state.c)),
        float(np.mean(a2)),
        float(np.mean(r2 + state.s)),
        float(np.mean(r2)),
    )


def _output_side(state: AmpState, Y, model: Model, mode: VarianceMode, rows=FULL, cols=FULL):
    """V, omega, g_out and dg_out on the block rows x cols."""
    n = state.n
    a, c = state.a[:, cols], state.c[:, cols]
    r, s = state.r[rows], state.s[rows]
    if mode in (VarianceMode.FULL_TAP, VarianceMode.FULL_TAP_GENERAL):
        Qx, qx, QF, qF = _self_overlaps(state)
        V = np.full((r.shape[0], a.shape[1]), QF * Qx - qF * qx)
        onsager = qF * Qx + qx * QF - 2.0 * qF * qx
    else:
        V = (s @ c + s @ a ** 2 + r ** 2 @ c) / n
        onsager = ((r * state.r_prev[rows]) @ c + s @ (a * state.a_prev[:, cols])) / n
    V = np.maximum(V, settings.VARIANCE_FLOOR)
    omega = r @ a / np.sqrt(n) - state.g_prev[rows, cols] * onsager

    channel = model.channel
    if rows != FULL or cols != FULL:
        channel = channel.element((rows, cols))
    y = Y[rows, cols]
    return V, omega, channel.g_out(omega, y, V), channel.dg_out(omega, y, V)


def _clamp(precision, mode: VarianceMode):
    bad = ~(precision > 0.0)
    count = int(np.count_nonzero(bad))
    if count and mode in (VarianceMode.GENERAL, VarianceMode.FULL_TAP_GENERAL):
        logger.warning("clamped %d negative precisions", count)
    return np.where(bad, settings.VARIANCE_FLOOR, precision), count


def _signal_windows(state: AmpState, g, dg, mode: VarianceMode, cols=FULL):
    """(Sigma, T) for the columns in `cols`, with clamped count and disputed-term size."""
    n = state.n
    r, s = state.r, state.s
    a, a_prev, g_prev = state.a[:, cols], state.a_prev[:, cols], state.g_prev[:, cols]
    ratio = r.shape[0] / n
    disputed = s.T @ g ** 2 / n

    if mode is VarianceMode.FULL_TAP or mode is VarianceMode.FULL_TAP_GENERAL:
        Qx, qx, QF, qF = _self_overlaps(state)
        chi, q_tilde = -float(np.mean(dg)), float(np.mean(g ** 2))
        field_term = r.T @ g / np.sqrt(n)
        if mode is VarianceMode.FULL_TAP:
            # chi = q_tilde on the Nishimori line
            precision, clamped = _clamp(np.full(a.shape, ratio * qF * q_tilde), mode)
            reaction = ratio * (qF - (QF - qF)) * q_tilde
            return 1.0 / precision, (field_term + reaction * a) / precision, clamped, float(np.mean(np.abs(disputed)))
        precision, clamped = _clamp(np.full(a.shape, ratio * (QF * chi - (QF - qF) * q_tilde)), mode)
        reaction = ratio * (qF * chi - (QF - qF) * q_tilde)
        return 1.0 / precision, (field_term + reaction * a) / precision, clamped, float(np.mean(np.abs(disputed)))

    r2_dg = (r ** 2).T @ dg / n
    if mode is VarianceMode.NISHIMORI:
        precision = -r2_dg
    else:
        precision = s.T @ (-dg) / n - r2_dg - disputed
    precision, clamped = _clamp(precision, mode)
    field_term = r.T @ g / np.sqrt(n) - a * r2_dg - a_prev * (s.T @ (g * g_prev)) / n
    return 1.0 / precision, field_term / precision, clamped, float(np.mean(np.abs(disputed)))


def _factor_windows(state: AmpState, g, dg, mode: VarianceMode, rows=FULL):
    """(Zvar, W) for the rows in `rows`."""
    n = state.n
    a, c = state.a, state.c
    r, r_prev, g_prev = state.r[rows], state.r_prev[rows], state.g_prev[rows]
    ratio = a.shape[1] / n
    disputed = g ** 2 @ c.T / n

    if mode is VarianceMode.FULL_TAP or mode is VarianceMode.FULL_TAP_GENERAL:
        Qx, qx, QF, qF = _self_overlaps(state)
        chi, q_tilde = -float(np.mean(dg)), float(np.mean(g ** 2))
        field_term = g @ a.T / np.sqrt(n)
        if mode is VarianceMode.FULL_TAP:
            precision, clamped = _clamp(np.full(r.shape, ratio * qx * q_tilde), mode)
            reaction = ratio * (qx - (Qx - qx)) * q_tilde
            return 1.0 / precision, (field_term + reaction * r) / precision, clamped, float(np.mean(np.abs(disputed)))
        precision, clamped = _clamp(np.full(r.shape, ratio * (Qx * chi - (Qx - qx) * q_tilde)), mode)
        reaction = ratio * (qx * chi - (Qx - qx) * q_tilde)
        return 1.0 / precision, (field_term + reaction * r) / precision, clamped, float(np.mean(np.abs(disputed)))

    dg_a2 = dg @ (a ** 2).T / n
    if mode is VarianceMode.NISHIMORI:
        precision = -dg_a2
    else:
        precision = (-dg) @ c.T / n - dg_a2 - disputed
    precision, clamped = _clamp(precision, mode)
    field_term = g @ a.T / np.sqrt(n) - r * dg_a2 - r_prev * ((g * g_prev) @ c.T) / n
    return 1.0 / precision, field_term / precision, clamped, float(np.mean(np.abs(disputed)))


def _damp(proposed, old, beta: float):
    return beta * proposed + (1.0 - beta) * old


def _blocks(size: int, count: int) -> list[slice]:
    edges = np.linspace(0, size, min(count, size) + 1).round().astype(int)
    return [slice(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def _check_dims(problem: ProblemSpec, Y, n: int) -> None:
    m, p = problem.dims(n)
    if Y.ndim != 2 or Y.shape != (m, p):
        raise InvalidArgumentError(f"Y has shape {Y.shape}, expected {(m, p)} for N={n}")


def amp_init(
    problem: ProblemSpec,
    Y: np.ndarray,
    options: AmpOptions,
    rng: np.random.Generator,
    n: int,
    model: Optional[Model] = None,
    truth: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> AmpState:
    """
    Initial AMP state.

    Args:
        problem: experiment description
        Y: M x P observations
        options: AMP options (init mode)
        rng: generator for the random initialization
        n: latent dimension N
        model: priors and channel; built from `problem` when omitted
        truth: (scaled F0, X0), required for planted init

    Returns:
        AmpState with omega, V computed as if a^{-1} = r^{-1} = 0
    """
    _check_dims(problem, Y, n)
    model = model or build_model(problem)
    m, p = Y.shape
    prior_x, prior_f = model.prior_x, model.prior_f

    if options.init is InitMode.PLANTED:
        if truth is None:
            raise InvalidArgumentError("planted init needs the ground truth")
        r, a = np.array(truth[0], dtype=float), np.array(truth[1], dtype=float)
        c = np.full((n, p), PLANTED_VARIANCE)
        s = np.full((m, n), PLANTED_VARIANCE)
    else:
        a = np.asarray(prior_x.sample(rng, (n, p)), dtype=float)
        c = np.full((n, p), max(prior_x.variance(), settings.VARIANCE_FLOOR))
        if options.init is InitMode.CS:
            if truth is not None:
                r = np.array(truth[0], dtype=float)
            elif isinstance(prior_f, Calibration) and prior_f.eta == 0.0:
                r = np.array(np.broadcast_to(prior_f.center, (m, n)), dtype=float)
            else:
                raise InvalidArgumentError("cs init needs the known factor")
            s = np.zeros((m, n))
        else:
            r = np.asarray(prior_f.sample(rng, (m, n)), dtype=float)
            s = np.full((m, n), max(prior_f.variance(), settings.VARIANCE_FLOOR))

    state = AmpState(
        a=a, c=c, r=r, s=s,
        omega=np.zeros((m, p)), V=np.ones((m, p)),
        Sigma=np.ones((n, p)), T=a.copy(),
        Zvar=np.ones((m, n)), W=r.copy(),
        g_prev=np.zeros((m, p)), a_prev=np.zeros((n, p)), r_prev=np.zeros((m, n)),
        factor_known=options.init is InitMode.CS,
    )
    state.V, state.omega, _, _ = _output_side(state, Y, model, options.variance_mode)
    return state


def _parallel_sweep(state: AmpState, Y, model: Model, options: AmpOptions):
    mode, beta = options.variance_mode, options.damping
    V, omega, g, dg = _output_side(state, Y, model, mode)
    Sigma, T, clamped, disputed_sigma = _signal_windows(state, g, dg, mode)
    new = state.copy()
    new.V, new.omega, new.Sigma, new.T = V, omega, Sigma, T
    disputed_z = 0.0
    if not state.factor_known:
        Zvar, W, clamped_f, disputed_z = _factor_windows(state, g, dg, mode)
        r_hat, s_hat = model.prior_f.moments(Zvar, W)
        new.Zvar, new.W = Zvar, W
        new.r, new.s = _damp(r_hat, state.r, beta), _damp(s_hat, state.s, beta)
        new.r_prev = state.r
        clamped += clamped_f
    a_hat, c_hat = model.prior_x.moments(Sigma, T)
    new.a, new.c = _damp(a_hat, state.a, beta), _damp(c_hat, state.c, beta)
    new.a_prev, new.g_prev = state.a, g
    return new, g, dg, clamped, disputed_sigma, disputed_z


def _block_sweep(state: AmpState, Y, model: Model, options: AmpOptions, rng: np.random.Generator):
    """Signal-side column blocks in random order, then factor-side row blocks."""
    mode, beta = options.variance_mode, options.damping
    new = state.copy()
    m, p = Y.shape
    g_all, dg_all = np.empty((m, p)), np.empty((m, p))
    clamped, disputed_sigma, disputed_z = 0, 0.0, 0.0

    col_blocks = _blocks(p, options.blocks)
    for k in rng.permutation(len(col_blocks)):
        cols = col_blocks[k]
        V, omega, g, dg = _output_side(new, Y, model, mode, FULL, cols)
        Sigma, T, count, disputed = _signal_windows(new, g, dg, mode, cols)
        a_hat, c_hat = model.prior_x.moments(Sigma, T)
        new.a_prev[:, cols] = new.a[:, cols]
        new.a[:, cols] = _damp(a_hat, new.a[:, cols], beta)
        new.c[:, cols] = _damp(c_hat, new.c[:, cols], beta)
        new.Sigma[:, cols], new.T[:, cols] = Sigma, T
        new.V[:, cols], new.omega[:, cols], new.g_prev[:, cols] = V, omega, g
        g_all[:, cols], dg_all[:, cols] = g, dg
        clamped += count
        disputed_sigma = max(disputed_sigma, disputed)

    if not state.factor_known:
        row_blocks = _blocks(m, options.blocks)
        for k in rng.permutation(len(row_blocks)):
            rows = row_blocks[k]
            V, omega, g, dg = _output_side(new, Y, model, mode, rows, FULL)
            Zvar, W, count, disputed = _factor_windows(new, g, dg, mode, rows)
            r_hat, s_hat = model.prior_f.restrict(rows).moments(Zvar, W)
            new.r_prev[rows] = new.r[rows]
            new.r[rows] = _damp(r_hat, new.r[rows], beta)
            new.s[rows] = _damp(s_hat, new.s[rows], beta)
            new.Zvar[rows], new.W[rows] = Zvar, W
            new.V[rows], new.omega[rows], new.g_prev[rows] = V, omega, g
            clamped += count
            disputed_z = max(disputed_z, disputed)
    return new, g_all, dg_all, clamped, disputed_sigma, disputed_z


def amp_iterate(
    state: AmpState,
    Y: np.ndarray,
    model: Model,
    options: AmpOptions,
    rng: Optional[np.random.Generator] = None,
) -> tuple[AmpState, AmpDiagnostics]:
    """
    One full sweep.

    Damping x <- beta x_proposed + (1 - beta) x_old acts on a, c, r, s only.
    Raises DivergenceError carrying the iteration index on NaN or Inf.
    """
    if options.schedule is Schedule.BLOCK_SEQUENTIAL:
        if rng is None:
            raise InvalidArgumentError("block-sequential schedule needs a generator")
        new, g, dg, clamped, d_sigma, d_z = _block_sweep(state, Y, model, options, rng)
    else:
        new, g, dg, clamped, d_sigma, d_z = _parallel_sweep(state, Y, model, options)
    new.iteration = state.iteration + 1

    if not new.is_finite():
        raise DivergenceError(f"AMP diverged at iteration {new.iteration}", iteration=new.iteration)

    diagnostics = AmpDiagnostics(
        iteration=new.iteration,
        mean_delta_a=float(np.mean(np.abs(new.a - state.a))),
        nishimori_dg=-float(np.mean(dg)),
        nishimori_g2=float(np.mean(g ** 2)),
        v_mean=float(np.mean(new.V)),
        v_min=float(np.min(new.V)),
        v_max=float(np.max(new.V)),
        clamped=clamped,
        disputed_sigma=d_sigma,
        disputed_z=d_z,
    )
    return new, diagnostics


def _trace_row(state: AmpState, Y, model: Model, truth, diagnostics: Optional[AmpDiagnostics],
               track_free_entropy: bool) -> TraceRow:
    row = TraceRow(iteration=state.iteration)
    if diagnostics is not None:
        row.mean_delta_a = diagnostics.mean_delta_a
        row.nishimori_dg = diagnostics.nishimori_dg
        row.nishimori_g2 = diagnostics.nishimori_g2
    if truth is not None:
        F0, X0 = truth
        n = state.n
        row.m_x = float(np.mean(state.a * X0))
        row.m_f = float(np.mean(state.r * F0))
        row.mse_x = float(np.mean((state.a - X0) ** 2))
        row.mse_f = float(np.mean((state.r - F0) ** 2))
        row.mse_z = float(np.mean((state.r @ state.a - F0 @ X0) ** 2) / n)
    if track_free_entropy:
        row.phi_bethe = bethe_free_entropy(state, Y, model.prior_x, model.prior_f, model.channel) / state.n ** 2
    return row


def amp_run(
    problem: ProblemSpec,
    Y: np.ndarray,
    options: AmpOptions,
    rng: np.random.Generator,
    n: int,
    model: Optional[Model] = None,
    truth: Optional[tuple[np.ndarray, np.ndarray]] = None,
    track_free_entropy: bool = True,
) -> AmpResult:
    """
    Iterate AMP until mean |da| < tolerance or max_iterations.

    When `truth` = (scaled F0, X0) is given the trace records
    m_x = mean(a x0) and m_F = mean(r r0) at every iteration.
    """
    model = model or build_model(problem)
    state = amp_init(problem, Y, options, rng, n, model, truth)
    result = AmpResult(state=state, converged=False, iterations=0)
    result.trace.append(_trace_row(state, Y, model, truth, None, track_free_entropy))
    logger.info("AMP start: %s N=%d mode=%s schedule=%s init=%s", problem.application.value, n,
                options.variance_mode.value, options.schedule.value, options.init.value)

    for _ in range(options.max_iterations):
        state, diagnostics = amp_iterate(state, Y, model, options, rng)
        result.diagnostics.append(diagnostics)
        result.trace.append(_trace_row(state, Y, model, truth, diagnostics, track_free_entropy))
        logger.debug(
            "iteration %d: mean|da|=%.3e nishimori=(%.4g, %.4g) V=%.3e clamped=%d",
            state.iteration, diagnostics.mean_delta_a, diagnostics.nishimori_dg,
            diagnostics.nishimori_g2, diagnostics.v_mean, diagnostics.clamped,
        )
        if diagnostics.mean_delta_a < options.tolerance:
            result.converged = True
            break

    result.state, result.iterations = state, state.iteration
    if result.converged:
        logger.info("AMP converged after %d iterations", result.iterations)
    else:
        logger.warning("AMP stopped unconverged after %d iterations", result.iterations)
    return result


# ---------------------------------------------------------------------------
# MSE with gauge alignment
# ---------------------------------------------------------------------------

def _cosines(estimate, truth, axis: int):
    """|i> x |j> normalized inner products between components along `axis`."""
    est = estimate if axis == 0 else estimate.T
    ref = truth if axis == 0 else truth.T
    norms = np.outer(np.linalg.norm(est, axis=1), np.linalg.norm(ref, axis=1))
    return est @ ref.T / np.where(norms > 0.0, norms, 1.0)


def greedy_alignment(correlation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Pair estimated with true components by repeatedly taking the largest |entry|.

    Returns:
        (permutation, signs) with permutation[j] the estimated component
        matched to true component j.
    """
    work = np.abs(correlation).astype(float)
    size = work.shape[0]
    permutation = np.zeros(size, dtype=int)
    signs = np.ones(size, dtype=int)
    for _ in range(size):
        i, j = np.unravel_index(np.argmax(work), work.shape)
        permutation[j] = i
        signs[j] = -1 if correlation[i, j] < 0 else 1
        work[i, :] = -1.0
        work[:, j] = -1.0
    return permutation, signs


def evaluate_mse(a: np.ndarray, r: np.ndarray, X0: np.ndarray, F0: np.ndarray) -> MseReport:
    """
    MSE of Z (gauge free) and of X, F after permutation and sign alignment.

    All factor arrays are in scaled units.
    """
    if a.shape != X0.shape or r.shape != F0.shape:
        raise InvalidArgumentError("estimate and truth shapes differ")
    n = a.shape[0]
    mse_z = float(np.mean((r @ a - F0 @ X0) ** 2) / n)
    correlation = _cosines(a, X0, axis=0) + _cosines(r, F0, axis=1)
    permutation, signs = greedy_alignment(correlation)
    a_aligned = signs[:, None] * a[permutation]
    r_aligned = r[:, permutation] * signs[None, :]
    return MseReport(
        mse_z=mse_z,
        mse_x_aligned=float(np.mean((a_aligned - X0) ** 2)),
        mse_f_aligned=float(np.mean((r_aligned - F0) ** 2)),
        permutation=permutation.tolist(),
        signs=signs.tolist(),
    )
