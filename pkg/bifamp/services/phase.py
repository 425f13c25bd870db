"""
BiFAMP Phase Service
Counting bounds, stability thresholds, numeric spinodals and first-order
transitions, and parameter-grid sweeps

Every threshold is reported along one axis of the problem (pi, alpha, rho or
eps). Numeric searches bisect a boolean indicator built from state-evolution
runs; independent evaluations go to a process pool when more than one worker is
available, and results are assembled in input order.
"""
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from bifamp.core.config import settings
from bifamp.core.errors import BifampError, BracketError
from bifamp.schemas.problem import SWEEP_AXES, Application, ProblemSpec
from bifamp.schemas.reports import GridRow, Regime, Threshold, ThresholdMethod, ThresholdReport
from bifamp.schemas.run import SeInit, SeOptions
from bifamp.services.channels import TwoGaussianMixture
from bifamp.services.factory import Model, build_model
from bifamp.services.state_evolution import SeState, errors_of, initial_state, mmse_select, se_step

logger = logging.getLogger(__name__)

JACOBIAN_STEP = 1e-6
JACOBIAN_MATCH_TOL = 1e-3
DRIFT_WINDOW = 1000
SCAN_POINTS = 9

# Axis each application's counting bound and stability thresholds are solved for
NATURAL_AXIS = {
    Application.DICTIONARY: "pi",
    Application.CALIBRATION: "pi",
    Application.SPARSE_PCA: "pi",
    Application.BLIND_SOURCE_SEPARATION: "rho",
    Application.CS: "rho",
    Application.COMPLETION: "eps",
    Application.ROBUST_PCA: "eps",
    Application.FACTOR_ANALYSIS: "pi",
}


def _threshold(name: str, axis: str, value: Optional[float], method: ThresholdMethod = ThresholdMethod.CLOSED_FORM,
               bracket_width: Optional[float] = None, note: Optional[str] = None) -> Threshold:
    if value is not None and not math.isfinite(value):
        value, note = None, note or "infinite"
    return Threshold(name=name, axis=axis, value=value, method=method, bracket_width=bracket_width, note=note)


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def counting_bound(problem: ProblemSpec) -> Threshold:
    """
    Dimension counting for noiseless recovery, solved on the application's axis.

    Dictionary-like problems need alpha pi >= alpha + rho pi; completion and
    robust PCA need eps alpha pi >= alpha + pi; with F known (cs) rho < alpha.
    """
    app, alpha, pi, rho = problem.application, problem.alpha, problem.pi, problem.rho
    axis = NATURAL_AXIS[app]
    if app is Application.CS:
        return _threshold("counting_bound", axis, alpha, note="F known: rho < alpha")
    if app in (Application.DICTIONARY, Application.CALIBRATION, Application.SPARSE_PCA):
        if alpha <= rho:
            return _threshold("counting_bound", axis, None, note="alpha <= rho: no finite pi suffices")
        return _threshold("counting_bound", axis, alpha / (alpha - rho))
    if app is Application.BLIND_SOURCE_SEPARATION:
        return _threshold("counting_bound", axis, alpha * (pi - 1.0) / pi, note="rho below this value")
    if app in (Application.COMPLETION, Application.ROBUST_PCA):
        return _threshold("counting_bound", axis, (alpha + pi) / (alpha * pi))
    return _threshold("counting_bound", axis, None, note="no counting bound with dense unique factors")


def counting_bound_on(problem: ProblemSpec, axis: str) -> Optional[float]:
    """The relation alpha pi >= alpha + rho pi solved for pi, alpha or rho."""
    alpha, pi, rho = problem.alpha, problem.pi, problem.rho
    if axis == "pi":
        return alpha / (alpha - rho) if alpha > rho else None
    if axis == "alpha":
        return rho * pi / (pi - 1.0) if pi > 1.0 else None
    if axis == "rho":
        return alpha * (pi - 1.0) / pi
    raise ValueError(f"the counting relation has no {axis!r} form")


def _zero_mean(model: Model) -> bool:
    return model.prior_x.initial_overlap() == 0.0 and model.prior_f.initial_overlap() == 0.0


def _linear_gain(model: Model) -> float:
    """Qx0^2 QF0^2: slope of overlap_X times that of overlap_F at zero field."""
    return (model.prior_x.second_moment() * model.prior_f.second_moment()) ** 2


def informative_stability(problem: ProblemSpec) -> Threshold:
    """Edge of stability of the perfect-recovery fixed point at zero noise."""
    app, alpha, pi = problem.application, problem.alpha, problem.pi
    axis = NATURAL_AXIS[app]
    if app is Application.FACTOR_ANALYSIS:
        if pi <= 1.0:
            return _threshold("informative_stability", "eps", None, note="pi <= 1")
        return _threshold("informative_stability", "eps", pi / (alpha * (pi - 1.0)),
                          note="fraction of rows whose psi vanishes")
    if app is Application.ROBUST_PCA and problem.delta_s > 0.0:
        return _threshold("informative_stability", axis, None, note="no exact recovery with delta_s > 0")
    if app is not Application.ROBUST_PCA and problem.delta > 0.0:
        return _threshold("informative_stability", axis, None, note="no exact recovery with delta > 0")
    bound = counting_bound(problem)
    return bound.model_copy(update={"name": "informative_stability"})


def uninformative_stability(problem: ProblemSpec, model: Optional[Model] = None) -> Threshold:
    """
    Instability of the zero-overlap fixed point.

    Linearizing se_step around m = 0 gives a loop gain
    alpha pi Qx0^2 QF0^2 sum_k w_k mhat_k(Qz)^2; the threshold is where it
    reaches one, solved on the application's axis.
    """
    model = model or build_model(problem)
    app, alpha, pi = problem.application, problem.alpha, problem.pi
    axis = NATURAL_AXIS[app]
    if not _zero_mean(model):
        return _threshold("uninformative_stability", axis, None,
                          note="the uninformative fixed point carries a nonzero overlap")
    gain = _linear_gain(model)
    qz = model.prior_x.second_moment() * model.prior_f.second_moment()

    if app in (Application.DICTIONARY, Application.CALIBRATION, Application.SPARSE_PCA):
        return _threshold("uninformative_stability", axis, (problem.delta + qz) ** 2 / (alpha * gain))
    if app is Application.BLIND_SOURCE_SEPARATION:
        # gain alpha pi (rho s)^2 / (delta + rho s)^2 = 1 solved for rho
        s = problem.x_var
        root = math.sqrt(alpha * pi)
        if root <= 1.0:
            return _threshold("uninformative_stability", axis, None, note="stable for every rho")
        return _threshold("uninformative_stability", axis, problem.delta / (s * (root - 1.0)),
                          note="unstable for rho above this value")
    if app is Application.COMPLETION:
        return _threshold("uninformative_stability", axis, (problem.delta + qz) / math.sqrt(alpha * pi * gain),
                          note="stable for eps below this value")
    if app is Application.FACTOR_ANALYSIS:
        total = sum(w * ch.mhat(qz, problem.quadrature_order) ** 2 for w, ch in model.channel.classes())
        return _threshold("uninformative_stability", axis, 1.0 / (alpha * gain * total))
    if app is Application.ROBUST_PCA:
        def loop(eps):
            channel = TwoGaussianMixture(eps=eps, delta_s=problem.delta_s, delta_l=problem.delta_l)
            return alpha * pi * gain * channel.mhat(qz, problem.quadrature_order) ** 2 - 1.0

        lo, hi = loop(0.0), loop(1.0)
        if lo * hi > 0.0:
            note = "unstable for every eps" if lo > 0.0 else "stable for every eps"
            return _threshold("uninformative_stability", axis, None, note=note)
        return _threshold("uninformative_stability", axis, optimize.brentq(loop, 0.0, 1.0, xtol=1e-12),
                          note="stable for eps below this value")
    return _threshold("uninformative_stability", axis, None, note="the zero-overlap state is not a fixed point")


# ---------------------------------------------------------------------------
# Numeric linearization
# ---------------------------------------------------------------------------

def _pack(state: SeState) -> np.ndarray:
    return np.concatenate([[state.m_x], np.atleast_1d(state.m_f)])


def _unpack(vector: np.ndarray) -> SeState:
    return SeState(float(vector[0]), np.array(vector[1:], dtype=float))


def linearization(problem: ProblemSpec, state: SeState, model: Optional[Model] = None,
                  step: float = JACOBIAN_STEP) -> np.ndarray:
    """
    Finite-difference Jacobian of se_step at `state` in (m_x, m_F_1..K).

    Central differences, one-sided where a coordinate would go negative.
    """
    model = model or build_model(problem)
    point = _pack(state)
    size = point.size
    jacobian = np.zeros((size, size))
    for j in range(size):
        up, down = point.copy(), point.copy()
        up[j] += step
        if point[j] - step >= 0.0:
            down[j] -= step
            width = 2.0 * step
        else:
            width = step
        f_up = _pack(se_step(problem, _unpack(up), model=model))
        f_down = _pack(se_step(problem, _unpack(down), model=model))
        jacobian[:, j] = (f_up - f_down) / width
    return jacobian


def spectral_radius(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(matrix))))


def zero_state(model: Model) -> SeState:
    return SeState(0.0, np.zeros(len(model.channel.classes())))


def jacobian_crossing(problem: ProblemSpec, axis: str, guess: float) -> Threshold:
    """
    Value along `axis` where the spectral radius at the zero-overlap fixed
    point crosses one, searched around `guess`.
    """
    upper = 1.0 if axis in ("eps", "rho") else math.inf

    def excess(value: float) -> float:
        shifted = problem.with_value(axis, value)
        model = build_model(shifted)
        return spectral_radius(linearization(shifted, zero_state(model), model)) - 1.0

    lo, hi = 0.5 * guess, min(2.0 * guess, upper)
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo * f_hi > 0.0:
        return _threshold("jacobian_crossing", axis, None, method=ThresholdMethod.JACOBIAN,
                          note=f"no crossing in [{lo:.4g}, {hi:.4g}]")
    value = optimize.brentq(excess, lo, hi, xtol=1e-9)
    return _threshold("jacobian_crossing", axis, value, method=ThresholdMethod.JACOBIAN)


def _unstable_at(problem: ProblemSpec) -> bool:
    model = build_model(problem)
    return spectral_radius(linearization(problem, zero_state(model), model)) > 1.0


def find_instability(problem: ProblemSpec, axis: str, bracket: tuple[float, float],
                     tolerance: Optional[float] = None, workers: Optional[int] = None) -> Threshold:
    """Bisection on "the zero-overlap fixed point of se_step is linearly unstable"."""
    tolerance = tolerance or settings.BISECTION_TOL
    workers = settings.worker_count(workers) if workers is None else workers

    def evaluate_many(values: list[float]) -> list[bool]:
        return _map(_unstable_at, [problem.with_value(axis, v) for v in values], workers)

    lo, hi, _ = _search(evaluate_many, bracket, tolerance, workers)
    return _threshold("instability", axis, 0.5 * (lo + hi), method=ThresholdMethod.BISECTION, bracket_width=hi - lo)


def stability_thresholds(problem: ProblemSpec) -> ThresholdReport:
    """Closed-form part of the threshold report, cross-checked by the numeric Jacobian."""
    model = build_model(problem)
    report = ThresholdReport(
        problem=problem,
        counting_bound=counting_bound(problem),
        informative_stability=informative_stability(problem),
        uninformative_stability=uninformative_stability(problem, model),
    )
    closed = report.uninformative_stability
    if closed.value is not None and _zero_mean(model):
        check = jacobian_crossing(problem, closed.axis, closed.value)
        report.jacobian_checks.append(check)
        if check.value is None or abs(check.value - closed.value) > JACOBIAN_MATCH_TOL:
            logger.warning("Jacobian crossing %s disagrees with the closed form %.6g", check.value, closed.value)
    return report


# ---------------------------------------------------------------------------
# Bisection indicators
# ---------------------------------------------------------------------------

def _noise_level(problem: ProblemSpec) -> float:
    if problem.application is Application.ROBUST_PCA:
        return problem.delta_s
    if problem.application is Application.FACTOR_ANALYSIS:
        return min(problem.psi)
    return problem.delta


def recovery_threshold(problem: ProblemSpec, model: Optional[Model] = None) -> float:
    """E_X below which a fixed point counts as recovered: max(1e-4, 10 noise Qx0)."""
    model = model or build_model(problem)
    return max(1e-4, 10.0 * _noise_level(problem) * model.prior_x.second_moment())


def recovers(problem: ProblemSpec, init: SeInit = SeInit.UNINFORMATIVE,
             max_iterations: Optional[int] = None, tolerance: Optional[float] = None) -> bool:
    """
    Whether state evolution from `init` ends in the recovered phase.

    Uninformative runs stop as soon as E_X drops below the recovery
    threshold; informative runs stop as soon as it rises above. Runs that
    hit the cap are classified by the late-stage drift of the m_x
    increments: growing increments mean the plateau is being left.
    """
    model = build_model(problem)
    threshold = recovery_threshold(problem, model)
    max_iterations = max_iterations or settings.SPINODAL_MAX_ITERATIONS
    tolerance = tolerance or settings.SE_TOLERANCE
    state = initial_state(problem, SeOptions(init=init), model)
    increments = []
    for _ in range(max_iterations):
        new = se_step(problem, state, model=model)
        e_x, _ = errors_of(model, new)
        if init is SeInit.UNINFORMATIVE and e_x < threshold:
            return True
        if init is SeInit.INFORMATIVE and e_x > threshold:
            return False
        if new.distance(state) < tolerance:
            return e_x < threshold
        increments.append(new.m_x - state.m_x)
        if len(increments) > 2 * DRIFT_WINDOW:
            del increments[:DRIFT_WINDOW]
        state = new
    logger.warning("recovery check unconverged after %d iterations, classifying by drift", max_iterations)
    late = np.mean(increments[-DRIFT_WINDOW // 10:])
    early = np.mean(increments[: DRIFT_WINDOW // 10])
    if init is SeInit.UNINFORMATIVE:
        return bool(late > early)
    return bool(late >= early)


def _recovers_at(args) -> bool:
    problem, init = args
    return recovers(problem, init)


def _dominant_recovered_at(args) -> tuple[bool, Regime]:
    problem, options = args
    result = mmse_select(problem, options)
    threshold = recovery_threshold(problem)
    if result.regime is Regime.SPINODAL_HARD:
        return True, result.regime
    return bool(result.regime is Regime.UNIQUE and result.mmse_x < threshold), result.regime


def _map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def _search(evaluate_many: Callable[[list[float]], list[bool]],
            bracket: tuple[float, float], tolerance: float, workers: int):
    """
    Shrink `bracket` around the change of a boolean indicator.

    With one worker this is plain bisection; with k workers each round
    evaluates k interior points and keeps the sub-interval where the value
    flips.
    """
    lo, hi = bracket
    f_lo, f_hi = evaluate_many([lo, hi])
    if f_lo == f_hi:
        raise BracketError(f"indicator is {f_lo} at both ends of [{lo:.6g}, {hi:.6g}]")
    points = max(1, workers)
    while hi - lo > tolerance:
        interior = list(np.linspace(lo, hi, points + 2)[1:-1])
        values = evaluate_many(interior)
        grid = [lo] + interior + [hi]
        flags = [f_lo] + values + [f_hi]
        for k in range(len(grid) - 1):
            if flags[k] != flags[k + 1]:
                lo, hi, f_lo, f_hi = grid[k], grid[k + 1], flags[k], flags[k + 1]
                break
        logger.info("bracket [%.6g, %.6g]", lo, hi)
    return lo, hi, f_lo


def find_recovery_edge(
    problem: ProblemSpec,
    axis: str,
    bracket: tuple[float, float],
    init: SeInit = SeInit.UNINFORMATIVE,
    tolerance: Optional[float] = None,
    workers: Optional[int] = None,
) -> Threshold:
    """Boundary of the phase where state evolution from `init` recovers the signal."""
    tolerance = tolerance or settings.BISECTION_TOL
    workers = settings.worker_count(workers) if workers is None else workers

    def evaluate_many(values: list[float]) -> list[bool]:
        return _map(_recovers_at, [(problem.with_value(axis, v), init) for v in values], workers)

    lo, hi, _ = _search(evaluate_many, bracket, tolerance, workers)
    name = "spinodal" if init is SeInit.UNINFORMATIVE else "informative_edge"
    return _threshold(name, axis, 0.5 * (lo + hi), method=ThresholdMethod.BISECTION, bracket_width=hi - lo)


def find_spinodal(problem: ProblemSpec, axis: str, bracket: tuple[float, float],
                  tolerance: Optional[float] = None, workers: Optional[int] = None) -> Threshold:
    """
    Bisection on "uninformative state evolution reaches E_X below the
    recovery threshold". BracketError when both ends agree.
    """
    return find_recovery_edge(problem, axis, bracket, SeInit.UNINFORMATIVE, tolerance, workers)


def find_first_order(
    problem: ProblemSpec,
    axis: str,
    bracket: tuple[float, float],
    tolerance: Optional[float] = None,
    workers: Optional[int] = None,
    options: Optional[SeOptions] = None,
) -> Threshold:
    """
    Point where the low-error fixed point starts to dominate.

    A coarse scan first checks that two distinct fixed points exist
    somewhere in the bracket; if every scan point has a single fixed point the
    result says so with value None. Otherwise bisection on "the recovered
    fixed point is the one selected by the replica free entropy".
    """
    tolerance = tolerance or settings.BISECTION_TOL
    workers = settings.worker_count(workers) if workers is None else workers
    options = options or SeOptions(check_quadrature=False)

    scan = list(np.linspace(bracket[0], bracket[1], SCAN_POINTS))
    results = _map(_dominant_recovered_at, [(problem.with_value(axis, v), options) for v in scan], workers)
    if all(regime is Regime.UNIQUE for _, regime in results):
        return _threshold("first_order", axis, None, method=ThresholdMethod.BISECTION,
                          note="no transition: a single fixed point throughout the bracket")

    def evaluate_many(values: list[float]) -> list[bool]:
        outcomes = _map(_dominant_recovered_at, [(problem.with_value(axis, v), options) for v in values], workers)
        return [flag for flag, _ in outcomes]

    flags = [flag for flag, _ in results]
    lo, hi = bracket
    for k in range(len(scan) - 1):
        if flags[k] != flags[k + 1]:
            lo, hi = scan[k], scan[k + 1]
            break
    else:
        raise BracketError("the dominant fixed point does not change across the bracket")
    lo, hi, _ = _search(evaluate_many, (lo, hi), tolerance, workers)
    return _threshold("first_order", axis, 0.5 * (lo + hi), method=ThresholdMethod.BISECTION, bracket_width=hi - lo)


def default_bracket(report: ThresholdReport) -> Optional[tuple[float, float]]:
    """Search bracket on the natural axis spanned by the closed-form thresholds."""
    problem = report.problem
    axis = NATURAL_AXIS[problem.application]
    if problem.application is Application.CS:
        return 0.05 * problem.alpha, 0.999 * problem.alpha
    lower = report.counting_bound.value if report.counting_bound else None
    upper = report.uninformative_stability.value if report.uninformative_stability else None
    if lower is None or upper is None or axis not in ("pi", "eps"):
        return None
    lo, hi = 0.9 * min(lower, upper), 1.05 * max(lower, upper)
    if axis == "eps":
        hi = min(hi, 1.0)
    return (lo, hi) if lo < hi else None


def threshold_report(problem: ProblemSpec, axis: Optional[str] = None,
                     bracket: Optional[tuple[float, float]] = None, tolerance: Optional[float] = None,
                     workers: Optional[int] = None) -> ThresholdReport:
    """Closed forms plus the numeric spinodal and first-order transition when a bracket is known."""
    report = stability_thresholds(problem)
    axis = axis or NATURAL_AXIS[problem.application]
    bracket = bracket or (default_bracket(report) if axis == NATURAL_AXIS[problem.application] else None)
    if bracket is None:
        logger.info("no search bracket for %s along %s; numeric thresholds skipped", problem.application.value, axis)
        return report
    if _zero_mean(build_model(problem)):
        try:
            report.instability = find_instability(problem, axis, bracket, tolerance, workers)
        except BracketError as exc:
            report.instability = _threshold("instability", axis, None, ThresholdMethod.BISECTION, note=str(exc))
    try:
        report.spinodal = find_spinodal(problem, axis, bracket, tolerance, workers)
    except BracketError as exc:
        report.spinodal = _threshold("spinodal", axis, None, ThresholdMethod.BISECTION, note=str(exc))
    try:
        report.first_order = find_first_order(problem, axis, bracket, tolerance, workers)
    except BracketError as exc:
        report.first_order = _threshold("first_order", axis, None, ThresholdMethod.BISECTION, note=str(exc))
    if not report.ordering_holds():
        logger.warning("threshold ordering violated: %s", report.model_dump(include={"counting_bound", "first_order", "spinodal"}))
    return report


# ---------------------------------------------------------------------------
# Grid sweeps
# ---------------------------------------------------------------------------

def _grid_point(args) -> GridRow:
    problem, params, options = args
    try:
        for axis, value in params.items():
            problem = problem.with_value(axis, value)
        result = mmse_select(problem, options)
    except (BifampError, ValueError) as exc:
        logger.warning("grid point %s failed: %s", params, exc)
        return GridRow(params=params, error=f"{type(exc).__name__}: {exc}")
    return GridRow(
        params=params,
        mmse_x=result.mmse_x,
        mmse_f=result.mmse_f,
        amp_mse_x=result.amp_mse_x,
        amp_mse_f=result.amp_mse_f,
        regime=result.regime,
        converged=result.converged,
    )


def grid_points(grid: dict[str, list[float]]) -> list[dict[str, float]]:
    """Cartesian product in lexicographic order: axes in canonical order, values ascending."""
    axes = [axis for axis in SWEEP_AXES if axis in grid]
    unknown = set(grid) - set(axes)
    if unknown:
        raise ValueError(f"unknown sweep axes: {sorted(unknown)}")
    values = [sorted(grid[axis]) for axis in axes]
    return [dict(zip(axes, combo)) for combo in itertools.product(*values)]


def sweep_grid(problem: ProblemSpec, grid: dict[str, list[float]], options: Optional[SeOptions] = None,
               workers: Optional[int] = None) -> list[GridRow]:
    """One mmse_select per grid point; failures are recorded in their row."""
    options = options or SeOptions(check_quadrature=False)
    workers = settings.worker_count(workers) if workers is None else workers
    points = grid_points(grid) if grid else [{}]
    logger.info("sweeping %d grid points on %d workers", len(points), workers)
    return _map(_grid_point, [(problem, params, options) for params in points], workers)
