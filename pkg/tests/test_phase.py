"""
Tests for counting bounds, stability thresholds, numeric transitions and grid sweeps.
"""
import pytest

from bifamp.core.errors import BracketError, ConfigError
from bifamp.schemas.problem import Application, ProblemSpec
from bifamp.schemas.reports import Regime, Threshold, ThresholdMethod, ThresholdReport
from bifamp.schemas.run import SeInit
from bifamp.services.phase import (
    counting_bound,
    counting_bound_on,
    default_bracket,
    find_first_order,
    find_instability,
    find_recovery_edge,
    find_spinodal,
    grid_points,
    informative_stability,
    jacobian_crossing,
    recovers,
    stability_thresholds,
    sweep_grid,
    uninformative_stability,
)
from bifamp.services.state_evolution import mmse_select, se_run


@pytest.fixture
def factor_analysis_problem():
    return ProblemSpec(application=Application.FACTOR_ANALYSIS, alpha=2.0, pi=3.0,
                       psi=[0.5, 2.0], psi_weights=[0.5, 0.5])


class TestCountingBound:
    """Dimension counting on the natural axis."""

    def test_dictionary(self, dictionary_problem):
        """alpha = 0.5, rho = 0.2 needs pi > 5/3."""
        bound = counting_bound(dictionary_problem)
        assert bound.axis == "pi"
        assert bound.value == pytest.approx(5.0 / 3.0)
        assert bound.method is ThresholdMethod.CLOSED_FORM

    def test_completion(self):
        """alpha = pi = 4 needs eps > 1/2."""
        problem = ProblemSpec(application=Application.COMPLETION, alpha=4.0, pi=4.0, eps=0.6)
        assert counting_bound(problem).value == pytest.approx(0.5)

    def test_known_factor(self, cs_problem):
        """With F known the bound is rho < alpha."""
        assert counting_bound(cs_problem).value == pytest.approx(0.6)

    def test_dense_signal_on_pi(self):
        """rho = 0 leaves only the alpha pi >= alpha condition."""
        problem = ProblemSpec(application=Application.DICTIONARY, alpha=0.5, pi=2.0, rho=0.0)
        assert counting_bound(problem).value == pytest.approx(1.0)

    def test_no_finite_bound(self):
        """alpha <= rho has no finite pi."""
        problem = ProblemSpec(application=Application.DICTIONARY, alpha=0.2, pi=2.0, rho=0.3)
        assert counting_bound(problem).value is None

    def test_other_axes(self, dictionary_problem):
        """The relation solved for alpha and rho."""
        assert counting_bound_on(dictionary_problem, "alpha") == pytest.approx(0.4)
        assert counting_bound_on(dictionary_problem, "rho") == pytest.approx(0.25)
        with pytest.raises(ValueError):
            counting_bound_on(dictionary_problem, "eta")


class TestStabilityThresholds:
    """Closed-form stability of both fixed points."""

    def test_dictionary_uninformative(self, dictionary_problem):
        """(delta + rho)^2 / (alpha rho^2) = 2 at delta = 0."""
        assert uninformative_stability(dictionary_problem).value == pytest.approx(2.0)

    def test_completion_uninformative(self):
        """1 / sqrt(alpha pi) = 1/2 for alpha = pi = 2."""
        problem = ProblemSpec(application=Application.COMPLETION, alpha=2.0, pi=2.0, eps=0.6)
        assert uninformative_stability(problem).value == pytest.approx(0.5)

    def test_factor_analysis_uninformative(self, factor_analysis_problem):
        """psi = (0.5, 2), alpha = 2 loses stability at pi = 1.8."""
        assert uninformative_stability(factor_analysis_problem).value == pytest.approx(1.8)

    def test_blind_source_separation(self):
        """delta / (sqrt(alpha pi) - 1) with alpha = 1, pi = 4, delta = 0.1."""
        problem = ProblemSpec(application=Application.BLIND_SOURCE_SEPARATION, alpha=1.0, pi=4.0,
                              rho=0.3, delta=0.1)
        threshold = uninformative_stability(problem)
        assert threshold.axis == "rho"
        assert threshold.value == pytest.approx(0.1)

    def test_known_factor_has_no_zero_state(self, cs_problem):
        """A calibrated factor never starts at zero overlap."""
        assert uninformative_stability(cs_problem).value is None

    def test_informative_equals_counting_bound(self, dictionary_problem):
        """Without noise the perfect-recovery point is stable above the counting bound."""
        assert informative_stability(dictionary_problem).value == pytest.approx(5.0 / 3.0)

    def test_informative_needs_zero_noise(self, dictionary_problem):
        """Any noise removes the perfect-recovery fixed point."""
        assert informative_stability(dictionary_problem.with_value("delta", 1e-3)).value is None

    def test_factor_analysis_informative(self, factor_analysis_problem):
        """pi / (alpha (pi - 1)) = 0.75 for alpha = 2, pi = 3."""
        threshold = informative_stability(factor_analysis_problem)
        assert threshold.axis == "eps"
        assert threshold.value == pytest.approx(0.75)


class TestLinearization:
    """Numeric Jacobian of the state-evolution step."""

    def test_dictionary_crossing(self, dictionary_problem):
        """The spectral radius at zero overlap crosses one at pi = 2."""
        crossing = jacobian_crossing(dictionary_problem, "pi", 2.0)
        assert crossing.method is ThresholdMethod.JACOBIAN
        assert crossing.value == pytest.approx(2.0, abs=1e-3)

    def test_factor_analysis_cross_check(self, factor_analysis_problem):
        """Two row classes: the Jacobian confirms the closed form."""
        report = stability_thresholds(factor_analysis_problem)
        assert report.jacobian_checks[0].value == pytest.approx(1.8, abs=1e-3)

    def test_no_check_without_zero_state(self, cs_problem):
        """Nothing to cross-check when the closed form does not exist."""
        assert stability_thresholds(cs_problem).jacobian_checks == []


class TestBrackets:
    """Default search brackets and threshold ordering."""

    def test_known_factor_bracket(self, cs_problem):
        """rho runs from 5% of alpha to just below alpha."""
        report = stability_thresholds(cs_problem)
        assert default_bracket(report) == pytest.approx((0.03, 0.5994))

    def test_completion_bracket(self, completion_problem):
        """Spans the counting bound and the stability threshold on eps."""
        lo, hi = default_bracket(stability_thresholds(completion_problem))
        assert lo == pytest.approx(0.9 * 0.25)
        assert hi == pytest.approx(1.05 * 0.5)

    @staticmethod
    def _report(problem, bound, first, spinodal):
        def make(name, value):
            return Threshold(name=name, axis="pi", value=value, method=ThresholdMethod.BISECTION, bracket_width=1e-3)

        return ThresholdReport(problem=problem, counting_bound=make("counting_bound", bound),
                               first_order=make("first_order", first), spinodal=make("spinodal", spinodal))

    def test_ordering(self, dictionary_problem):
        """Ascending and descending chains hold, a misplaced first-order point does not."""
        assert self._report(dictionary_problem, 1.67, 1.7, 2.0).ordering_holds()
        assert self._report(dictionary_problem, 0.5, 0.3, 0.2).ordering_holds()
        assert not self._report(dictionary_problem, 1.67, 2.5, 2.0).ordering_holds()

    def test_missing_value_passes(self, dictionary_problem):
        """Ordering is only checked when all three values exist."""
        assert self._report(dictionary_problem, 1.67, None, 2.0).ordering_holds()


class TestBisection:
    """Recovery indicators and bracketed searches."""

    def test_completion_recovery_indicator(self, completion_problem):
        """Uninformative state evolution recovers at eps = 0.55 but not at 0.45."""
        assert recovers(completion_problem)
        assert not recovers(completion_problem.with_value("eps", 0.45))

    def test_bracket_without_sign_change(self, completion_problem):
        """Both ends recover: BracketError."""
        with pytest.raises(BracketError):
            find_spinodal(completion_problem, "eps", (0.6, 0.9), workers=1)

    @pytest.mark.slow
    def test_completion_spinodal(self, completion_problem):
        """The spinodal of alpha = pi = 4 completion sits at eps = 1/2."""
        spinodal = find_spinodal(completion_problem, "eps", (0.41, 0.63), workers=1)
        assert spinodal.value == pytest.approx(0.5, abs=0.01)
        assert spinodal.bracket_width <= 1e-3

    @pytest.mark.slow
    def test_dictionary_informative_edge(self, dictionary_problem):
        """Informative runs keep perfect recovery down to the counting bound."""
        edge = find_recovery_edge(dictionary_problem, "pi", (1.5, 1.9), SeInit.INFORMATIVE, workers=1)
        assert edge.name == "informative_edge"
        assert edge.value == pytest.approx(5.0 / 3.0, abs=0.01)

    @pytest.mark.slow
    def test_noiseless_first_order_at_counting_bound(self, dictionary_problem):
        """Without noise the planted fixed point dominates as soon as it exists."""
        transition = find_first_order(dictionary_problem, "pi", (1.5, 2.2), workers=1)
        assert transition.value == pytest.approx(5.0 / 3.0, abs=0.01)

    def test_single_fixed_point_means_no_transition(self, completion_problem):
        """Above both thresholds every scan point is unique."""
        transition = find_first_order(completion_problem, "eps", (0.6, 0.9), workers=1)
        assert transition.value is None
        assert "single fixed point" in transition.note


class TestGridSweep:
    """Cartesian sweeps of mmse_select."""

    def test_lexicographic_order(self):
        """Axes follow the canonical order, values ascend."""
        points = grid_points({"eps": [0.6, 0.4], "pi": [2.0, 1.0]})
        assert points == [
            {"pi": 1.0, "eps": 0.4},
            {"pi": 1.0, "eps": 0.6},
            {"pi": 2.0, "eps": 0.4},
            {"pi": 2.0, "eps": 0.6},
        ]

    def test_unknown_axis(self):
        """Only sweepable parameters are accepted."""
        with pytest.raises(ValueError):
            grid_points({"n": [10.0]})

    def test_single_point_matches_selection(self, fast_se):
        """A one-point grid reproduces mmse_select."""
        problem = ProblemSpec(application=Application.DICTIONARY, alpha=0.5, pi=2.0, rho=0.2, delta=1e-2)
        rows = sweep_grid(problem, {"pi": [3.0]}, fast_se, workers=1)
        expected = mmse_select(problem.with_value("pi", 3.0), fast_se)
        assert len(rows) == 1
        assert rows[0].mmse_x == pytest.approx(expected.mmse_x, rel=1e-12)
        assert rows[0].regime is Regime.UNIQUE

    def test_failures_stay_in_their_row(self, completion_problem, fast_se):
        """An invalid eps is reported as an error without stopping the sweep."""
        rows = sweep_grid(completion_problem, {"eps": [0.6, 1.5]}, fast_se, workers=1)
        assert rows[0].error is None
        assert rows[1].error is not None
        assert rows[1].mmse_x is None

    @pytest.mark.slow
    def test_noisy_completion_is_continuous(self, completion_problem, fast_se):
        """With delta = 1e-2 the MMSE curve along eps has no jump on a 0.01 grid."""
        grid = {"eps": [round(0.30 + 0.01 * k, 2) for k in range(41)]}
        rows = sweep_grid(completion_problem.with_value("delta", 1e-2), grid, fast_se, workers=1)
        assert all(row.error is None for row in rows)
        for left, right in zip(rows, rows[1:]):
            assert abs(right.mmse_x - left.mmse_x) <= 0.05


class TestInstabilityBisection:
    """Numeric onset of the linear instability of the zero-overlap state."""

    def test_dictionary(self, dictionary_problem):
        """Bisection reproduces (delta + rho)^2 / (alpha rho^2) = 2."""
        threshold = find_instability(dictionary_problem, "pi", (1.5, 2.5), workers=1)
        assert threshold.name == "instability"
        assert threshold.method is ThresholdMethod.BISECTION
        assert threshold.value == pytest.approx(2.0, abs=0.02)

    def test_factor_analysis(self, factor_analysis_problem):
        """Two psi classes: onset at pi = 1.8."""
        threshold = find_instability(factor_analysis_problem, "pi", (1.5, 2.2), workers=1)
        assert threshold.value == pytest.approx(1.8, abs=0.02)

    def test_stable_bracket(self, dictionary_problem):
        """No sign change below the threshold: BracketError."""
        with pytest.raises(BracketError):
            find_instability(dictionary_problem, "pi", (1.2, 1.8), workers=1)


class TestAnchors:
    """Known transition points of compressed sensing and robust PCA."""

    @pytest.fixture
    def robust_pca_problem(self):
        return ProblemSpec(application=Application.ROBUST_PCA, alpha=4.0, pi=4.0, eps=0.6,
                           delta_s=0.0, delta_l=1.0)

    @pytest.mark.slow
    def test_compressed_sensing_spinodal(self):
        """A known factor at alpha = 0.5 stops recovering at rho = 0.317."""
        problem = ProblemSpec(application=Application.CS, alpha=0.5, pi=1.0, rho=0.2, delta=1e-12)
        spinodal = find_spinodal(problem, "rho", (0.25, 0.4), tolerance=1e-3, workers=1)
        assert spinodal.value == pytest.approx(0.317, abs=5e-3)

    @pytest.mark.slow
    def test_robust_pca_transition(self, robust_pca_problem):
        """alpha = pi = 4 without small noise recovers above eps = 1/2."""
        spinodal = find_spinodal(robust_pca_problem, "eps", (0.41, 0.63), workers=1)
        assert spinodal.value == pytest.approx(0.5, abs=0.01)

    def test_robust_pca_few_clean_entries(self, robust_pca_problem, fast_se):
        """Even at eps = 0.05 the estimate beats the prior."""
        run = se_run(robust_pca_problem.with_value("eps", 0.05), fast_se)
        assert run.e_x < 1.0 - 1e-3


class TestAxisValues:
    """Moving a problem along a sweep axis."""

    def test_out_of_range_is_config_error(self, completion_problem):
        """A known fraction above one is a configuration error."""
        with pytest.raises(ConfigError):
            completion_problem.with_value("eps", 1.5)

    def test_unknown_axis(self, completion_problem):
        """Only sweepable parameters can be set."""
        with pytest.raises(ConfigError):
            completion_problem.with_value("n", 10.0)
