"""
Tests for the Bethe, variational and mean-field free entropies.
"""
from dataclasses import replace

import numpy as np
import pytest

from bifamp.core.errors import UnsupportedError
from bifamp.schemas.problem import Application, ProblemSpec
from bifamp.schemas.run import AmpOptions, InitMode, VarianceMode
from bifamp.services.amp import amp_run, evaluate_mse
from bifamp.services.bethe import (
    BetheParams,
    awgn_bethe,
    free_entropy_report,
    solve_omega,
    variational_bethe,
    vmf_free_entropy,
)
from bifamp.services.channels import TwoGaussianMixture
from bifamp.services.factory import build_model
from bifamp.services.instances import generate
from bifamp.services.priors import LOG_2PI


@pytest.fixture
def noisy_problem(dictionary_problem):
    return dictionary_problem.with_value("delta", 0.5)


@pytest.fixture
def instance(noisy_problem):
    return generate(noisy_problem, 12, seed=21)


@pytest.fixture
def params(instance, rng):
    n, m, p = instance.n, instance.m, instance.p
    return BetheParams(
        Sigma=rng.uniform(0.2, 2.0, (n, p)),
        T=rng.normal(0.0, 1.0, (n, p)),
        Zvar=rng.uniform(0.2, 2.0, (m, n)),
        W=rng.normal(0.0, 1.0, (m, n)),
    )


class TestVariationalForm:
    """Free entropy as a function of the window parameters."""

    def test_awgn_closed_form(self, instance, params):
        """For AWGN the omega* root gives the closed form exactly."""
        model = build_model(instance.problem, instance)
        general = variational_bethe(params, instance.Y, model.prior_x, model.prior_f, model.channel)
        closed = awgn_bethe(params, instance.Y, model.prior_x, model.prior_f, 0.5)
        assert general == pytest.approx(closed, rel=1e-10)

    def test_mean_field_is_lower(self, instance, params):
        """The mean-field entropy never exceeds the Bethe one at equal parameters."""
        model = build_model(instance.problem, instance)
        bethe = awgn_bethe(params, instance.Y, model.prior_x, model.prior_f, 0.5)
        vmf = vmf_free_entropy(params, instance.Y, model.prior_x, model.prior_f, 0.5)
        assert vmf <= bethe

    def test_mean_field_needs_noise(self, instance, params):
        """delta = 0 has no mean-field form."""
        model = build_model(instance.problem, instance)
        with pytest.raises(UnsupportedError):
            vmf_free_entropy(params, instance.Y, model.prior_x, model.prior_f, 0.0)


class TestSolveOmega:
    """Root of g_out(omega) + (omega - p) / spread."""

    def test_mixture_root(self, rng):
        """Newton and brentq leave a residual below tolerance."""
        channel = TwoGaussianMixture(eps=0.8, delta_s=0.01, delta_l=2.0)
        Y = rng.normal(0.0, 1.0, (4, 5))
        p = rng.normal(0.0, 1.0, (4, 5))
        V = rng.uniform(0.5, 1.0, (4, 5))
        spread = 0.5 * V
        omega = solve_omega(channel, Y, p, V, spread)
        residual = channel.g_out(omega, Y, V) + (omega - p) / spread
        assert np.max(np.abs(residual)) < 1e-10


class TestReport:
    """Free entropies of an AMP state."""

    def test_flags_states_away_from_fixed_point(self, noisy_problem, instance):
        """A large last update marks the report as evaluated off a fixed point."""
        model = build_model(noisy_problem, instance)
        result = amp_run(noisy_problem, instance.Y, AmpOptions(max_iterations=3), np.random.default_rng(0),
                         instance.n, model, track_free_entropy=False)
        report = free_entropy_report(result.state, instance.Y, model.prior_x, model.prior_f, model.channel,
                                     mean_delta_a=1.0)
        assert report.non_fixed_point
        assert report.phi_vmf is not None
        assert report.phi_bethe == pytest.approx(report.phi_bethe_total / instance.n ** 2)

    def test_quiet_at_small_updates(self, noisy_problem, instance):
        """No flag when the last update was tiny."""
        model = build_model(noisy_problem, instance)
        result = amp_run(noisy_problem, instance.Y, AmpOptions(max_iterations=3), np.random.default_rng(0),
                         instance.n, model, track_free_entropy=False)
        report = free_entropy_report(result.state, instance.Y, model.prior_x, model.prior_f, model.channel,
                                     mean_delta_a=1e-9)
        assert not report.non_fixed_point

    def test_planted_beats_zero_overlap(self):
        """Above the spinodal the planted fixed point has the larger Bethe free entropy."""
        problem = ProblemSpec(application=Application.DICTIONARY, alpha=0.5, pi=3.0, rho=0.2, delta=1e-6)
        instance = generate(problem, 60, seed=13)
        model = build_model(problem, instance)
        planted = amp_run(problem, instance.Y, AmpOptions(init=InitMode.PLANTED, max_iterations=200),
                          np.random.default_rng(0), instance.n, model, (instance.F0, instance.X0),
                          track_free_entropy=False)
        assert evaluate_mse(planted.state.a, planted.state.r, instance.X0, instance.F0).mse_x_aligned < 1e-3
        phi_planted = free_entropy_report(planted.state, instance.Y, model.prior_x, model.prior_f,
                                          model.channel).phi_bethe

        # a = r = 0 with prior variances: no KL, no correction, V = Qx0 QF0
        qz = model.prior_x.second_moment() * model.prior_f.second_moment()
        zero = np.zeros_like(instance.Y)
        phi_zero = float(np.sum(model.channel.log_partition(zero, instance.Y, zero + qz))) / instance.n ** 2
        assert phi_planted > phi_zero + 0.1


class TestAwgnBound:
    """The AWGN Bethe entropy never exceeds -(MP/2) log(2 pi delta)."""

    def test_random_parameters(self, instance, rng):
        """Fifty random windows stay below the bound."""
        model = build_model(instance.problem, instance)
        n, m, p = instance.n, instance.m, instance.p
        bound = -0.5 * m * p * (LOG_2PI + np.log(0.5))
        for _ in range(50):
            params = BetheParams(
                Sigma=rng.uniform(0.05, 3.0, (n, p)),
                T=rng.normal(0.0, 2.0, (n, p)),
                Zvar=rng.uniform(0.05, 3.0, (m, n)),
                W=rng.normal(0.0, 2.0, (m, n)),
            )
            assert awgn_bethe(params, instance.Y, model.prior_x, model.prior_f, 0.5) <= bound

    def test_along_amp_run(self, noisy_problem, instance):
        """Every iterate of an AMP run respects the bound."""
        model = build_model(noisy_problem, instance)
        bound = -0.5 * instance.m * instance.p * (LOG_2PI + np.log(0.5))
        for iterations in (1, 5, 20):
            result = amp_run(noisy_problem, instance.Y, AmpOptions(max_iterations=iterations),
                             np.random.default_rng(1), instance.n, model, track_free_entropy=False)
            params = BetheParams.from_state(result.state)
            assert awgn_bethe(params, instance.Y, model.prior_x, model.prior_f, 0.5) <= bound


STEP = 1e-4


def scaled_gradient(evaluate, params, picks):
    """
    Central differences at the coordinates in `picks`.

    Variances are stepped relative to their value and centers relative to the
    square root of their window variance, so every entry is dimensionless.
    """
    gradient = []
    for name, index in picks:
        array = getattr(params, name)
        window = {"Sigma": params.Sigma, "T": params.Sigma, "Zvar": params.Zvar, "W": params.Zvar}[name]
        step = STEP * (array[index] if name in ("Sigma", "Zvar") else np.sqrt(window[index]))
        values = []
        for sign in (1.0, -1.0):
            shifted = array.copy()
            shifted[index] += sign * step
            values.append(evaluate(replace(params, **{name: shifted})))
        gradient.append((values[0] - values[1]) / (2.0 * STEP))
    return np.array(gradient)


class TestStationarity:
    """AMP fixed points are stationary points of the variational free entropy."""

    CASES = {
        "cs": dict(application=Application.CS, alpha=0.6, pi=1.0, rho=0.2, delta=0.01),
        "calibration": dict(application=Application.CALIBRATION, alpha=0.6, pi=2.0, rho=0.2, eta=0.5, delta=0.01),
        "dictionary": dict(application=Application.DICTIONARY, alpha=0.5, pi=3.0, rho=0.2, delta=0.01),
    }

    def _relative_gradient(self, case, n, seed):
        problem = ProblemSpec(**self.CASES[case])
        instance = generate(problem, n, seed=seed)
        model = build_model(problem, instance)
        known = problem.application is Application.CS
        options = AmpOptions(
            init=InitMode.CS if known else InitMode.PLANTED,
            variance_mode=VarianceMode.GENERAL,
            tolerance=1e-11,
            max_iterations=3000,
        )
        result = amp_run(problem, instance.Y, options, np.random.default_rng(seed), instance.n, model,
                         (instance.F0, instance.X0), track_free_entropy=False)
        assert result.converged
        assert result.clamped_total == 0

        state = result.state
        r_known = state.r if known else None

        def evaluate(params):
            return variational_bethe(params, instance.Y, model.prior_x, model.prior_f, model.channel, r_known)

        rng = np.random.default_rng(100 + seed)
        names = ("Sigma", "T") if known else ("Sigma", "T", "Zvar", "W")
        picks = []
        for name in names:
            shape = getattr(state, name).shape
            picks += [(name, (int(rng.integers(shape[0])), int(rng.integers(shape[1])))) for _ in range(8)]

        fixed = BetheParams.from_state(state)
        moved = replace(
            fixed,
            T=fixed.T + np.sqrt(fixed.Sigma) * rng.standard_normal(fixed.T.shape),
            W=fixed.W + np.sqrt(fixed.Zvar) * rng.standard_normal(fixed.W.shape),
        )
        at_fixed = np.max(np.abs(scaled_gradient(evaluate, fixed, picks)))
        reference = np.max(np.abs(scaled_gradient(evaluate, moved, picks)))
        return at_fixed / reference

    def test_known_factor_small(self):
        """N = 40 compressed sensing."""
        assert self._relative_gradient("cs", 40, seed=1) < 1e-4

    @pytest.mark.slow
    @pytest.mark.parametrize("case", ["cs", "calibration", "dictionary"])
    @pytest.mark.parametrize("seed", [1, 2])
    def test_converged_fixed_points(self, case, seed):
        """N = 250, three applications, two seeds each."""
        assert self._relative_gradient(case, 250, seed) < 1e-4
