"""
Tests for environment-based settings.
"""
import os

from bifamp.core.config import Settings, settings


class TestSettings:
    """Defaults and environment overrides."""

    def test_defaults(self):
        """Numerical defaults match the documented values."""
        fresh = Settings(_env_file=None)
        assert fresh.QUADRATURE_ORDER == 40
        assert fresh.AMP_DAMPING == 0.5
        assert fresh.BISECTION_TOL == 1e-3

    def test_environment_override(self, monkeypatch):
        """Variables in the environment replace the defaults."""
        monkeypatch.setenv("AMP_DAMPING", "0.3")
        assert Settings(_env_file=None).AMP_DAMPING == 0.3


class TestWorkerCount:
    """Flag, then BIFAMP_THREADS, then cpu count."""

    def test_explicit_request(self, monkeypatch):
        """An explicit request wins over the environment."""
        monkeypatch.setattr(settings, "BIFAMP_THREADS", 2)
        assert settings.worker_count(3) == 3

    def test_environment_fallback(self, monkeypatch):
        """BIFAMP_THREADS applies when no request is given."""
        monkeypatch.setattr(settings, "BIFAMP_THREADS", 2)
        assert settings.worker_count() == 2

    def test_cpu_fallback(self, monkeypatch):
        """Without flag or environment the cpu count is used."""
        monkeypatch.setattr(settings, "BIFAMP_THREADS", None)
        monkeypatch.setattr(os, "cpu_count", lambda: 6)
        assert settings.worker_count() == 6
