"""
BiFAMP Configuration
Environment-based settings for the numerical defaults
"""
from pydantic_settings import BaseSettings
from typing import Optional
import os


class Settings(BaseSettings):
    """Numerical defaults loaded from environment variables"""

    # App
    APP_NAME: str = "BiFAMP"
    APP_VERSION: str = "0.1.0"
    LOG_LEVEL: str = "INFO"

    # Parallelism (falls back to cpu count)
    BIFAMP_THREADS: Optional[int] = None

    # Quadrature
    QUADRATURE_ORDER: int = 40
    QUADRATURE_MAX_ORDER: int = 160

    # AMP
    VARIANCE_FLOOR: float = 1e-12
    AMP_DAMPING: float = 0.5
    AMP_MAX_ITERATIONS: int = 500
    AMP_TOLERANCE: float = 1e-8
    RBP_MAX_EDGES: int = 1_000_000

    # State evolution
    SE_TOLERANCE: float = 1e-12
    SE_MAX_ITERATIONS: int = 100_000
    SPINODAL_MAX_ITERATIONS: int = 1_000_000
    FIXED_POINT_MATCH_TOL: float = 1e-6
    SYMMETRY_BREAKING_SEED: float = 1e-6

    # Phase diagrams
    BISECTION_TOL: float = 1e-3

    class Config:
        env_file = ".env"
        case_sensitive = True

    def worker_count(self, requested: Optional[int] = None) -> int:
        """Resolve the worker pool size: explicit flag, then env, then cpu count."""
        if requested:
            return max(1, int(requested))
        if self.BIFAMP_THREADS:
            return max(1, int(self.BIFAMP_THREADS))
        return os.cpu_count() or 1


settings = Settings()
