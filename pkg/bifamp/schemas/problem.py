"""
BiFAMP Problem Schemas
The experiment description shared by every command
"""
import math
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from bifamp.core.config import settings
from bifamp.core.errors import ConfigError


class Application(str, Enum):
    """Supported matrix-factorization applications"""
    DICTIONARY = "dictionary"
    CALIBRATION = "calibration"
    SPARSE_PCA = "sparse_pca"
    BLIND_SOURCE_SEPARATION = "blind_source_separation"
    COMPLETION = "completion"
    ROBUST_PCA = "robust_pca"
    FACTOR_ANALYSIS = "factor_analysis"
    CS = "cs"


# Applications whose factor prior, signal prior and channel coincide with
# dictionary learning; they differ only in which axis the counting bound
# is solved for.
DICTIONARY_LIKE = frozenset({
    Application.DICTIONARY,
    Application.CALIBRATION,
    Application.SPARSE_PCA,
    Application.BLIND_SOURCE_SEPARATION,
    Application.CS,
})

SWEEP_AXES = ("pi", "alpha", "rho", "delta", "eps", "eta", "psi")


def round_half_up(value: float) -> int:
    """Nearest integer, ties rounded up."""
    return int(math.floor(value + 0.5))


class ProblemSpec(BaseModel):
    """Ratios, prior and channel parameters of one experiment"""

    application: Application = Field(..., description="Application tag", examples=["dictionary"])
    alpha: float = Field(..., gt=0, description="M / N", examples=[0.5])
    pi: float = Field(..., gt=0, description="P / N", examples=[2.0])

    # Signal prior
    rho: float = Field(1.0, ge=0, le=1, description="Density of nonzero signal elements")
    x_mean: float = Field(0.0, description="Mean of the nonzero signal elements")
    x_var: float = Field(1.0, gt=0, description="Variance of the nonzero signal elements")
    nonneg: bool = Field(False, description="Restrict the signal to x >= 0")

    # Factor prior
    eta: Optional[float] = Field(
        None, ge=0, description="Calibration uncertainty; None means no prior knowledge of F"
    )

    # Channels
    delta: float = Field(0.0, ge=0, description="AWGN variance")
    eps: float = Field(1.0, ge=0, le=1, description="Known fraction (completion) or small-noise fraction (robust PCA)")
    delta_s: float = Field(0.0, ge=0, description="Small-noise variance (robust PCA)")
    delta_l: float = Field(1.0, gt=0, description="Large-noise variance (robust PCA)")
    psi: list[float] = Field(default=[1.0], description="Unique-factor variances (factor analysis)")
    psi_weights: Optional[list[float]] = Field(None, description="Row fractions for each psi value")

    quadrature_order: int = Field(default_factory=lambda: settings.QUADRATURE_ORDER, ge=4)

    model_config = ConfigDict(
        extra="forbid",
        frozen=True,
        json_schema_extra={
            "example": {
                "application": "dictionary",
                "alpha": 0.5,
                "pi": 2.0,
                "rho": 0.2,
                "delta": 0.0,
            }
        },
    )

    @model_validator(mode="after")
    def _check_application(self):
        if self.application is Application.CALIBRATION and self.eta is None:
            raise ValueError("calibration needs eta")
        if self.application is Application.COMPLETION and self.eps <= 0:
            raise ValueError("completion needs a positive known fraction eps")
        if any(p <= 0 for p in self.psi) or not self.psi:
            raise ValueError("psi values must be positive")
        if self.psi_weights is not None:
            if len(self.psi_weights) != len(self.psi):
                raise ValueError("psi_weights must have one entry per psi value")
            if any(w < 0 for w in self.psi_weights) or abs(sum(self.psi_weights) - 1.0) > 1e-9:
                raise ValueError("psi_weights must be nonnegative and sum to one")
        return self

    @property
    def eta_value(self) -> float:
        """eta as a number: exact knowledge for cs, infinity when unspecified."""
        if self.application is Application.CS:
            return 0.0
        return math.inf if self.eta is None else self.eta

    @property
    def weights(self) -> list[float]:
        if self.psi_weights is not None:
            return list(self.psi_weights)
        return [1.0 / len(self.psi)] * len(self.psi)

    def dims(self, n: int) -> tuple[int, int]:
        """(M, P) for a given N."""
        return round_half_up(self.alpha * n), round_half_up(self.pi * n)

    def with_value(self, axis: str, value: float) -> "ProblemSpec":
        """
        Copy with one sweep axis set; `psi` sets a single-class psi.

        ConfigError when the axis is unknown or the value leaves the schema bounds.
        """
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown axis {axis!r}")
        update = {"psi": [value], "psi_weights": None} if axis == "psi" else {axis: value}
        try:
            return ProblemSpec.model_validate({**self.model_dump(), **update})
        except ValidationError as exc:
            raise ConfigError(f"{axis}={value} is outside the valid range: {exc.errors()[0]['msg']}") from exc
