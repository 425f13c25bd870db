"""
BiFAMP Run Schemas
Solver options and the canonical run configuration
"""
from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from bifamp.core.config import settings
from bifamp.schemas.problem import SWEEP_AXES, ProblemSpec


class VarianceMode(str, Enum):
    GENERAL = "general"
    NISHIMORI = "nishimori"
    FULL_TAP = "full_tap"                  # scalar variances, Nishimori form
    FULL_TAP_GENERAL = "full_tap_general"  # scalar variances, empirical chi and q kept apart


class Schedule(str, Enum):
    PARALLEL = "parallel"
    BLOCK_SEQUENTIAL = "block_sequential"


class InitMode(str, Enum):
    RANDOM = "random"      # a, r drawn from the priors
    PLANTED = "planted"    # a = X0, r = sqrt(N) F0
    CS = "cs"              # F known exactly, factor side frozen


class SeInit(str, Enum):
    UNINFORMATIVE = "uninformative"
    INFORMATIVE = "informative"
    CUSTOM = "custom"


class AmpOptions(BaseModel):
    """GAMP / relaxed-BP iteration controls"""
    max_iterations: int = Field(default_factory=lambda: settings.AMP_MAX_ITERATIONS, ge=1)
    tolerance: float = Field(default_factory=lambda: settings.AMP_TOLERANCE, gt=0)
    damping: float = Field(default_factory=lambda: settings.AMP_DAMPING, gt=0, le=1)
    variance_mode: VarianceMode = VarianceMode.NISHIMORI
    schedule: Schedule = Schedule.PARALLEL
    init: InitMode = InitMode.RANDOM
    blocks: int = Field(4, ge=1, description="Block count per side for the block-sequential schedule")

    model_config = ConfigDict(extra="forbid")


class SeOptions(BaseModel):
    """State-evolution controls"""
    init: SeInit = SeInit.UNINFORMATIVE
    m_x: Optional[float] = Field(None, ge=0, description="Custom initial m_x")
    m_f: Optional[float] = Field(None, ge=0, description="Custom initial m_F")
    tolerance: float = Field(default_factory=lambda: settings.SE_TOLERANCE, gt=0)
    max_iterations: int = Field(default_factory=lambda: settings.SE_MAX_ITERATIONS, ge=1)
    seed_overlap: float = Field(default_factory=lambda: settings.SYMMETRY_BREAKING_SEED, gt=0)
    sequential: bool = Field(False, description="Update m_F from the new m_x within one step")
    general: bool = Field(False, description="Track m, q and Q on both sides (AWGN channels)")
    check_quadrature: bool = Field(True, description="Escalate the quadrature order until fixed points agree")

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _custom_needs_values(self):
        if self.init is SeInit.CUSTOM and (self.m_x is None or self.m_f is None):
            raise ValueError("custom init needs m_x and m_f")
        return self


class PhaseOptions(BaseModel):
    """Threshold search and grid sweep controls"""
    axis: Literal["pi", "alpha", "rho", "delta", "eps", "eta", "psi"] = "pi"
    bracket: Optional[tuple[float, float]] = Field(None, description="Search bracket along `axis`")
    grid: dict[str, list[float]] = Field(default={}, description="Sweep axes and their values")
    tolerance: float = Field(default_factory=lambda: settings.BISECTION_TOL, gt=0)

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _check_axes(self):
        unknown = set(self.grid) - set(SWEEP_AXES)
        if unknown:
            raise ValueError(f"unknown sweep axes: {sorted(unknown)}")
        if self.bracket is not None and not self.bracket[0] < self.bracket[1]:
            raise ValueError("bracket must be increasing")
        return self


class RunConfig(BaseModel):
    """One canonical JSON document per run; CLI flags override keys"""
    command: Literal["gen", "amp", "se", "thresholds", "phase"]
    problem: ProblemSpec
    truth: Optional[ProblemSpec] = Field(
        None, description="Generating problem for mismatched-prior state evolution; implies se.general"
    )
    n: int = Field(500, ge=2, description="Latent dimension N")
    seed: int = Field(0, ge=0)
    seeds: Optional[list[int]] = Field(None, description="Several seeds for amp runs")
    instance: Optional[str] = Field(None, description="Instance file consumed by amp")
    out: Optional[str] = Field(None, description="Primary output path")
    threads: Optional[int] = Field(None, ge=1)
    strict: bool = False
    emit_plot: bool = False
    rbp: bool = Field(False, description="Also run the relaxed-BP oracle (small instances)")
    amp: AmpOptions = Field(default_factory=AmpOptions)
    se: SeOptions = Field(default_factory=SeOptions)
    phase: PhaseOptions = Field(default_factory=PhaseOptions)

    model_config = ConfigDict(extra="forbid")
