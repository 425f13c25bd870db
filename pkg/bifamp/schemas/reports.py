"""
BiFAMP Report Schemas
Result records written by the CLI
"""
from enum import Enum
from typing import Optional

from pydantic import BaseModel, Field

from bifamp.schemas.problem import ProblemSpec


class ThresholdMethod(str, Enum):
    CLOSED_FORM = "closed-form"
    BISECTION = "bisection"
    JACOBIAN = "jacobian"


class Regime(str, Enum):
    UNIQUE = "unique"
    SPINODAL_EASY = "spinodal-easy"    # two fixed points, uninformative one dominates
    SPINODAL_HARD = "spinodal-hard"    # planted fixed point dominates but AMP misses it


class Threshold(BaseModel):
    """One threshold along the problem's natural axis"""
    name: str = Field(..., examples=["counting_bound"])
    axis: str = Field(..., examples=["pi"])
    value: Optional[float] = Field(None, description="None when the threshold does not exist")
    method: ThresholdMethod
    bracket_width: Optional[float] = None
    note: Optional[str] = None


class ThresholdReport(BaseModel):
    """Counting bound, stability thresholds and numeric transitions"""
    problem: ProblemSpec
    counting_bound: Optional[Threshold] = None
    informative_stability: Optional[Threshold] = None
    uninformative_stability: Optional[Threshold] = None
    spinodal: Optional[Threshold] = None
    first_order: Optional[Threshold] = None
    instability: Optional[Threshold] = Field(None, description="Bisection on the linear instability of the zero-overlap state")
    jacobian_checks: list[Threshold] = Field(default=[])

    def ordering_holds(self) -> bool:
        """
        The first-order transition lies between the counting bound and the
        spinodal whenever all three exist. Axes on which recovery needs a
        small value (rho) run the chain downwards.
        """
        values = [t.value if t is not None else None for t in (self.counting_bound, self.first_order, self.spinodal)]
        if any(v is None for v in values):
            return True
        slack = max((t.bracket_width or 0.0) for t in (self.first_order, self.spinodal))
        ascending = values[0] <= values[1] + slack and values[1] <= values[2] + slack
        descending = values[0] >= values[1] - slack and values[1] >= values[2] - slack
        return ascending or descending


class FreeEntropyReport(BaseModel):
    """Bethe-type free entropies per N^2, with raw totals and the term breakdown"""
    n: int
    phi_bethe: float
    phi_bethe_total: float
    phi_generating: float
    phi_variational: float
    phi_vmf: Optional[float] = Field(None, description="AWGN channels only")
    kl_x: float = Field(..., description="Sum of -KL over signal elements")
    kl_f: float = Field(..., description="Sum of -KL over factor elements")
    output_term: float
    correction_term: float
    non_fixed_point: bool = False


class MseReport(BaseModel):
    mse_z: float
    mse_x_aligned: float
    mse_f_aligned: float
    permutation: list[int]
    signs: list[int]


class SeFixedPoint(BaseModel):
    m_x: float
    m_f: list[float]
    e_x: float
    e_f: float
    phi: Optional[float] = None
    iterations: int
    converged: bool


class MmseResult(BaseModel):
    """Outcome of running state evolution from both initializations"""
    mmse_x: float
    mmse_f: float
    amp_mse_x: float
    amp_mse_f: float
    regime: Regime
    phi_uninformative: float
    phi_informative: float
    converged: bool


class AmpRunReport(BaseModel):
    seed: int
    iterations: int
    converged: bool
    mse: Optional[MseReport] = None
    free_entropy: FreeEntropyReport
    nishimori_trace: list[tuple[float, float]] = Field(
        default=[], description="(mean -dg_out, mean g_out^2) per iteration"
    )
    clamped_variances: int = 0
    rbp_mse_z: Optional[float] = Field(None, description="mse_z of the relaxed-BP oracle on the same instance")


class GridRow(BaseModel):
    """One grid point of a phase sweep; `error` is set instead of the results on failure"""
    params: dict[str, float]
    mmse_x: Optional[float] = None
    mmse_f: Optional[float] = None
    amp_mse_x: Optional[float] = None
    amp_mse_f: Optional[float] = None
    regime: Optional[Regime] = None
    converged: Optional[bool] = None
    error: Optional[str] = None
