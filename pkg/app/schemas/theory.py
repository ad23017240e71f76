from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from app.constants import BoundKind


class TheoryParams(BaseModel):
    """Inputs to every closed-form constant of the analysis."""
    model_config = ConfigDict(extra="forbid")

    L: float = Field(gt=0)
    beta_sq: float = Field(default=1.0, ge=1)
    nu_sq: float = Field(default=0.0, ge=0)
    sigma_sq: float = Field(default=0.0, ge=0)
    delta: float = Field(ge=1)
    eta: float = Field(default=1.0, gt=0)
    eta0: float = Field(gt=0)
    T: int = Field(ge=1)
    alpha: float = Field(default=0.85, ge=0, le=1)
    p: float = Field(default=1.0, gt=0, le=1)
    K: int = Field(default=1, ge=1)

    @property
    def s0(self) -> float:
        return self.eta0 * self.L * self.T

    @property
    def m(self) -> int:
        return max(1, int(self.p * self.K + 1e-9))


class ErrorConstant(BaseModel):
    value: float
    rho_max: float
    absorbed: bool


class ConstantsReport(BaseModel):
    s0: float
    rho: float
    rho_ef: float
    alpha_star: float
    rho_min: float
    residual_coefficient: float
    rho_pp_max: float
    theta: Optional[float] = None
    theta_pp: Optional[float] = None
    flags: Dict[str, bool] = {}
    notes: List[str] = []


class Theorem1Bound(BaseModel):
    optimization_term: float
    compression_floor: float
    minibatch_term: float
    total: float
    c_sigma: float
    c_nu: float
    preconditions: Dict[str, bool] = {}
    warnings: List[str] = []


class BoundReport(BaseModel):
    lemma: BoundKind
    empirical_lhs: float
    theoretical_rhs: float
    samples: int = Field(ge=100)
    standard_error: float = Field(ge=0)
    satisfied: bool
    preconditions_met: bool = True
    violations: List[str] = []
    detail: Dict[str, float] = {}


class DescentConditions(BaseModel):
    """Sufficient conditions for per-round descent and their slack."""
    flags: Dict[str, bool]
    a_coefficient: float
    a_threshold: float
    satisfied: bool


class Theorem1Request(BaseModel):
    params: TheoryParams
    f0_minus_fstar: float = Field(ge=0)
    rounds: int = Field(ge=1)
