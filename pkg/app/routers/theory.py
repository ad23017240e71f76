import math

from fastapi import APIRouter, HTTPException

from app.core.errors import SimulatorError
from app.schemas.theory import ConstantsReport, DescentConditions, Theorem1Bound, Theorem1Request, TheoryParams
from app.services.theory import constants_report, descent_conditions, theorem1_bound

router = APIRouter()


@router.post("/constants", response_model=ConstantsReport)
def get_constants(params: TheoryParams):
    try:
        return constants_report(params)
    except SimulatorError as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/descent", response_model=DescentConditions)
def get_descent_conditions(params: TheoryParams):
    return descent_conditions(params)


@router.post("/theorem1", response_model=Theorem1Bound)
def get_theorem1_bound(payload: Theorem1Request):
    try:
        bound = theorem1_bound(payload.params, payload.f0_minus_fstar, payload.rounds)
    except SimulatorError as e:
        raise HTTPException(status_code=400, detail=str(e))
    # JSON has no infinity; rho_max >= 1 leaves the floor unbounded
    if not math.isfinite(bound.total):
        raise HTTPException(status_code=400, detail="bound is vacuous: rho_max >= 1")
    return bound
