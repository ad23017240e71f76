import logging
from typing import List

from fastapi import APIRouter, HTTPException

from app.core.errors import ConfigError, SimulatorError
from app.schemas.experiment import ExperimentConfig, RunSummary, SweepRequest
from app.services.harness import run_experiment, sweep_alpha

logger = logging.getLogger(__name__)

router = APIRouter()


@router.post("/run", response_model=RunSummary)
def run(config: ExperimentConfig):
    """Run one experiment synchronously and return its summary."""
    try:
        return run_experiment(config)
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except SimulatorError as e:
        logger.error(f"Run failed: {e}")
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/sweep", response_model=List[RunSummary])
def sweep(payload: SweepRequest):
    try:
        return sweep_alpha(payload.config, payload.alphas)
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except SimulatorError as e:
        raise HTTPException(status_code=400, detail=str(e))
