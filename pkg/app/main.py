import logging
from contextlib import asynccontextmanager

from dotenv import load_dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.config import settings
from app.core.logging import configure_logging
from app.routers import experiments, theory

logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Startup and shutdown events for the application."""
    configure_logging(settings.log_level)
    logger.info(f"Simulator API starting (environment={settings.environment}, workers={settings.workers})")
    yield
    logger.info("Shutting down...")


app = FastAPI(
    title="SA-PEF Simulator",
    lifespan=lifespan
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(theory.router, prefix="/api/theory", tags=["Theory"])
app.include_router(experiments.router, prefix="/api/experiments", tags=["Experiments"])


@app.get("/health")
async def health_check():
    return {"status": "ok"}
