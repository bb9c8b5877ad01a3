# vslan/main.py
import logging
from contextlib import asynccontextmanager

import uvicorn
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from vslan import __version__
from vslan.api.router import router
from vslan.core.config import settings
from vslan.utils.logging import configure_logging

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    # Startup
    logger.info("Starting mock entailment scorer...")
    yield
    # Shutdown
    logger.info("Shutting down mock entailment scorer...")


app = FastAPI(
    title="Mock Entailment Scorer",
    description="Deterministic token-overlap stand-in for an entailment model, used as an RL reward in tests",
    version=__version__,
    lifespan=lifespan,
)


@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request: Request, exc: RequestValidationError):
    """Malformed bodies are a client error: 400, not FastAPI's default 422."""
    logger.debug(f"rejected request to {request.url.path}: {exc.errors()}")
    return JSONResponse(status_code=400, content={"detail": "malformed request body"})


# Health check endpoint
@app.get("/health", tags=["health"])
async def health_check():
    return {"status": "ok", "version": __version__}


# Register routes
app.include_router(router)


def serve(port: int = None, host: str = None) -> None:
    """Run the scorer in the foreground."""
    configure_logging()
    uvicorn.run(app, host=host or settings.SCORER_HOST, port=port or settings.SCORER_PORT, log_config=None)


if __name__ == "__main__":
    serve()
