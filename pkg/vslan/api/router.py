# vslan/api/router.py
import logging

from fastapi import APIRouter

from vslan import __version__
from vslan.api.endpoints import score

logger = logging.getLogger(__name__)

# Create main router
router = APIRouter()

# Include sub-routers
router.include_router(score.router, tags=["scoring"])


@router.get("/", tags=["info"])
async def get_api_info():
    """Get basic information about the scorer."""
    return {
        "name": "Mock Entailment Scorer",
        "version": __version__,
        "endpoints": {"score": "/score", "health": "/health"},
    }
