from pydantic import BaseModel, Field


class ScoreRequest(BaseModel):
    """Model for entailment scoring requests."""
    premise: str = Field(..., description="Reference sentence assumed true")
    hypothesis: str = Field(..., description="Generated caption to score")


class ScoreResponse(BaseModel):
    """Model for entailment scoring responses."""
    score: float = Field(..., ge=0.0, le=1.0)
