# vslan/api/endpoints/score.py
import logging
from collections import Counter

from fastapi import APIRouter

from vslan.models.scoring import ScoreRequest, ScoreResponse
from vslan.utils.text import tokenize

logger = logging.getLogger(__name__)

router = APIRouter()


def overlap_f1(premise: str, hypothesis: str) -> float:
    """Token-overlap F1 (multiset) after metric tokenization."""
    p, h = tokenize(premise), tokenize(hypothesis)
    common = sum((Counter(p) & Counter(h)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(h), common / len(p)
    return 2 * precision * recall / (precision + recall)


@router.post("/score", response_model=ScoreResponse)
async def score(request: ScoreRequest) -> ScoreResponse:
    """Score how well the hypothesis is supported by the premise."""
    value = overlap_f1(request.premise, request.hypothesis)
    logger.debug(f"scored {request.hypothesis!r} against {request.premise!r}: {value:.4f}")
    return ScoreResponse(score=value)
