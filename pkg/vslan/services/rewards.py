# vslan/services/rewards.py
"""
Sentence rewards for self-critical training: CIDEr against the training
references, or an entailment score from a remote scorer over HTTP.
"""
import asyncio
import logging
from typing import List, Optional, Protocol, Sequence, Tuple

import httpx
import numpy as np
from pydantic import ValidationError

from vslan.core.config import RewardConfig, settings
from vslan.core.exceptions import RewardProtocolError, RewardUnavailableError, SequenceError
from vslan.models.scoring import ScoreRequest, ScoreResponse
from vslan.services.metrics import CorpusStats, cider
from vslan.utils.text import TextLike

logger = logging.getLogger(__name__)


def cider_reward(candidate: TextLike, references: Sequence[TextLike], corpus_stats: CorpusStats) -> float:
    if not references:
        raise SequenceError("cider_reward needs at least one reference")
    return cider(candidate, references, corpus_stats)


def _score_url(endpoint: str) -> str:
    return endpoint.rstrip("/") + "/score"


def _parse_score(response: httpx.Response) -> float:
    try:
        return ScoreResponse.model_validate_json(response.content).score
    except ValidationError as e:
        raise RewardProtocolError(f"malformed scorer response {response.text[:200]!r}: {e}") from e


def remote_entailment_reward(
    candidate: str,
    premise: str,
    endpoint: str,
    timeout: Optional[float] = None,
    retries: Optional[int] = None,
) -> float:
    """POST {premise, hypothesis} to <endpoint>/score; one retry on timeout or HTTP failure."""
    timeout = settings.SCORER_TIMEOUT_S if timeout is None else timeout
    retries = settings.SCORER_RETRIES if retries is None else retries
    body = ScoreRequest(premise=premise, hypothesis=candidate).model_dump()
    last_error: Optional[Exception] = None
    with httpx.Client(timeout=timeout) as client:
        for attempt in range(retries + 1):
            try:
                response = client.post(_score_url(endpoint), json=body)
                response.raise_for_status()
            except httpx.HTTPError as e:
                last_error = e
                logger.warning(f"scorer attempt {attempt + 1} failed: {e!r}")
                continue
            return _parse_score(response)
    raise RewardUnavailableError(f"entailment scorer at {endpoint} unavailable: {last_error!r}")


async def _score_one(client: httpx.AsyncClient, url: str, body: dict, retries: int) -> float:
    last_error: Optional[Exception] = None
    for attempt in range(retries + 1):
        try:
            response = await client.post(url, json=body)
            response.raise_for_status()
        except httpx.HTTPError as e:
            last_error = e
            logger.warning(f"scorer attempt {attempt + 1} failed: {e!r}")
            continue
        return _parse_score(response)
    raise RewardUnavailableError(f"entailment scorer at {url} unavailable: {last_error!r}")


async def remote_entailment_rewards(
    pairs: Sequence[Tuple[str, str]],
    endpoint: str,
    timeout: Optional[float] = None,
    retries: Optional[int] = None,
) -> List[float]:
    """Score (candidate, premise) pairs concurrently; the first failure propagates."""
    timeout = settings.SCORER_TIMEOUT_S if timeout is None else timeout
    retries = settings.SCORER_RETRIES if retries is None else retries
    url = _score_url(endpoint)
    async with httpx.AsyncClient(timeout=timeout) as client:
        tasks = [
            _score_one(client, url, ScoreRequest(premise=premise, hypothesis=candidate).model_dump(), retries)
            for candidate, premise in pairs
        ]
        return list(await asyncio.gather(*tasks))


class RewardProvider(Protocol):
    kind: str

    def score(self, candidates: Sequence[str], references: Sequence[Sequence[str]],
              rng: np.random.Generator) -> np.ndarray:
        ...


class CiderReward:
    kind = "builtin-cider"

    def __init__(self, stats: CorpusStats):
        self.stats = stats

    def score(self, candidates, references, rng):
        return np.array([cider_reward(c, refs, self.stats) for c, refs in zip(candidates, references)])


class EntailmentReward:
    """Premise is one reference drawn at random per candidate."""
    kind = "remote-entailment"

    def __init__(self, endpoint: str, timeout: Optional[float] = None, retries: Optional[int] = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries

    def score(self, candidates, references, rng):
        pairs = [(c, refs[int(rng.integers(len(refs)))]) for c, refs in zip(candidates, references)]
        scores = asyncio.run(remote_entailment_rewards(pairs, self.endpoint, self.timeout, self.retries))
        return np.array(scores)


def build_reward_provider(config: RewardConfig, reference_sets: Sequence[Sequence[str]]) -> RewardProvider:
    if config.kind == "remote-entailment":
        logger.info(f"using remote entailment reward at {config.endpoint}")
        return EntailmentReward(config.endpoint)
    return CiderReward(CorpusStats.from_references(reference_sets))
