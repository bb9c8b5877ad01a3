# vslan/services/metrics.py
"""
Caption metrics: BLEU-4, CIDEr, ROUGE-L for quality and mBleu-4, Div-n for
diversity. Text goes through ``vslan.utils.text.tokenize``; token lists (words
or ids) are accepted as-is.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from vslan.core.exceptions import SequenceError
from vslan.models.data import PredictionRecord
from vslan.utils.text import TextLike, tokenize

logger = logging.getLogger(__name__)

MAX_N = 4
ROUGE_BETA_SQ = 1.2
CIDER_SCALE = 10.0


@dataclass
class NGramCounts:
    n: int
    counts: Counter = field(default_factory=Counter)


@dataclass
class CorpusStats:
    """Document frequencies of the reference sets; one reference set is one document."""
    doc_freq: Dict[int, Counter]
    num_docs: int

    @classmethod
    def from_references(cls, reference_sets: Sequence[Sequence[TextLike]], max_n: int = MAX_N) -> "CorpusStats":
        doc_freq = {n: Counter() for n in range(1, max_n + 1)}
        for refs in reference_sets:
            for n in range(1, max_n + 1):
                seen = set()
                for ref in refs:
                    seen.update(ngram_counts(tokenize(ref), n).counts)
                doc_freq[n].update(seen)
        return cls(doc_freq=doc_freq, num_docs=len(reference_sets))

    def idf(self, ngram: Tuple, n: int) -> float:
        # scale-free in the corpus size for every n-gram the references contain
        return 1.0 + math.log(self.num_docs / max(self.doc_freq[n].get(ngram, 0), 1))


def ngram_counts(tokens: Sequence, n: int) -> NGramCounts:
    tokens = list(tokens)
    return NGramCounts(n=n, counts=Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)))


# ----------------------------------------------------------------------------
# BLEU
# ----------------------------------------------------------------------------

def _closest_ref_length(cand_len: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def bleu4(candidates: Sequence[TextLike], references: Sequence[Sequence[TextLike]]) -> float:
    """
    Corpus BLEU-4 with clipped n-gram precisions, uniform weights and the
    brevity penalty against the closest reference length. A zero match count
    at n >= 2 is smoothed to (0 + 1) / (guesses + 1).
    """
    if not candidates:
        raise SequenceError("bleu4 needs at least one candidate")
    if len(candidates) != len(references):
        raise SequenceError(f"{len(candidates)} candidates but {len(references)} reference sets")
    matches = [0] * MAX_N
    guesses = [0] * MAX_N
    cand_total = ref_total = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise SequenceError("every candidate needs at least one reference")
        cand_tokens = tokenize(cand)
        ref_tokens = [tokenize(r) for r in refs]
        cand_total += len(cand_tokens)
        ref_total += _closest_ref_length(len(cand_tokens), [len(r) for r in ref_tokens])
        for n in range(1, MAX_N + 1):
            counts = ngram_counts(cand_tokens, n).counts
            max_ref = Counter()
            for r in ref_tokens:
                max_ref |= ngram_counts(r, n).counts
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            guesses[n - 1] += max(len(cand_tokens) - n + 1, 0)

    if cand_total == 0 or matches[0] == 0:
        return 0.0
    log_precision = math.log(matches[0] / guesses[0])
    for n in range(2, MAX_N + 1):
        m, g = matches[n - 1], guesses[n - 1]
        log_precision += math.log((m + 1) / (g + 1)) if m == 0 else math.log(m / g)
    brevity = 1.0 if cand_total > ref_total else math.exp(1.0 - ref_total / cand_total)
    return brevity * math.exp(log_precision / MAX_N)


# ----------------------------------------------------------------------------
# CIDEr
# ----------------------------------------------------------------------------

def _tfidf(tokens: Sequence, n: int, stats: CorpusStats) -> Dict[Tuple, float]:
    return {g: c * stats.idf(g, n) for g, c in ngram_counts(tokens, n).counts.items()}


def _cosine(a: Dict[Tuple, float], b: Dict[Tuple, float]) -> float:
    norm_a = math.sqrt(sum(v * v for v in a.values()))
    norm_b = math.sqrt(sum(v * v for v in b.values()))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (norm_a * norm_b)


def cider(candidate: TextLike, references: Sequence[TextLike], stats: CorpusStats) -> float:
    """Plain CIDEr (no length penalty): mean over n of the reference-averaged TF-IDF cosine, times 10."""
    if stats.num_docs == 0:
        raise SequenceError("CIDEr statistics are empty")
    if not references:
        raise SequenceError("CIDEr needs at least one reference")
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    total = 0.0
    for n in range(1, MAX_N + 1):
        cand_vec = _tfidf(cand, n, stats)
        total += sum(_cosine(cand_vec, _tfidf(r, n, stats)) for r in refs) / len(refs)
    return CIDER_SCALE * total / MAX_N


def corpus_cider(
    candidates: Sequence[TextLike],
    references: Sequence[Sequence[TextLike]],
    stats: Optional[CorpusStats] = None,
) -> float:
    if not candidates:
        raise SequenceError("corpus_cider needs at least one candidate")
    stats = stats or CorpusStats.from_references(references)
    return sum(cider(c, r, stats) for c, r in zip(candidates, references)) / len(candidates)


# ----------------------------------------------------------------------------
# ROUGE-L
# ----------------------------------------------------------------------------

def _lcs_length(a: Sequence, b: Sequence) -> int:
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            current.append(previous[j] + 1 if x == y else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(candidate: TextLike, references: Sequence[TextLike]) -> float:
    """LCS F-measure (beta squared 1.2) against each reference; the best one counts."""
    cand = tokenize(candidate)
    best = 0.0
    for ref in references:
        ref = tokenize(ref)
        lcs = _lcs_length(cand, ref)
        if lcs == 0:
            continue
        precision, recall = lcs / len(cand), lcs / len(ref)
        score = (1 + ROUGE_BETA_SQ) * precision * recall / (recall + ROUGE_BETA_SQ * precision)
        best = max(best, score)
    return best


# ----------------------------------------------------------------------------
# diversity
# ----------------------------------------------------------------------------

def _video_sets(captions_per_video) -> List[Sequence[TextLike]]:
    """Accept one video's captions (a flat list of strings) or a list of such lists."""
    if captions_per_video and isinstance(captions_per_video[0], str):
        return [captions_per_video]
    return list(captions_per_video)


def video_mbleu4(captions: Sequence[TextLike]) -> float:
    """Mean BLEU-4 of each caption against the others of the same video."""
    if len(captions) < 2:
        raise SequenceError("mBleu-4 needs at least two captions per video")
    scores = [bleu4([c], [list(captions[:i]) + list(captions[i + 1:])]) for i, c in enumerate(captions)]
    return sum(scores) / len(scores)


def mbleu4(captions_per_video) -> float:
    """Cross-caption BLEU-4 averaged over captions and videos; lower means more diverse."""
    videos = _video_sets(captions_per_video)
    if not videos:
        raise SequenceError("mBleu-4 needs at least one video")
    return sum(video_mbleu4(v) for v in videos) / len(videos)


def div_n(captions_per_video, n: int) -> float:
    """Distinct n-grams over total n-grams per video, averaged over videos that have any n-grams."""
    ratios = []
    for captions in _video_sets(captions_per_video):
        distinct, total = set(), 0
        for caption in captions:
            counts = ngram_counts(tokenize(caption), n).counts
            distinct.update(counts)
            total += sum(counts.values())
        if total:
            ratios.append(len(distinct) / total)
    return sum(ratios) / len(ratios) if ratios else 0.0


def evaluate_predictions(records: Sequence[PredictionRecord]) -> Dict[str, Optional[float]]:
    """
    Metrics table for a predictions file. Quality metrics use each video's
    first caption; diversity metrics use all of them (mBleu-4 only over videos
    with two or more captions, null when there are none).
    """
    if not records:
        raise SequenceError("no predictions to evaluate")
    candidates = [r.captions[0] for r in records]
    references = [r.references for r in records]
    stats = CorpusStats.from_references(references)
    multi = [r.captions for r in records if len(r.captions) >= 2]
    all_captions = [r.captions for r in records]
    table = {
        "bleu4": bleu4(candidates, references),
        "cider": corpus_cider(candidates, references, stats),
        "rougeL": sum(rouge_l(c, refs) for c, refs in zip(candidates, references)) / len(records),
        "mbleu4": mbleu4(multi) if multi else None,
        "div1": div_n(all_captions, 1),
        "div2": div_n(all_captions, 2),
    }
    logger.info(f"evaluated {len(records)} videos")
    return table
