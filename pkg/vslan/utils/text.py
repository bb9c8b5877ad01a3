# vslan/utils/text.py
import re
from typing import List, Sequence, Union

_PUNCTUATION = re.compile(r"[^\w\s]")

TextLike = Union[str, Sequence[str]]


def tokenize(text: TextLike) -> List[str]:
    """Lowercase, strip punctuation, split on spaces. Token lists pass through unchanged."""
    if not isinstance(text, str):
        return list(text)
    cleaned = _PUNCTUATION.sub("", text.lower())
    return [token for token in cleaned.split(" ") if token]
