# vslan/models/vocab.py
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

from vslan.core.exceptions import VocabularyError
from vslan.utils.text import tokenize

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")

POS_PAD, POS_BOS, POS_EOS = 0, 1, 2
UNIVERSAL_TAGS = ("NOUN", "VERB", "DET", "ADJ", "ADV", "ADP", "PRON", "CONJ", "NUM", "PRT", "X", "PUNCT")


class Vocabulary:
    """Word index with the control tokens PAD, UNK, BOS, EOS at indices 0-3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise VocabularyError(f"reserved tokens must occupy indices 0-3 as {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            duplicates = sorted(t for t, n in Counter(tokens).items() if n > 1)
            raise VocabularyError(f"duplicate vocabulary tokens: {duplicates}")
        self.tokens = tokens
        self._index: Dict[str, int] = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, captions: Iterable[str], max_size: Optional[int] = None) -> "Vocabulary":
        """Keep the most frequent words (count desc, then alphabetical)."""
        counts = Counter(word for caption in captions for word in tokenize(caption))
        words = sorted(counts, key=lambda w: (-counts[w], w))
        words = [w for w in words if w not in RESERVED_TOKENS]
        if max_size is not None:
            words = words[:max(max_size - len(RESERVED_TOKENS), 0)]
        return cls(list(RESERVED_TOKENS) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def index(self, word: str) -> int:
        return self._index.get(word, UNK)

    def encode(self, text: Union[str, Sequence[str]], add_markers: bool = True) -> List[int]:
        ids = [self.index(w) for w in tokenize(text)]
        return [BOS] + ids + [EOS] if add_markers else ids

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(lines)


class PosTagset:
    """Twelve universal tags plus PAD, BOS, EOS."""

    def __init__(self):
        self.tags = ["<pad>", "<bos>", "<eos>"] + list(UNIVERSAL_TAGS)
        self._index = {t: i for i, t in enumerate(self.tags)}

    def __len__(self) -> int:
        return len(self.tags)

    def encode(self, tags: Sequence[str], add_markers: bool = True) -> List[int]:
        try:
            ids = [self._index[t] for t in tags]
        except KeyError as e:
            raise VocabularyError(f"unknown POS tag {e.args[0]!r}") from e
        return [POS_BOS] + ids + [POS_EOS] if add_markers else ids

    def decode(self, ids: Iterable[int]) -> List[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == POS_EOS:
                break
            if i in (POS_PAD, POS_BOS):
                continue
            out.append(self.tags[i])
        return out
