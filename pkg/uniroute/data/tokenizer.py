from __future__ import annotations

from typing import Dict, Iterable, List, Sequence, Tuple

from uniroute.domain.exception import UniRouteError


class WordTokenizer:
    """Whitespace word tokenizer; the id of a word is its rank in the sorted
    vocabulary.

    The vocabulary file is the sorted word list, one word per line, so the
    line number is the id.
    """

    def __init__(self, words: Iterable[str]) -> None:
        self._words: Tuple[str, ...] = tuple(sorted(set(words)))
        self._ids: Dict[str, int] = {w: i for i, w in enumerate(self._words)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> WordTokenizer:
        return cls(word for text in texts for word in text.split())

    @classmethod
    def load(cls, path: str) -> WordTokenizer:
        with open(path, encoding="utf-8") as stream:
            words = [line.rstrip("\n") for line in stream if line.strip()]
        return cls(words)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as stream:
            for word in self._words:
                stream.write(word + "\n")

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    @property
    def words(self) -> Tuple[str, ...]:
        return self._words

    def encode(self, text: str) -> List[int]:
        ids = []
        for word in text.split():
            if word not in self._ids:
                raise UnknownWordError(word)
            ids.append(self._ids[word])
        return ids

    def decode(self, ids: Sequence[int], strict: bool = True) -> str:
        """With strict=False ids outside the vocabulary render as `<#id>`."""
        words = []
        for i in ids:
            if 0 <= i < len(self._words):
                words.append(self._words[i])
            elif strict:
                raise UnknownWordError(f"#{i}")
            else:
                words.append(f"<#{i}>")
        return " ".join(words)


class UnknownWordError(UniRouteError):
    def __init__(self, word: str) -> None:
        super().__init__(f"{word!r} isn't in the vocabulary", "UNKNOWN_WORD")
