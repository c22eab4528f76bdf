"""Text vocabulary: eight reserved delimiters, a digit sub-vocabulary,
punctuation, and the closed template lexicon."""

from __future__ import annotations

import enum

from . import templates


class Delimiter(enum.IntEnum):
    """Segment framing tokens; ids sit below all word ids."""

    BOI = 0
    EOI = 1
    BOS = 2
    EOS = 3
    BOR = 4
    EOR = 5
    BOA = 6
    EOA = 7


_PUNCT = ("[", "]", ",", "?", ".")
_DIGITS = tuple(str(d) for d in range(10))


class Vocab:
    """id layout: delimiters 0-7, digits, punctuation, then sorted words."""

    def __init__(self):
        self._id_of: dict[str, int] = {}
        self._word_of: dict[int, str] = {}
        next_id = len(Delimiter)
        for tok in _DIGITS + _PUNCT + tuple(templates.lexicon_words()):
            self._id_of[tok] = next_id
            self._word_of[next_id] = tok
            next_id += 1
        self.size = next_id
        self.first_word_id = len(Delimiter)

    def encode(self, text: str) -> list[int]:
        ids = []
        for tok in templates.tokenize_text(text):
            tid = self._id_of.get(tok)
            if tid is None:
                raise KeyError(f"token {tok!r} is outside the closed lexicon")
            ids.append(tid)
        return ids

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i < self.first_word_id:
                words.append(f"[{Delimiter(i).name}]")
            else:
                words.append(self._word_of[i])
        return " ".join(words)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, tok: str) -> bool:
        return tok in self._id_of


VOCAB = Vocab()
