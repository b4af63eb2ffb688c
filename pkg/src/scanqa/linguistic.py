"""Question tokenizer: frequent whole words with single-character fallbacks."""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

PAD, UNK, CLS, SEP, APP, GEO = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "<APP>", "<GEO>"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, APP, GEO)
_PUNCT_TO_SPACE = str.maketrans(string.punctuation, " " * len(string.punctuation))


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace; ASCII punctuation acts as a separator and is dropped."""
    return text.lower().translate(_PUNCT_TO_SPACE).split()


@dataclass(frozen=True)
class TokenVocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        missing = [t for t in SPECIAL_TOKENS if t not in self.tokens]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids[token]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    @property
    def cls_id(self) -> int:
        return self._ids[CLS]

    @property
    def sep_id(self) -> int:
        return self._ids[SEP]

    @property
    def app_id(self) -> int:
        return self._ids[APP]

    @property
    def geo_id(self) -> int:
        return self._ids[GEO]

    @property
    def max_token_len(self) -> int:
        return max(len(t) for t in self.tokens if t not in SPECIAL_TOKENS)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TokenVocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(text.split("\n")[:-1]))


@dataclass(frozen=True)
class TokenizedQuestion:
    token_ids: tuple[int, ...]
    source: str

    def __len__(self) -> int:
        return len(self.token_ids)


def build_vocabulary(corpus: Iterable[str], max_size: int = 4096) -> TokenVocabulary:
    """Special tokens, then every character seen (plus a-z), then words by frequency.

    Word ties are broken alphabetically, so the result does not depend on corpus order.
    """
    if max_size < len(SPECIAL_TOKENS) + 26:
        raise ValueError(f"max_size must be at least {len(SPECIAL_TOKENS) + 26}, got {max_size}")
    counts: Counter = Counter()
    for q in corpus:
        counts.update(split_words(q))
    chars = set(string.ascii_lowercase)
    for w in counts:
        chars.update(w)
    chars = sorted(chars)
    if len(SPECIAL_TOKENS) + len(chars) > max_size:
        raise ValueError(f"max_size {max_size} cannot hold {len(chars)} character fallbacks")
    tokens = list(SPECIAL_TOKENS) + chars
    taken = set(tokens)
    for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if len(tokens) >= max_size:
            break
        if w not in taken:
            tokens.append(w)
            taken.add(w)
    return TokenVocabulary(tuple(tokens))


def _segment(word: str, vocab: TokenVocabulary) -> list[int]:
    ids = []
    i = 0
    longest = vocab.max_token_len
    while i < len(word):
        for j in range(min(len(word), i + longest), i, -1):
            piece = word[i:j]
            if piece in vocab:
                ids.append(vocab.id(piece))
                i = j
                break
        else:
            ids.append(vocab.unk_id)
            i += 1
    return ids


def tokenize(q: str, vocab: TokenVocabulary) -> TokenizedQuestion:
    """Greedy longest-match-first segmentation of every word; unknown characters become [UNK]."""
    ids: list[int] = []
    for w in split_words(q):
        ids.extend(_segment(w, vocab))
    if not ids:
        ids = [vocab.unk_id]
    return TokenizedQuestion(tuple(ids), q)


def detokenize(tq: TokenizedQuestion, vocab: TokenVocabulary) -> list[str]:
    return [vocab.tokens[i] for i in tq.token_ids]
