"""Word-level NL+PL tokenizer, shared vocabulary and pair encoding."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

PAD, BOS, SEP, EOS, MASK, UNK = range(6)
SPECIAL_TOKENS = ("<pad>", "<s>", "<sep>", "</s>", "<mask>", "<unk>")
NUM_SPECIAL = len(SPECIAL_TOKENS)
MIN_SEQUENCE_LENGTH = 8

_WORD_OR_PUNCT = re.compile(r"[^\W_]+|_+|[^\w\s]")
_SUBWORD = re.compile(r"[A-Z]+(?![a-z])|[A-Z]?[a-z]+|\d+|[^\W\d_A-Za-z]+")


def tokenize_text(text: str) -> list[str]:
    """Split on whitespace and punctuation, then on camelCase / snake_case.

    Case is preserved; each punctuation mark is its own token and underscores
    only separate identifier parts.

    >>> tokenize_text("getFooBar(x)")
    ['get', 'Foo', 'Bar', '(', 'x', ')']
    """
    tokens = []
    for piece in _WORD_OR_PUNCT.findall(text):
        if piece[0] == "_":
            continue
        if piece[0].isalnum():
            tokens.extend(_SUBWORD.findall(piece))
        else:
            tokens.append(piece)
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:NUM_SPECIAL] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens in fixed order")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")
        object.__setattr__(self, "ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        ids = self.ids
        return [ids.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def train_vocabulary(corpora: Iterable[str], size: int) -> Vocabulary:
    """Keep the ``size - 6`` most frequent tokens (ties lexicographic) after the specials."""
    if size <= NUM_SPECIAL:
        raise ValueError(f"vocabulary size must exceed {NUM_SPECIAL}")
    counts = Counter()
    for text in corpora:
        counts.update(tokenize_text(text))
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(SPECIAL_TOKENS + tuple(t for t, _ in ranked[: size - NUM_SPECIAL]))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    sep_index: int

    @property
    def eos_index(self) -> int:
        return self.ids.index(EOS)

    @property
    def code_span(self) -> tuple[int, int]:
        """Half-open index range of the code segment."""
        return self.sep_index + 1, self.eos_index

    def __len__(self) -> int:
        return len(self.ids)


def encode_pair(bug_text: str, code_text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Lay out ``BOS bug SEP code EOS PAD...``; code is truncated before bug text."""
    bug = vocab.encode_tokens(tokenize_text(bug_text))
    code = vocab.encode_tokens(tokenize_text(code_text))
    return encode_ids(bug, code, max_len)


def encode_ids(bug: Sequence[int], code: Sequence[int], max_len: int) -> TokenSequence:
    if max_len < MIN_SEQUENCE_LENGTH:
        raise ValueError(f"max_len must be at least {MIN_SEQUENCE_LENGTH}")
    budget = max_len - 3
    bug = list(bug[:budget])
    code = list(code[: budget - len(bug)])
    ids = [BOS, *bug, SEP, *code, EOS]
    n = len(ids)
    ids.extend([PAD] * (max_len - n))
    return TokenSequence(tuple(ids), tuple([1] * n + [0] * (max_len - n)), len(bug) + 1)


@dataclass(frozen=True)
class TokenDistribution:
    counts: dict[str, int]
    total: int

    def __post_init__(self):
        if self.total != sum(self.counts.values()):
            raise ValueError("total must equal the sum of counts")


def token_frequency(texts: Iterable[str]) -> TokenDistribution:
    counts = Counter()
    for text in texts:
        counts.update(tokenize_text(text))
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    return TokenDistribution(dict(counts), sum(counts.values()))
