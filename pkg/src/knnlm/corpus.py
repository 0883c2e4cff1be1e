"""Vocabulary and corpus text I/O.

Corpus files are UTF-8 text, whitespace-tokenized, one document per line.
Vocabulary files are token-per-line; the line number is the token id.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InvalidInputError

BOS_TOKEN = "<bos>"
UNK_TOKEN = "<unk>"


@dataclass
class Vocabulary:
    """Dense bidirectional token <-> id map with reserved BOS/UNK entries."""

    tokens: list[str]
    index: dict[str, int]

    @classmethod
    def build(cls, docs: Iterable[Sequence[str]]) -> "Vocabulary":
        """Build a vocabulary from tokenized documents.

        Reserved tokens come first; the rest are ordered by descending
        frequency, ties broken lexicographically, so the mapping is a pure
        function of the corpus.
        """
        counts: Counter[str] = Counter()
        for doc in docs:
            counts.update(doc)
        tokens = [BOS_TOKEN, UNK_TOKEN]
        seen = set(tokens)
        for tok, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
            if tok not in seen:
                tokens.append(tok)
                seen.add(tok)
        return cls(tokens=tokens, index={t: i for i, t in enumerate(tokens)})

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        index = {t: i for i, t in enumerate(tokens)}
        if BOS_TOKEN not in index or UNK_TOKEN not in index:
            raise InvalidInputError(
                f"vocabulary must contain the reserved tokens {BOS_TOKEN!r} and {UNK_TOKEN!r}"
            )
        if len(index) != len(tokens):
            raise InvalidInputError("vocabulary contains duplicate tokens")
        return cls(tokens=list(tokens), index=index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def bos_id(self) -> int:
        return self.index[BOS_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.index[UNK_TOKEN]

    def encode(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def encode_doc(self, doc: Sequence[str]) -> list[int]:
        unk = self.unk_id
        idx = self.index
        return [idx.get(t, unk) for t in doc]

    def decode(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise InvalidInputError(f"token id {token_id} outside vocabulary of size {len(self)}")
        return self.tokens[token_id]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_tokens([ln for ln in lines if ln])


def read_corpus(path: str | Path) -> list[list[str]]:
    """Read a corpus file into a list of tokenized documents (blank lines skipped)."""
    docs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        toks = line.split()
        if toks:
            docs.append(toks)
    return docs


def write_corpus(docs: Iterable[Sequence[str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(" ".join(doc) + "\n")


def encode_corpus(vocab: Vocabulary, docs: Iterable[Sequence[str]]) -> list[list[int]]:
    return [vocab.encode_doc(doc) for doc in docs]
