"""Vocabulary / embedding-set data model and word-vector text I/O.

The text format is the usual word2vec one: a header ``"<count> <dim>"``
followed by one line per word, the token and then ``dim`` numbers.
Values are written with 17 significant digits so a save/load round trip
reproduces every float64 exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class EmbeddingFormatError(ValueError):
    """Raised when a word-vector file or matrix violates the format."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        index = {}
        for i, tok in enumerate(tokens):
            if not isinstance(tok, str) or not tok or any(c.isspace() for c in tok):
                raise EmbeddingFormatError(f"invalid token {tok!r} at position {i}")
            if tok in index:
                raise EmbeddingFormatError(f"duplicate token {tok!r}")
            index[tok] = i
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token) -> bool:
        return token in self.index

    def __iter__(self):
        return iter(self.tokens)


@dataclass(frozen=True)
class EmbeddingSet:
    vocab: Vocabulary
    matrix: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if not isinstance(self.vocab, Vocabulary):
            object.__setattr__(self, "vocab", Vocabulary(tuple(self.vocab)))
        m = np.array(self.matrix, dtype=np.float64, copy=True)
        if m.ndim != 2:
            raise EmbeddingFormatError(f"matrix must be 2-D, got shape {m.shape}")
        if m.shape[0] != len(self.vocab):
            raise EmbeddingFormatError(
                f"{m.shape[0]} rows for a vocabulary of {len(self.vocab)} tokens")
        if m.shape[1] <= 0:
            raise EmbeddingFormatError("embedding dimension must be positive")
        if not np.all(np.isfinite(m)):
            raise EmbeddingFormatError("embedding matrix contains non-finite values")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.vocab)

    def vector(self, token: str) -> np.ndarray:
        return self.matrix[self.vocab.index[token]]

    def restrict(self, vocab: Vocabulary | Sequence[str]) -> "EmbeddingSet":
        """Rows for ``vocab`` (every token must be present), in that order."""
        tokens = tuple(vocab)
        rows = [self.vocab.index[t] for t in tokens]
        return EmbeddingSet(Vocabulary(tokens), self.matrix[rows].reshape(len(rows), self.dim),
                            self.source_id)

    def with_matrix(self, matrix: np.ndarray, source_id: str | None = None) -> "EmbeddingSet":
        return EmbeddingSet(self.vocab, matrix,
                            self.source_id if source_id is None else source_id)


def load_embeddings(path: str | os.PathLike, source_id: str | None = None) -> EmbeddingSet:
    with open(path, "r", encoding="utf-8", newline="\n") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2:
            raise EmbeddingFormatError(f"malformed header {header!r}")
        try:
            count, dim = int(parts[0]), int(parts[1])
        except ValueError:
            raise EmbeddingFormatError(f"malformed header {header!r}") from None
        if count < 0 or dim <= 0:
            raise EmbeddingFormatError(f"malformed header {header!r}")

        tokens: list[str] = []
        matrix = np.empty((count, dim), dtype=np.float64)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            if len(tokens) == count:
                raise EmbeddingFormatError(f"more than {count} rows (line {lineno})")
            fields = line.split()
            if len(fields) != dim + 1:
                raise EmbeddingFormatError(
                    f"line {lineno}: expected {dim + 1} fields, got {len(fields)}")
            try:
                row = [float(x) for x in fields[1:]]
            except ValueError as exc:
                raise EmbeddingFormatError(f"line {lineno}: {exc}") from None
            matrix[len(tokens)] = row
            if not np.all(np.isfinite(matrix[len(tokens)])):
                raise EmbeddingFormatError(f"line {lineno}: non-finite value")
            tokens.append(fields[0])
    if len(tokens) != count:
        raise EmbeddingFormatError(f"header announces {count} rows, found {len(tokens)}")
    if source_id is None:
        source_id = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return EmbeddingSet(Vocabulary(tuple(tokens)), matrix, source_id)


def format_embeddings(emb: EmbeddingSet) -> str:
    lines = [f"{len(emb)} {emb.dim}"]
    for tok, row in zip(emb.vocab.tokens, emb.matrix):
        lines.append(tok + " " + " ".join(format(float(x), ".17g") for x in row))
    return "\n".join(lines) + "\n"


def save_embeddings(emb: EmbeddingSet, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_embeddings(emb))


def common_vocabulary(a: EmbeddingSet, b: EmbeddingSet) -> Vocabulary:
    """Tokens present in both sets, in ``a``'s order."""
    return Vocabulary(tuple(t for t in a.vocab.tokens if t in b.vocab.index))


def from_pairs(pairs: Iterable[tuple[str, Sequence[float]]], source_id: str = "",
               dim: int = 1) -> EmbeddingSet:
    """``dim`` only matters for an empty ``pairs``."""
    pairs = list(pairs)
    tokens = tuple(p[0] for p in pairs)
    matrix = np.array([p[1] for p in pairs], dtype=np.float64) if pairs else np.zeros((0, dim))
    return EmbeddingSet(Vocabulary(tokens), matrix, source_id)
