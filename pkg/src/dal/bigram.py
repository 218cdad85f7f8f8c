"""Add-k smoothed bigram language model over token ids.

The event space is every id except PAD (id 0), so ``V = vocab_size - 1``.
BOS (id 1) is only ever a context: it receives smoothing mass but is never
counted as an outcome. Sequences are scored with a leading BOS and a
trailing EOS, natural log throughout.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .data import BOS, EOS, PAD


@dataclass(frozen=True)
class BigramLM:
    vocab_size: int
    bigram_counts: dict  # (prev, next) -> count
    context_counts: dict  # prev -> count
    k: float = 1.0

    @property
    def n_events(self) -> int:
        return self.vocab_size - 1

    def prob(self, prev: int, nxt: int) -> float:
        return ((self.bigram_counts.get((prev, nxt), 0) + self.k)
                / (self.context_counts.get(prev, 0) + self.k * self.n_events))

    def log_prob(self, prev: int, nxt: int) -> float:
        return math.log(self.prob(prev, nxt))

    def _check(self, seq):
        for i in seq:
            if not 0 <= i < self.vocab_size or i in (PAD, BOS):
                raise ValueError(f"invalid token id {i} for bigram model of vocab size {self.vocab_size}")

    def sequence_log_prob(self, seq: Sequence[int], eos: bool = True) -> float:
        """log P(seq): BOS -> w1 -> ... -> wn (-> EOS)."""
        seq = tuple(seq)
        if not seq and not eos:
            raise ValueError("empty sequence")
        self._check(seq)
        path = (BOS,) + seq + ((EOS,) if eos else ())
        return float(sum(self.log_prob(a, b) for a, b in zip(path, path[1:])))

    @cached_property
    def log_table(self) -> np.ndarray:
        """Dense ``log P(next | prev)``, rows indexed by prev; PAD column is ``-inf``."""
        counts = np.zeros((self.vocab_size, self.vocab_size))
        for (p, w), c in self.bigram_counts.items():
            counts[p, w] = c
        ctx = counts.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            table = np.log((counts + self.k) / (ctx + self.k * self.n_events))
        table[:, PAD] = -np.inf
        return table

    def next_log_probs(self, prev: int) -> np.ndarray:
        return self.log_table[prev]

    def to_arrays(self) -> dict[str, np.ndarray]:
        keys = sorted(self.bigram_counts)
        pairs = np.array(keys, dtype=np.float64).reshape(-1, 2)
        counts = np.array([self.bigram_counts[k] for k in keys], dtype=np.float64)
        return {"pairs": pairs, "counts": counts,
                "meta": np.array([self.vocab_size, self.k], dtype=np.float64)}

    @classmethod
    def from_arrays(cls, arrs: dict[str, np.ndarray]) -> "BigramLM":
        vocab_size, k = int(arrs["meta"][0]), float(arrs["meta"][1])
        bigrams = {(int(a), int(b)): int(c) for (a, b), c in zip(arrs["pairs"], arrs["counts"])}
        ctx = Counter()
        for (a, _), c in bigrams.items():
            ctx[a] += c
        return cls(vocab_size, bigrams, dict(ctx), k)


def fit(sequences: Sequence[Sequence[int]], vocab_size: int, k: float = 1.0) -> BigramLM:
    if k <= 0:
        raise ValueError("smoothing k must be positive")
    if not sequences:
        raise ValueError("cannot fit a language model on no sequences")
    bigrams = Counter()
    for seq in sequences:
        path = (BOS,) + tuple(seq) + (EOS,)
        for i in path[1:]:
            if not 0 <= i < vocab_size or i in (PAD, BOS):
                raise ValueError(f"invalid token id {i}")
        bigrams.update(zip(path, path[1:]))
    ctx = Counter()
    for (a, _), c in bigrams.items():
        ctx[a] += c
    return BigramLM(vocab_size, dict(bigrams), dict(ctx), float(k))


def sequence_log_prob(lm: BigramLM, seq: Sequence[int]) -> float:
    return lm.sequence_log_prob(seq)
