"""Vocabulary, corpus files, batching and the synthetic many-to-one corpus."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")

TokenSeq = tuple[int, ...]


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    itos: tuple[str, ...]
    stoi: dict[str, int] = field(compare=False, repr=False)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocab":
        itos = RESERVED + tuple(t for t in tokens if t not in RESERVED)
        if len(set(itos)) != len(itos):
            raise ValueError("duplicate tokens in vocabulary")
        return cls(itos, {t: i for i, t in enumerate(itos)})

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> TokenSeq:
        return tuple(self.stoi.get(tok, UNK) for tok in text.split())

    def decode(self, seq: Sequence[int]) -> str:
        n = len(self.itos)
        for i in seq:
            if not 0 <= i < n:
                raise ValueError(f"token id {i} out of range for vocabulary of size {n}")
        return " ".join(self.itos[i] for i in seq)


def build_vocab(raw_pairs: Sequence[tuple[str, str]], min_count: int = 1, max_size: int = 2000) -> Vocab:
    """Whitespace-token vocabulary, most frequent first, ties lexicographic.

    ``max_size`` bounds the total size including the four reserved ids.
    """
    if not raw_pairs:
        raise CorpusError("cannot build a vocabulary from no text")
    if min_count < 1 or max_size < len(RESERVED):
        raise ValueError("need min_count >= 1 and max_size >= 4")
    counts = Counter()
    for q, r in raw_pairs:
        counts.update(q.split())
        counts.update(r.split())
    for tok in RESERVED:
        counts.pop(tok, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocab.from_tokens(kept[: max_size - len(RESERVED)])


def encode(text: str, vocab: Vocab) -> TokenSeq:
    return vocab.encode(text)


def decode(seq: Sequence[int], vocab: Vocab) -> str:
    return vocab.decode(seq)


@dataclass(frozen=True)
class QRPair:
    query: TokenSeq
    response: TokenSeq

    def __post_init__(self):
        if not self.query or not self.response:
            raise ValueError("query and response must both be non-empty")


@dataclass(frozen=True)
class Corpus:
    pairs: tuple[QRPair, ...]
    vocab: Vocab
    malformed: int = 0

    def __post_init__(self):
        n = len(self.vocab)
        for p in self.pairs:
            if max(p.query) >= n or max(p.response) >= n or min(p.query) < 0 or min(p.response) < 0:
                raise CorpusError("corpus contains ids outside the vocabulary")

    def __len__(self):
        return len(self.pairs)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for tok in self.vocab.itos:
            h.update(tok.encode("utf-8") + b"\n")
        for p in self.pairs:
            h.update(repr((p.query, p.response)).encode("ascii"))
        return h.hexdigest()[:16]

    def to_lines(self) -> list[str]:
        v = self.vocab
        return [f"{v.decode(p.query)}\t{v.decode(p.response)}" for p in self.pairs]


def _truncate(seq: TokenSeq, max_len: int | None) -> TokenSeq:
    return seq if max_len is None else seq[:max_len]


def load_corpus(path, vocab: Vocab | None = None, max_len: int | None = 20,
                min_count: int = 1, max_size: int = 2000) -> Corpus:
    """Read ``query<TAB>response`` lines; malformed lines are skipped and counted.

    A line with more than one TAB keeps the first field as the query and the
    TAB-joined remainder as the response. Utterances longer than ``max_len``
    tokens lose their tail.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise CorpusError(f"cannot read corpus {path}: {e}") from e
    raw, bad = [], 0
    for line in text.split("\n"):
        if not line.strip():
            continue
        if "\t" not in line:
            bad += 1
            continue
        q, r = line.split("\t", 1)
        if not q.split() or not r.split():
            bad += 1
            continue
        raw.append((q, r))
    if bad:
        logger.warning("skipped %d malformed line(s) in %s", bad, path)
    if not raw:
        raise CorpusError(f"no valid query/response lines in {path}")
    if vocab is None:
        vocab = build_vocab(raw, min_count=min_count, max_size=max_size)
    pairs = tuple(QRPair(_truncate(vocab.encode(q), max_len), _truncate(vocab.encode(r), max_len))
                  for q, r in raw)
    return Corpus(pairs, vocab, malformed=bad)


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text("".join(line + "\n" for line in corpus.to_lines()), encoding="utf-8")


@dataclass(frozen=True)
class SyntheticSpec:
    n_safe: int = 3
    m: int = 20
    n_diverse: int = 200
    alphabet: int = 50
    min_len: int = 4
    max_len: int = 7


def _alphabet_tokens(n: int) -> list[str]:
    return [f"w{i}" for i in range(n)]


def _distinct_utterances(rng: np.random.Generator, spec: SyntheticSpec, count: int,
                         taken: set) -> list[tuple[int, ...]]:
    out = []
    while len(out) < count:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        u = tuple(int(x) for x in rng.integers(0, spec.alphabet, size=length))
        if u not in taken:
            taken.add(u)
            out.append(u)
    return out


def synthesize_corpus(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> Corpus:
    """Corpus of ``n_safe`` responses shared by ``m`` queries each plus
    ``n_diverse`` one-to-one pairs; every utterance is a distinct token string."""
    if min(spec.n_safe, spec.m, spec.alphabet, spec.min_len) < 1 or spec.n_diverse < 0:
        raise ValueError("SyntheticSpec fields must be positive")
    if spec.max_len < spec.min_len:
        raise ValueError("max_len must be >= min_len")
    needed = spec.n_safe * (spec.m + 1) + 2 * spec.n_diverse
    space = sum(spec.alphabet ** L for L in range(spec.min_len, spec.max_len + 1))
    # rejection sampling needs headroom, not just enough strings
    if space < 2 * needed:
        raise ValueError(f"alphabet of {spec.alphabet} with lengths {spec.min_len}-{spec.max_len} "
                         f"is too small for {needed} distinct utterances")
    rng = np.random.default_rng(seed)
    taken: set = set()
    safe = _distinct_utterances(rng, spec, spec.n_safe, taken)
    safe_queries = _distinct_utterances(rng, spec, spec.n_safe * spec.m, taken)
    div_q = _distinct_utterances(rng, spec, spec.n_diverse, taken)
    div_r = _distinct_utterances(rng, spec, spec.n_diverse, taken)
    tokens = _alphabet_tokens(spec.alphabet)
    vocab = Vocab.from_tokens(tokens)
    off = len(RESERVED)
    ids = lambda u: tuple(off + x for x in u)  # noqa: E731
    pairs = [QRPair(ids(safe_queries[i * spec.m + j]), ids(safe[i]))
             for i in range(spec.n_safe) for j in range(spec.m)]
    pairs += [QRPair(ids(q), ids(r)) for q, r in zip(div_q, div_r)]
    return Corpus(tuple(pairs), vocab)


def synthesize_queries(spec: SyntheticSpec, count: int, seed: int, exclude: Corpus | None = None) -> list[TokenSeq]:
    """Fresh random queries over the synthetic alphabet, disjoint from ``exclude``."""
    rng = np.random.default_rng(seed)
    off = len(RESERVED)
    taken = set()
    if exclude is not None:
        for p in exclude.pairs:
            taken.add(tuple(i - off for i in p.query))
            taken.add(tuple(i - off for i in p.response))
    return [tuple(off + x for x in u) for u in _distinct_utterances(rng, spec, count, taken)]


def split_synthetic(corpus: Corpus) -> tuple[list[QRPair], list[QRPair], list[TokenSeq]]:
    """Separate shared-response pairs from one-to-one pairs.

    Returns ``(safe_pairs, diverse_pairs, safe_responses)``; a response is
    "safe" when more than one query maps to it.
    """
    counts = Counter(p.response for p in corpus.pairs)
    safe_responses = sorted(r for r, c in counts.items() if c > 1)
    safe = [p for p in corpus.pairs if counts[p.response] > 1]
    diverse = [p for p in corpus.pairs if counts[p.response] == 1]
    return safe, diverse, safe_responses


def batch_iter(corpus: Corpus | Sequence[QRPair], batch_size: int, shuffle_seed: int) -> Iterator[list[QRPair]]:
    """One epoch of batches in a seeded random order; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pairs = corpus.pairs if isinstance(corpus, Corpus) else tuple(corpus)
    order = np.random.default_rng(shuffle_seed).permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        yield [pairs[i] for i in order[start:start + batch_size]]
