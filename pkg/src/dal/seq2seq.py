"""GRU encoder / attention / GRU decoder generator.

One instance models ``P(target | source)`` in one direction. The decoder is
fed the previous token embedding concatenated with the previous attention
context; attention uses a bilinear ("general") score against the encoder
states, and the output layer projects ``[state; context]`` to the vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, no_grad
from .data import BOS, EOS, PAD, QRPair
from .layers import NEG_INF, gru_encode, gru_params, gru_step, pad_ids, uniform, zeros


@dataclass
class Seq2SeqParams:
    vocab_size: int
    emb_size: int
    hidden_size: int
    tensors: dict[str, Tensor]

    @classmethod
    def init(cls, vocab_size: int, emb_size: int = 32, hidden_size: int = 64, seed: int = 0) -> "Seq2SeqParams":
        rng = np.random.default_rng(seed)
        V, E, H = vocab_size, emb_size, hidden_size
        t = {"emb": uniform(rng, (V, E), "emb")}
        t.update(gru_params(rng, "enc", E, H))
        t.update(gru_params(rng, "dec", E + H, H))
        t["att"] = uniform(rng, (H, H), "att")
        t["out.W"] = uniform(rng, (2 * H, V), "out.W")
        t["out.b"] = zeros((V,), "out.b")
        return cls(V, E, H, t)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "Seq2SeqParams":
        return Seq2SeqParams(self.vocab_size, self.emb_size, self.hidden_size,
                             {k: ad.parameter(v.data.copy(), name=k) for k, v in self.tensors.items()})

    def check_ids(self, seq: Sequence[int]):
        for i in seq:
            if not 0 <= i < self.vocab_size:
                raise ValueError(f"token id {i} out of range for vocabulary of size {self.vocab_size}")


# ---------------------------------------------------------------------------
# network pieces
# ---------------------------------------------------------------------------

class _Encoded:
    __slots__ = ("states", "mask", "final")

    def __init__(self, states, mask, final):
        self.states = states  # (B,S,H)
        self.mask = mask      # constant (B,1,S) additive
        self.final = final    # (B,1,H)


def _encode(params: Seq2SeqParams, sources: Sequence[Sequence[int]]) -> _Encoded:
    p = params.tensors
    final, states, lengths = gru_encode(p, "emb", "enc", sources, params.hidden_size, keep_states=True)
    S = states.shape[1]
    mask = np.where(np.arange(S)[None, None, :] < lengths[:, None, None], 0.0, NEG_INF)
    return _Encoded(states, ad.constant(mask), final)


def _decoder_cell(params: Seq2SeqParams, enc: _Encoded, prev_ids: np.ndarray, s: Tensor, ctx: Tensor):
    """Advance the decoder one step; returns ``(s, ctx, features)``."""
    p = params.tensors
    x = ad.concat([ad.embedding(p["emb"], prev_ids.reshape(-1, 1)), ctx], axis=-1)
    s = gru_step(p, "dec", x, s)
    scores = ad.add(ad.matmul(ad.matmul(s, p["att"]), enc.states, transpose_b=True), enc.mask)
    alpha = ad.softmax(scores)
    ctx = ad.matmul(alpha, enc.states)
    return s, ctx, ad.concat([s, ctx], axis=-1)


def _project(params: Seq2SeqParams, feats: Tensor) -> Tensor:
    p = params.tensors
    return ad.log_softmax(ad.add(ad.matmul(feats, p["out.W"]), p["out.b"]))


def _initial_state(params: Seq2SeqParams, enc: _Encoded):
    B = enc.final.shape[0]
    return enc.final, ad.constant(np.zeros((B, 1, params.hidden_size)))


def target_log_probs(params: Seq2SeqParams, sources: Sequence[Sequence[int]],
                     targets: Sequence[Sequence[int]], eos: Sequence[bool] | bool = True) -> Tensor:
    """Teacher-forced ``log P(target_i | source_i)`` for a batch, shape (B,).

    ``eos`` says, per example, whether the EOS transition is part of the
    scored sequence (sampled outputs truncated at max-len have none).
    """
    B = len(sources)
    if len(targets) != B:
        raise ValueError("sources and targets differ in length")
    if isinstance(eos, bool):
        eos = [eos] * B
    labels = [tuple(t) + ((EOS,) if e else ()) for t, e in zip(targets, eos)]
    if any(len(lab) == 0 for lab in labels):
        raise ValueError("cannot score an empty target without EOS")
    for seq in list(sources) + labels:
        params.check_ids(seq)
    lab, lengths = pad_ids(labels, PAD)
    T = lab.shape[1]
    inputs = np.concatenate([np.full((B, 1), BOS), lab[:, :-1]], axis=1)
    onehot = np.zeros((B, T, params.vocab_size))
    for i, L in enumerate(lengths):
        onehot[i, np.arange(L), lab[i, :L]] = 1.0

    enc = _encode(params, sources)
    s, ctx = _initial_state(params, enc)
    feats = []
    for t in range(T):
        s, ctx, f = _decoder_cell(params, enc, inputs[:, t], s, ctx)
        feats.append(f)
    logp = _project(params, ad.concat(feats, axis=1))  # (B,T,V)
    return ad.sum(ad.mul(logp, ad.constant(onehot)), axis=(1, 2))


def conditional_log_prob(params: Seq2SeqParams, source: Sequence[int], target: Sequence[int]) -> Tensor:
    """Differentiable ``log P(target | source)`` including the final EOS."""
    if not source or not target:
        raise ValueError("source and target must be non-empty")
    return ad.sum(target_log_probs(params, [source], [target]))


# ---------------------------------------------------------------------------
# decoding (no tape)
# ---------------------------------------------------------------------------

class _StepDecoder:
    """Incremental decoder over a set of hypotheses for one encoded batch."""

    def __init__(self, params: Seq2SeqParams, sources: Sequence[Sequence[int]]):
        for seq in sources:
            params.check_ids(seq)
        self.params = params
        self.enc = _encode(params, sources)
        self.s, self.ctx = _initial_state(params, self.enc)

    def step(self, prev_ids: np.ndarray) -> np.ndarray:
        self.s, self.ctx, f = _decoder_cell(self.params, self.enc, prev_ids, self.s, self.ctx)
        return _project(self.params, f).data[:, 0, :]

    def reorder(self, rows: np.ndarray):
        self.s = ad.constant(self.s.data[rows])
        self.ctx = ad.constant(self.ctx.data[rows])


def sample_batch(params: Seq2SeqParams, sources: Sequence[Sequence[int]], max_len: int,
                 rng: np.random.Generator, greedy: bool = False):
    """Decode every source; returns ``(tokens, step_log_probs, ended_with_eos)`` lists."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    B = len(sources)
    with no_grad():
        dec = _StepDecoder(params, sources)
        prev = np.full(B, BOS)
        toks = [[] for _ in range(B)]
        lps = [[] for _ in range(B)]
        ended = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            logp = dec.step(prev)
            if greedy:
                nxt = logp.argmax(axis=1)
            else:
                cdf = np.cumsum(np.exp(logp), axis=1)
                u = rng.random(B) * cdf[:, -1]
                nxt = np.array([min(int(np.searchsorted(cdf[i], u[i], side="right")), logp.shape[1] - 1)
                                for i in range(B)])
            for i in range(B):
                if ended[i]:
                    continue
                w = int(nxt[i])
                lps[i].append(float(logp[i, w]))
                if w == EOS:
                    ended[i] = True
                else:
                    toks[i].append(w)
            if ended.all():
                break
            prev = nxt
    return [tuple(t) for t in toks], lps, [bool(e) for e in ended]


def sample_output(params: Seq2SeqParams, source: Sequence[int], max_len: int, rng_seed: int):
    """Multinomial sample ``(tokens, step_log_probs)``.

    ``step_log_probs`` has one entry per sampled token, plus a final entry for
    EOS when the sample terminated before ``max_len``.
    """
    toks, lps, _ = sample_batch(params, [source], max_len, np.random.default_rng(rng_seed))
    return toks[0], lps[0]


def greedy_decode(params: Seq2SeqParams, source: Sequence[int], max_len: int) -> tuple[int, ...]:
    toks, _, _ = sample_batch(params, [source], max_len, None, greedy=True)
    return toks[0]


def greedy_decode_batch(params: Seq2SeqParams, sources: Sequence[Sequence[int]], max_len: int):
    return sample_batch(params, sources, max_len, None, greedy=True)[0]


def beam_search(params: Seq2SeqParams, source: Sequence[int], beam_size: int, max_len: int,
                step_bonus=None):
    """Beam search returning ``[(tokens, search_score, model_log_prob)]`` best first.

    ``step_bonus(position, prev_ids) -> (n_hyps, V)`` is added to the search
    score only (used by anti-LM decoding); ``model_log_prob`` is the plain sum
    of the generator's step log-probabilities.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with no_grad():
        dec = _StepDecoder(params, [source])
        alive = [((), 0.0, 0.0)]  # tokens, search score, model score
        pool = []  # (search score, completion step, tokens, model score)
        prev = np.array([BOS])
        for t in range(1, max_len + 1):
            logp = dec.step(prev)
            V = logp.shape[1]
            scores = np.array([a[1] for a in alive])[:, None] + logp
            if step_bonus is not None:
                scores = scores + step_bonus(t, prev)
            model = np.array([a[2] for a in alive])[:, None] + logp
            flat = scores.reshape(-1)
            # all alive prefixes have equal length: (prefix rank, w) orders token ids lexicographically
            prefix_rank = np.empty(len(alive), dtype=np.int64)
            prefix_rank[sorted(range(len(alive)), key=lambda h: alive[h][0])] = np.arange(len(alive))
            keys = np.lexsort((np.tile(np.arange(V), len(alive)), np.repeat(prefix_rank, V), -flat))[:beam_size]
            new_alive, rows, nxt = [], [], []
            for j in keys:
                h, w = divmod(int(j), V)
                toks = alive[h][0]
                if w == EOS:
                    pool.append((float(flat[j]), t, toks, float(model[h, w])))
                else:
                    new_alive.append((toks + (w,), float(flat[j]), float(model[h, w])))
                    rows.append(h)
                    nxt.append(w)
            alive = new_alive
            if not alive:
                break
            if len(pool) >= beam_size:
                kth = sorted(p[0] for p in pool)[-beam_size]
                if max(a[1] for a in alive) <= kth and step_bonus is None:
                    break
            dec.reorder(np.array(rows))
            prev = np.array(nxt)
        for toks, sc, m in alive:
            pool.append((sc, max_len + 1, toks, m))
    pool.sort(key=lambda p: (-p[0], p[1], p[2]))
    return [(p[2], p[0], p[3]) for p in pool[:beam_size]]


def beam_decode(params: Seq2SeqParams, source: Sequence[int], beam_size: int, max_len: int):
    """N-best list ``[(tokens, log_prob)]`` sorted by score, no length normalisation."""
    return [(toks, sc) for toks, sc, _ in beam_search(params, source, beam_size, max_len)]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def direction_io(batch: Sequence[QRPair], direction: str):
    if direction == "qr":
        return [p.query for p in batch], [p.response for p in batch]
    if direction == "rq":
        return [p.response for p in batch], [p.query for p in batch]
    raise ValueError(f"direction must be 'qr' or 'rq', got {direction!r}")


def batch_nll(params: Seq2SeqParams, batch: Sequence[QRPair], direction: str) -> float:
    src, tgt = direction_io(batch, direction)
    with no_grad():
        return -float(target_log_probs(params, src, tgt).data.mean())


def mle_step(params: Seq2SeqParams, batch: Sequence[QRPair], direction: str, lr: float,
             clip: float = 5.0) -> float:
    """One SGD step on the mean teacher-forced NLL; returns the pre-update loss."""
    if not batch:
        raise ValueError("empty batch")
    src, tgt = direction_io(batch, direction)
    with Tape() as tape:
        lp = target_log_probs(params, src, tgt)
        loss = ad.scale(ad.sum(lp), -1.0 / len(batch))
    ps = params.parameters()
    ad.backward(loss, tape, wrt=ps)
    ad.optimizer_step(ps, lr, clip)
    return loss.item()
