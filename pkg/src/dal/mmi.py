"""Mutual-information decoding baselines over MLE-trained generators.

* anti-LM: beam search whose per-step score subtracts ``weight * log P_lm(w | prev)``
  for the first ``threshold`` output positions, using the response-side bigram LM.
* bidirectional: N-best forward beam, reranked by
  ``(1 - w) * log P(r|q) + w * log P(q|r)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .bigram import BigramLM
from .data import BOS, PAD
from .seq2seq import Seq2SeqParams, beam_decode, beam_search, greedy_decode, target_log_probs


@dataclass
class MmiConfig:
    anti_lm_weight: float = 0.5
    anti_lm_threshold: int = 5
    bidi_nbest: int = 5
    bidi_reverse_weight: float = 0.5

    def __post_init__(self):
        if self.anti_lm_weight < 0:
            raise ValueError("anti_lm_weight must be >= 0")
        if self.anti_lm_threshold < 0:
            raise ValueError("anti_lm_threshold must be >= 0")
        if self.bidi_nbest < 1:
            raise ValueError("bidi_nbest must be >= 1")
        if not 0 <= self.bidi_reverse_weight <= 1:
            raise ValueError("bidi_reverse_weight must be in [0, 1]")


def _anti_lm_bonus(lm: BigramLM, weight: float, threshold: int):
    table = -weight * lm.log_table
    # PAD and BOS are never predicted by the LM: no bonus for them
    table[:, PAD] = 0.0
    table[:, BOS] = 0.0

    def bonus(position: int, prev_ids: np.ndarray) -> np.ndarray | float:
        if position > threshold:
            return 0.0
        return table[prev_ids]

    return bonus


def mmi_anti_decode(gen_qr: Seq2SeqParams, lm_r: BigramLM, cfg: MmiConfig, source: Sequence[int],
                    max_len: int) -> tuple[int, ...]:
    """Best sequence under the anti-LM-penalised score (search width ``bidi_nbest``)."""
    if cfg.anti_lm_weight == 0 or cfg.anti_lm_threshold == 0:
        return beam_decode(gen_qr, source, cfg.bidi_nbest, max_len)[0][0]
    bonus = _anti_lm_bonus(lm_r, cfg.anti_lm_weight, cfg.anti_lm_threshold)
    return beam_search(gen_qr, source, cfg.bidi_nbest, max_len, step_bonus=bonus)[0][0]


def mmi_bidi_candidates(gen_qr: Seq2SeqParams, gen_rq: Seq2SeqParams, cfg: MmiConfig,
                        source: Sequence[int], max_len: int):
    """Rerank the forward N-best list.

    Returns ``(best_tokens, candidates, fell_back)`` where ``candidates`` is a
    list of ``(tokens, forward, reverse, combined)`` for non-empty hypotheses.
    """
    nbest = beam_decode(gen_qr, source, cfg.bidi_nbest, max_len)
    valid = [(t, s) for t, s in nbest if t]
    if not valid:
        return greedy_decode(gen_qr, source, max_len), [], True
    with no_grad():
        rev = target_log_probs(gen_rq, [t for t, _ in valid], [tuple(source)] * len(valid)).data
    w = cfg.bidi_reverse_weight
    cands = [(t, s, float(r), (1 - w) * s + w * float(r)) for (t, s), r in zip(valid, rev)]
    best = max(range(len(cands)), key=lambda i: (cands[i][3], -i))
    return cands[best][0], cands, False


def mmi_bidi_decode(gen_qr: Seq2SeqParams, gen_rq: Seq2SeqParams, cfg: MmiConfig, source: Sequence[int],
                    max_len: int) -> tuple[int, ...]:
    return mmi_bidi_candidates(gen_qr, gen_rq, cfg, source, max_len)[0]
