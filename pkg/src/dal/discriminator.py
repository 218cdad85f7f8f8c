"""Pair discriminator: estimated probability that a query/response pair is real.

Query and response are read by separate embedding+GRU encoders; the final
states are concatenated and passed through a tanh layer and a scalar output
layer whose sigmoid is the score.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, no_grad
from .data import QRPair
from .layers import gru_encode, gru_params, uniform, zeros


@dataclass
class DiscriminatorParams:
    vocab_size: int
    emb_size: int
    hidden_size: int
    fc_size: int
    tensors: dict[str, Tensor]

    @classmethod
    def init(cls, vocab_size: int, emb_size: int = 32, hidden_size: int = 64,
             fc_size: int | None = None, seed: int = 0) -> "DiscriminatorParams":
        rng = np.random.default_rng(seed)
        V, E, H = vocab_size, emb_size, hidden_size
        F = H if fc_size is None else fc_size
        t = {}
        for side in ("q", "r"):
            t[f"{side}.emb"] = uniform(rng, (V, E), f"{side}.emb")
            t.update(gru_params(rng, f"{side}.gru", E, H))
        t["fc1.W"] = uniform(rng, (2 * H, F), "fc1.W")
        t["fc1.b"] = zeros((F,), "fc1.b")
        t["fc2.W"] = uniform(rng, (F, 1), "fc2.W")
        t["fc2.b"] = zeros((1,), "fc2.b")
        return cls(V, E, H, F, t)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "DiscriminatorParams":
        return DiscriminatorParams(self.vocab_size, self.emb_size, self.hidden_size, self.fc_size,
                                   {k: ad.parameter(v.data.copy(), name=k) for k, v in self.tensors.items()})


def _check(params, seqs):
    for s in seqs:
        if not s:
            raise ValueError("discriminator inputs must be non-empty")
        for i in s:
            if not 0 <= i < params.vocab_size:
                raise ValueError(f"token id {i} out of range for vocabulary of size {params.vocab_size}")


def logits(params: DiscriminatorParams, queries: Sequence[Sequence[int]],
           responses: Sequence[Sequence[int]]) -> Tensor:
    """Pre-sigmoid scores, shape (B,1,1)."""
    _check(params, queries)
    _check(params, responses)
    p = params.tensors
    vq, _, _ = gru_encode(p, "q.emb", "q.gru", queries, params.hidden_size)
    vr, _, _ = gru_encode(p, "r.emb", "r.gru", responses, params.hidden_size)
    h = ad.tanh(ad.add(ad.matmul(ad.concat([vq, vr], axis=-1), p["fc1.W"]), p["fc1.b"]))
    return ad.add(ad.matmul(h, p["fc2.W"]), p["fc2.b"])


def score_pairs(params: DiscriminatorParams, queries, responses) -> np.ndarray:
    with no_grad():
        return ad.sigmoid(logits(params, queries, responses)).data.reshape(-1)


def score_pair(params: DiscriminatorParams, query: Sequence[int], response: Sequence[int]) -> Tensor:
    """Differentiable probability that ``(query, response)`` is human-generated."""
    return ad.sum(ad.sigmoid(logits(params, [query], [response])))


def _log_sigmoid_pair(z: Tensor):
    """(log sigmoid(z), log(1 - sigmoid(z))) via a two-way log-softmax over [z, 0]."""
    zz = ad.log_softmax(ad.concat([z, ad.constant(np.zeros(z.shape))], axis=-1))
    B = z.shape[0]
    pos = ad.sum(ad.mul(zz, ad.constant(np.broadcast_to([1.0, 0.0], (B, 1, 2)))), axis=(1, 2))
    neg = ad.sum(ad.mul(zz, ad.constant(np.broadcast_to([0.0, 1.0], (B, 1, 2)))), axis=(1, 2))
    return pos, neg


def discriminator_loss(params: DiscriminatorParams, real: Sequence[QRPair], fake: Sequence[QRPair]) -> Tensor:
    """``-mean_real log D - mean_fake log(1 - D)``."""
    if not real or not fake:
        raise ValueError("need both real and fake pairs")
    z_real = logits(params, [p.query for p in real], [p.response for p in real])
    z_fake = logits(params, [p.query for p in fake], [p.response for p in fake])
    log_d_real, _ = _log_sigmoid_pair(z_real)
    _, log_not_d_fake = _log_sigmoid_pair(z_fake)
    return ad.add(ad.scale(ad.sum(log_d_real), -1.0 / len(real)),
                  ad.scale(ad.sum(log_not_d_fake), -1.0 / len(fake)))


def discriminator_step(params: DiscriminatorParams, real: Sequence[QRPair], fake: Sequence[QRPair],
                       lr: float, clip: float = 5.0) -> float:
    """One update on the real/fake cross-entropy; returns the pre-update loss."""
    with Tape() as tape:
        loss = discriminator_loss(params, real, fake)
    ps = params.parameters()
    ad.backward(loss, tape, wrt=ps)
    ad.optimizer_step(ps, lr, clip)
    return loss.item()
