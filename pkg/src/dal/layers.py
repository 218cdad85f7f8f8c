"""GRU cell and padding helpers shared by the generator and discriminator."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_SCALE = 0.1
NEG_INF = -1e9  # additive attention mask; exp() underflows to exactly 0


def uniform(rng: np.random.Generator, shape, name: str, scale: float = INIT_SCALE) -> Tensor:
    return ad.parameter(rng.uniform(-scale, scale, size=shape), name=name)


def zeros(shape, name: str) -> Tensor:
    return ad.parameter(np.zeros(shape), name=name)


def gru_params(rng: np.random.Generator, prefix: str, n_in: int, n_hidden: int) -> dict[str, Tensor]:
    p = {}
    for g in "zrn":
        p[f"{prefix}.W{g}"] = uniform(rng, (n_in, n_hidden), f"{prefix}.W{g}")
        p[f"{prefix}.U{g}"] = uniform(rng, (n_hidden, n_hidden), f"{prefix}.U{g}")
        p[f"{prefix}.b{g}"] = zeros((n_hidden,), f"{prefix}.b{g}")
    return p


def gru_step(p: dict[str, Tensor], prefix: str, x: Tensor, h: Tensor) -> Tensor:
    """One GRU update; ``x`` is (B,1,in), ``h`` is (B,1,H)."""
    W = lambda g: p[f"{prefix}.W{g}"]  # noqa: E731
    U = lambda g: p[f"{prefix}.U{g}"]  # noqa: E731
    b = lambda g: p[f"{prefix}.b{g}"]  # noqa: E731
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, W("z")), ad.matmul(h, U("z"))), b("z")))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, W("r")), ad.matmul(h, U("r"))), b("r")))
    n = ad.tanh(ad.add(ad.add(ad.matmul(x, W("n")), ad.matmul(ad.mul(r, h), U("n"))), b("n")))
    # h' = (1 - z) * n + z * h
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


def pad_ids(seqs: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(1, int(lengths.max(initial=0)))), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def gru_encode(p: dict[str, Tensor], emb_name: str, prefix: str, seqs: Sequence[Sequence[int]],
               hidden: int, keep_states: bool = False):
    """Run a GRU over right-padded sequences.

    Returns ``(final_state (B,1,H), states (B,S,H) or None, lengths)``. Padded
    steps leave the state untouched, so the final state is the state after
    each sequence's last real token.
    """
    ids, lengths = pad_ids(seqs)
    B, S = ids.shape
    h = ad.constant(np.zeros((B, 1, hidden)))
    states = []
    ragged = bool((lengths != S).any())
    for t in range(S):
        x = ad.embedding(p[emb_name], ids[:, t:t + 1])
        h_new = gru_step(p, prefix, x, h)
        if ragged:
            m = ad.constant((t < lengths).astype(np.float64).reshape(B, 1, 1))
            h_new = ad.add(h, ad.mul(m, ad.sub(h_new, h)))
        h = h_new
        if keep_states:
            states.append(h)
    enc = ad.concat(states, axis=1) if keep_states else None
    return h, enc, lengths
