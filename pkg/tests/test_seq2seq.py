import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dal import autodiff as ad
from dal.autodiff import no_grad
from dal.data import BOS, EOS, QRPair
from dal.seq2seq import (Seq2SeqParams, _StepDecoder, beam_decode, conditional_log_prob, greedy_decode,
                         mle_step, sample_batch, sample_output, target_log_probs)


def tiny(V=8, E=4, H=6, seed=0, scale=None):
    p = Seq2SeqParams.init(V, E, H, seed=seed)
    if scale is not None:
        rng = np.random.default_rng(seed + 1000)
        for t in p.tensors.values():
            t.data = rng.normal(scale=scale, size=t.shape)
    return p


def forced_eos(V=6):
    p = tiny(V)
    p.tensors["out.W"].data[:] = 0.0
    p.tensors["out.b"].data[:] = 0.0
    p.tensors["out.b"].data[EOS] = 50.0
    return p


def lp(params, src, tgt, eos=True):
    with no_grad():
        return float(target_log_probs(params, [src], [tgt], eos=eos).data[0])


def test_uniform_output_layer():
    p = tiny(V=7)
    p.tensors["out.W"].data[:] = 0.0
    for tgt in [(4,), (4, 5, 6)]:
        assert conditional_log_prob(p, (3, 4), tgt).item() == pytest.approx((len(tgt) + 1) * math.log(1 / 7))


@given(st.integers(0, 10**6), st.lists(st.integers(0, 7), min_size=1, max_size=5),
       st.lists(st.integers(0, 7), min_size=1, max_size=5))
def test_log_prob_is_probability(seed, src, tgt):
    v = conditional_log_prob(tiny(seed=seed % 50, scale=0.5), src, tgt).item()
    assert v < 0 and 0 < math.exp(v) < 1


def test_invalid_ids_and_empty():
    p = tiny()
    with pytest.raises(ValueError):
        conditional_log_prob(p, (3,), (99,))
    with pytest.raises(ValueError):
        conditional_log_prob(p, (), (3,))


def test_batched_matches_single():
    p = tiny(scale=0.4)
    srcs = [(3, 4, 5), (6,), (7, 7)]
    tgts = [(4,), (5, 6, 7, 3), (3, 3)]
    with no_grad():
        batched = target_log_probs(p, srcs, tgts).data
    single = [conditional_log_prob(p, s, t).item() for s, t in zip(srcs, tgts)]
    np.testing.assert_allclose(batched, single, rtol=1e-12)


def test_properness_by_enumeration():
    p = tiny(V=5, scale=0.6, seed=3)
    src = (3, 4)
    words = [w for w in range(5) if w != EOS]
    totals = []
    total = 0.0
    for L in range(1, 4):
        total += sum(math.exp(lp(p, src, seq)) for seq in itertools.product(words, repeat=L))
        totals.append(total)
    total_with_empty = total + math.exp(lp(p, src, ()))
    assert total_with_empty <= 1 + 1e-12
    assert totals[0] < totals[1] < totals[2]


def test_gradient_every_block():
    p = tiny(scale=0.3)
    ps = p.parameters()
    err = ad.grad_check(lambda: conditional_log_prob(p, (3, 4, 5), (6, 7)), ps)
    assert err < 1e-4


# --- sampling ---------------------------------------------------------------

def test_forced_eos_sample_and_greedy():
    p = forced_eos()
    toks, lps = sample_output(p, (3, 4), 5, rng_seed=0)
    assert toks == () and len(lps) == 1 and lps[0] == pytest.approx(0.0, abs=1e-12)
    assert greedy_decode(p, (3, 4), 5) == ()


def test_sample_deterministic_in_seed():
    p = tiny(scale=0.5)
    assert sample_output(p, (3, 4), 8, 11) == sample_output(p, (3, 4), 8, 11)


def test_sample_log_probs_align_with_tokens():
    p = tiny(scale=0.5)
    toks, lps = sample_output(p, (3, 4), 6, 5)
    ended = len(lps) == len(toks) + 1
    assert math.isclose(sum(lps), lp(p, (3, 4), toks, eos=ended), rel_tol=1e-10)


def test_sampling_frequencies_match_softmax():
    p = tiny(V=5, scale=0.8, seed=2)
    src = (3, 4)
    with no_grad():
        dec = _StepDecoder(p, [src])
        first = np.exp(dec.step(np.array([BOS]))[0])
    n = 10_000
    toks, _, _ = sample_batch(p, [src] * n, 2, np.random.default_rng(0))
    first_tok = np.array([t[0] if t else EOS for t in toks])
    for w in range(5):
        pw = first[w]
        se = math.sqrt(pw * (1 - pw) / n)
        assert abs(np.mean(first_tok == w) - pw) <= 3 * se + 1e-12
    # second step, conditioned on the most likely non-EOS first token
    w0 = max((w for w in range(5) if w != EOS), key=lambda w: first[w])
    with no_grad():
        dec = _StepDecoder(p, [src])
        dec.step(np.array([BOS]))
        second = np.exp(dec.step(np.array([w0]))[0])
    sub = [t for t in toks if t and t[0] == w0]
    m = len(sub)
    nxt = np.array([t[1] if len(t) > 1 else EOS for t in sub])
    for w in range(5):
        se = math.sqrt(second[w] * (1 - second[w]) / m)
        assert abs(np.mean(nxt == w) - second[w]) <= 3 * se + 1e-12


# --- greedy and beam ----------------------------------------------------------

@pytest.mark.parametrize("seed", range(50))
def test_greedy_equals_beam_one(seed):
    p = tiny(V=8, seed=seed, scale=0.7)
    src = tuple(int(x) for x in np.random.default_rng(seed).integers(3, 8, size=4))
    g = greedy_decode(p, src, 6)
    (b, score), = beam_decode(p, src, 1, 6)
    assert g == b
    assert greedy_decode(p, src, 6) == g


def _brute_force(p, src, max_len):
    words = [w for w in range(p.vocab_size) if w != EOS]
    hyps = []
    for L in range(max_len):
        for seq in itertools.product(words, repeat=L):
            hyps.append((lp(p, src, seq, eos=True), L + 1, seq))
    for seq in itertools.product(words, repeat=max_len):
        hyps.append((lp(p, src, seq, eos=False), max_len + 1, seq))
    hyps.sort(key=lambda h: (-h[0], h[1], h[2]))
    return hyps


@pytest.mark.parametrize("seed", range(5))
def test_exhaustive_beam_equals_brute_force(seed):
    V, max_len = 3, 3
    p = tiny(V=V, seed=seed, scale=1.0)
    src = (0, 1, 0)
    truth = _brute_force(p, src, max_len)
    for n in (1, 3, 5, len(truth)):
        got = beam_decode(p, src, V ** max_len, max_len)[:n]
        assert [g[0] for g in got] == [t[2] for t in truth[:n]]
        np.testing.assert_allclose([g[1] for g in got], [t[0] for t in truth[:n]], rtol=1e-10)


@given(st.integers(0, 1000), st.integers(1, 6))
def test_beam_sorted_and_sized(seed, k):
    p = tiny(V=6, seed=seed % 20, scale=0.8)
    out = beam_decode(p, (3, 4), k, 4)
    scores = [s for _, s in out]
    assert scores == sorted(scores, reverse=True)
    assert len(out) == k  # the pool always holds at least beam-size hypotheses at max_len 4


# --- mle_step -----------------------------------------------------------------

def test_overfit_single_pair():
    p = Seq2SeqParams.init(10, 8, 16, seed=0)
    batch = [QRPair((4, 5, 6), (7, 8, 9, 4))]
    for step in range(500):
        loss = mle_step(p, batch, "qr", lr=0.5)
        assert loss >= 0
        if loss < 0.1:
            break
    assert loss < 0.1, loss


def test_lr_zero_unchanged():
    p = tiny(scale=0.3)
    before = {k: t.data.copy() for k, t in p.tensors.items()}
    mle_step(p, [QRPair((3, 4), (5,))], "rq", lr=0.0)
    for k, t in p.tensors.items():
        np.testing.assert_array_equal(t.data, before[k])
