from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dal.data import (BOS, EOS, PAD, UNK, Corpus, CorpusError, QRPair, SyntheticSpec, batch_iter, build_vocab,
                      decode, encode, load_corpus, save_corpus, split_synthetic, synthesize_corpus,
                      synthesize_queries)

words = st.text(alphabet="abcdefg", min_size=1, max_size=3)


def test_reserved_ids():
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)


def test_build_vocab_frequency_order():
    v = build_vocab([("a b", "a")])
    assert v.itos == ("<pad>", "<s>", "</s>", "<unk>", "a", "b")


def test_build_vocab_min_count():
    assert len(build_vocab([("a b", "a")], min_count=3)) == 4


def test_build_vocab_ties_lexicographic():
    v = build_vocab([("c a b", "b c a")])
    assert v.itos[4:] == ("a", "b", "c")


def test_build_vocab_max_size_and_errors():
    assert build_vocab([("a b c d", "a")], max_size=5).itos[4:] == ("a",)
    with pytest.raises(CorpusError):
        build_vocab([])
    with pytest.raises(ValueError):
        build_vocab([("a", "b")], min_count=0)


def test_encode_decode():
    v = build_vocab([("a b", "a")])
    ids = encode("a b", v)
    assert ids == (4, 5) and decode(ids, v) == "a b"
    assert encode("a z", v) == (4, UNK)
    assert encode("", v) == ()
    with pytest.raises(ValueError):
        decode((99,), v)


@given(st.lists(words, min_size=1, max_size=8))
def test_roundtrip_in_vocab(tokens):
    text = " ".join(tokens)
    v = build_vocab([(text, text)])
    assert decode(encode(text, v), v) == text


def test_load_corpus(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("a b\tc\nno tab here\nx\ty\tz\n", encoding="utf-8")
    c = load_corpus(p)
    assert len(c) == 2 and c.malformed == 1
    assert decode(c.pairs[1].response, c.vocab) == "y z"  # "y\tz" rejoined, then whitespace-tokenised
    p.write_text("a\tb\nc\td\n", encoding="utf-8")
    assert len(load_corpus(p)) == 2


def test_load_corpus_errors(tmp_path):
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "missing.tsv")
    p = tmp_path / "bad.tsv"
    p.write_text("nothing\nvalid\n", encoding="utf-8")
    with pytest.raises(CorpusError):
        load_corpus(p)


def test_load_corpus_truncates(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("a b c d\te\n", encoding="utf-8")
    assert len(load_corpus(p, max_len=2).pairs[0].query) == 2


def test_save_load_roundtrip(tmp_path):
    c = synthesize_corpus(SyntheticSpec(1, 3, 2, 10, 2, 3), seed=0)
    save_corpus(c, tmp_path / "c.tsv")
    c2 = load_corpus(tmp_path / "c.tsv", vocab=c.vocab)
    assert c2.pairs == c.pairs


def test_qrpair_non_empty():
    with pytest.raises(ValueError):
        QRPair((), (4,))


def test_corpus_validates_ids():
    v = build_vocab([("a", "b")])
    with pytest.raises(ValueError):
        Corpus((QRPair((4,), (17,)),), v)


def test_synthesize_small():
    c = synthesize_corpus(SyntheticSpec(n_safe=1, m=3, n_diverse=2, alphabet=10, min_len=3, max_len=3), seed=0)
    assert len(c) == 5
    counts = Counter(p.response for p in c.pairs)
    assert sorted(counts.values()) == [1, 1, 3]


def test_synthesize_deterministic():
    s = SyntheticSpec()
    assert synthesize_corpus(s, 3).to_lines() == synthesize_corpus(s, 3).to_lines()
    assert synthesize_corpus(s, 3).to_lines() != synthesize_corpus(s, 4).to_lines()


def test_synthesize_distinct_queries():
    c = synthesize_corpus(SyntheticSpec(n_safe=2, m=5, n_diverse=50, alphabet=40, min_len=4, max_len=4), seed=1)
    assert len(c) == 60
    assert len({p.query for p in c.pairs}) == 60
    assert all(len(p.query) == 4 and len(p.response) == 4 for p in c.pairs)


def test_synthesize_alphabet_too_small():
    with pytest.raises(ValueError, match="too small"):
        synthesize_corpus(SyntheticSpec(n_safe=2, m=5, n_diverse=50, alphabet=2, min_len=2, max_len=2), seed=0)


@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 20), st.integers(0, 2**31))
def test_synthesize_structure(n_safe, m, n_div, seed):
    c = synthesize_corpus(SyntheticSpec(n_safe, m, n_div, 12, 3, 5), seed)
    assert len(c) == n_safe * m + n_div
    counts = Counter(p.response for p in c.pairs)
    assert sorted(counts.values()) == [1] * n_div + [m] * n_safe if m > 1 else len(counts) == len(c)
    safe, diverse, safe_r = split_synthetic(c)
    if m > 1:
        assert len(safe) == n_safe * m and len(diverse) == n_div and len(safe_r) == n_safe
    utterances = [p.query for p in c.pairs] + list(counts)
    assert len(set(utterances)) == len(utterances)


def test_heldout_queries_disjoint():
    s = SyntheticSpec()
    c = synthesize_corpus(s, 0)
    qs = synthesize_queries(s, 100, seed=5, exclude=c)
    seen = {p.query for p in c.pairs} | {p.response for p in c.pairs}
    assert len(set(qs)) == 100 and not seen & set(qs)


def test_batch_iter_sizes():
    c = synthesize_corpus(SyntheticSpec(1, 3, 2, 10, 2, 3), seed=0)
    assert [len(b) for b in batch_iter(c, 2, 0)] == [2, 2, 1]


@given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 1000))
def test_batch_iter_partitions(n, bs, seed):
    pairs = [QRPair((4 + i,), (4,)) for i in range(n)]
    got = [p for b in batch_iter(pairs, bs, seed) for p in b]
    assert sorted(got, key=lambda p: p.query) == pairs
    assert got == [p for b in batch_iter(pairs, bs, seed) for p in b]
