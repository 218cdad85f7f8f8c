import math

import numpy as np
import pytest

from dal import autodiff as ad
from dal import checkpoint, trainer
from dal.autodiff import NonFiniteError, no_grad
from dal.data import EOS, QRPair, SyntheticSpec, synthesize_corpus
from dal.discriminator import DiscriminatorParams
from dal.seq2seq import Seq2SeqParams, conditional_log_prob, mle_step, sample_batch, target_log_probs
from dal.trainer import (DalModel, RewardBaseline, TrainConfig, TrainingDiverged, combined_generator_step,
                         dual_regularizer, dual_step, policy_gradient_step, pretrain, teacher_forcing_step,
                         train_dal, upsilon_values)

SMALL = SyntheticSpec(n_safe=2, m=4, n_diverse=8, alphabet=6, min_len=2, max_len=4)


def small_model(mode="dual-adv", **kw):
    corpus = synthesize_corpus(SMALL, seed=0)
    cfg = dict(mode=mode, emb_size=4, hidden_size=6, batch_size=4, max_len=5, pretrain_epochs_gen=2,
               pretrain_epochs_disc=1, dal_epochs=2, seed=3)
    cfg.update(kw)
    model = DalModel.create(corpus.vocab, TrainConfig(**cfg))
    model.fit_language_models(corpus)
    return model, corpus


def params_vec(ps):
    return np.concatenate([t.data.ravel() for t in ps])


# --- config -------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="gan")
    with pytest.raises(ValueError):
        TrainConfig(lambda_qr=-1)
    with pytest.raises(ValueError):
        TrainConfig(d=0)
    with pytest.raises(ValueError):
        TrainConfig(baseline_decay=1.0)
    TrainConfig(mode="mle-only", d=0)  # d unused without an adversary


def test_baseline_ema():
    b = RewardBaseline(0.5, 0.9)
    assert b.update(1.0) == pytest.approx(0.55)


# --- duality regulariser --------------------------------------------------------

def test_upsilon_recomposed_from_parts():
    model, corpus = small_model()
    pair = corpus.pairs[0]
    expected = (model.lm_r.sequence_log_prob(pair.response) + conditional_log_prob(model.gen_rq, pair.response, pair.query).item()
                - model.lm_q.sequence_log_prob(pair.query) - conditional_log_prob(model.gen_qr, pair.query, pair.response).item()) ** 2
    assert dual_regularizer(model, pair).item() == pytest.approx(expected, rel=1e-12)
    assert upsilon_values(model, [pair])[0] == pytest.approx(expected, rel=1e-12)
    assert expected >= 0


def test_upsilon_gradient_both_generators():
    corpus = synthesize_corpus(SyntheticSpec(1, 2, 2, 4, 1, 2), seed=0)
    model = DalModel.create(corpus.vocab, TrainConfig(emb_size=4, hidden_size=6))
    assert len(corpus.vocab) == 8
    rng = np.random.default_rng(0)
    for g in (model.gen_qr, model.gen_rq):
        for t in g.tensors.values():
            t.data = rng.normal(scale=0.5, size=t.shape)
    model.fit_language_models(corpus)
    pair = corpus.pairs[0]
    ps = model.gen_qr.parameters() + model.gen_rq.parameters()
    assert ad.grad_check(lambda: dual_regularizer(model, pair), ps) < 1e-4


def test_dual_step_only_touches_its_generator():
    model, corpus = small_model()
    other = params_vec(model.gen_rq.parameters())
    before = params_vec(model.gen_qr.parameters())
    dual_step(model, list(corpus.pairs[:4]), "qr", lr=0.1)
    assert not np.array_equal(before, params_vec(model.gen_qr.parameters()))
    np.testing.assert_array_equal(other, params_vec(model.gen_rq.parameters()))


# --- policy gradient ----------------------------------------------------------------

def _fixed_rewards(monkeypatch, value):
    monkeypatch.setattr(trainer, "rewards", lambda disc, src, out, d: np.full(len(src), value))


def test_reward_equal_baseline_no_update(monkeypatch):
    model, corpus = small_model()
    _fixed_rewards(monkeypatch, 0.7)
    b = RewardBaseline(0.7, 0.9)
    before = params_vec(model.gen_qr.parameters())
    policy_gradient_step(model.gen_qr, model.disc_qr, b, [p.query for p in corpus.pairs[:4]], "qr", 0.5, 1)
    np.testing.assert_array_equal(before, params_vec(model.gen_qr.parameters()))


def test_update_is_scaled_sample_mle(monkeypatch):
    model, corpus = small_model()
    _fixed_rewards(monkeypatch, 0.9)
    src = [p.query for p in corpus.pairs[:4]]
    gen = model.gen_qr
    ref = gen.copy()
    # independent computation: 0.4 * grad of mean log p(sample), same samples
    samples, _, ended = sample_batch(ref, src, 5, np.random.default_rng(9))
    with ad.Tape() as tape:
        obj = ad.scale(ad.sum(target_log_probs(ref, src, samples, eos=ended)), 0.4 / len(src))
    ad.backward(obj, tape, wrt=ref.parameters())
    expected = params_vec(ref.parameters()) + 0.01 * np.concatenate([t.grad.ravel() for t in ref.parameters()])
    policy_gradient_step(gen, model.disc_qr, RewardBaseline(0.5, 0.9), src, "qr", 0.01, 9, max_len=5,
                         clip=math.inf)
    np.testing.assert_allclose(params_vec(gen.parameters()), expected, rtol=1e-12, atol=1e-15)


def test_constant_shift_absorbed_by_baseline(monkeypatch):
    model, corpus = small_model()
    src = [p.query for p in corpus.pairs[:4]]
    results = []
    for shift in (0.0, 0.25):
        g = model.gen_qr.copy()
        monkeypatch.setattr(trainer, "rewards", lambda d, s, o, _, c=shift: np.linspace(0.1, 0.6, len(s)) + c)
        policy_gradient_step(g, model.disc_qr, RewardBaseline(0.3 + shift, 0.9), src, "qr", 0.1, 4, max_len=5)
        results.append(params_vec(g.parameters()))
    np.testing.assert_allclose(results[0], results[1], rtol=0, atol=1e-15)


def test_reward_preference_raises_token_frequency():
    """A discriminator that rewards responses ending in token 5 teaches a one-token generator to emit it."""
    V, H, target = 7, 6, 5
    disc = DiscriminatorParams.init(V, 4, H, seed=0)
    for t in disc.tensors.values():
        t.data[:] = 0.0
    disc.tensors["r.emb"].data[target, 0] = 1.0
    disc.tensors["r.gru.Wn"].data[0, 0] = 10.0
    disc.tensors["fc1.W"].data[H, 0] = 10.0
    disc.tensors["fc2.W"].data[0, 0] = 10.0
    gen = Seq2SeqParams.init(V, 4, H, seed=0)
    sources = [(3, 4), (4, 6), (6,), (3,)]
    b = RewardBaseline(0.5, 0.9)

    def freq():
        toks, _, _ = sample_batch(gen, sources * 100, 1, np.random.default_rng(123))
        return np.mean([t == (target,) for t in toks])

    start = freq()
    for step in range(2000):
        policy_gradient_step(gen, disc, b, sources, "qr", 0.5, step, max_len=1)
    assert start < 0.3 and freq() > 0.8


def test_combined_lambda_zero_equals_dual_step():
    model, corpus = small_model(lambda_qr=0.0)
    batch = list(corpus.pairs[:4])
    twin = model.gen_qr.copy()
    combined_generator_step(model, batch, "qr", 0.1, rng_seed=5)
    after_combined = params_vec(model.gen_qr.parameters())
    model.gen_qr = twin
    dual_step(model, batch, "qr", 0.1)
    np.testing.assert_array_equal(after_combined, params_vec(model.gen_qr.parameters()))


def _delta(fn, gen):
    before = params_vec(gen.parameters())
    fn()
    return params_vec(gen.parameters()) - before


def _combined_vs_parts(lam):
    model, corpus = small_model(lambda_qr=lam, clip=1e9)
    batch = list(corpus.pairs[:4])
    src = [p.query for p in batch]
    model.baselines["qr"].value = 0.0
    g_pg, g_dual = model.gen_qr.copy(), model.gen_qr.copy()
    d_comb = _delta(lambda: combined_generator_step(model, batch, "qr", 1e-4, rng_seed=7), model.gen_qr)
    d_pg = _delta(lambda: policy_gradient_step(g_pg, model.disc_qr, RewardBaseline(0.0, 0.9), src, "qr", 1e-4, 7,
                                               max_len=model.config.max_len, clip=1e9), g_pg)
    model.gen_qr = g_dual
    d_dual = _delta(lambda: dual_step(model, batch, "qr", 1e-4), g_dual)
    return d_comb, d_pg, d_dual


def test_combined_update_is_dual_plus_lambda_policy_gradient():
    d_comb, d_pg, d_dual = _combined_vs_parts(3.0)
    np.testing.assert_allclose(d_comb, d_dual + 3.0 * d_pg, rtol=1e-6, atol=1e-15)


def test_combined_large_lambda_follows_policy_gradient():
    cos = []
    for lam in (10.0, 100.0, 1000.0):
        d_comb, d_pg, _ = _combined_vs_parts(lam)
        cos.append(d_comb @ d_pg / (np.linalg.norm(d_comb) * np.linalg.norm(d_pg)))
    assert cos[0] < cos[1] < cos[2]
    assert cos[2] > 0.99, cos


def test_combined_deterministic_in_seed():
    outs = []
    for _ in range(2):
        model, corpus = small_model()
        r = combined_generator_step(model, list(corpus.pairs[:4]), "rq", 0.1, rng_seed=11)
        outs.append((r, params_vec(model.gen_rq.parameters())))
    assert outs[0][0] == outs[1][0]
    np.testing.assert_array_equal(outs[0][1], outs[1][1])


def test_empty_sample_shown_as_eos(monkeypatch):
    seen = {}

    def fake_scores(disc, qs, rs):
        seen["rs"] = rs
        return np.full(len(qs), 0.5)

    monkeypatch.setattr(trainer, "score_pairs", fake_scores)
    trainer.rewards(None, [(4,), (5,)], [(), (6,)], "qr")
    assert seen["rs"] == [(EOS,), (6,)]


# --- teacher forcing ----------------------------------------------------------------

def test_teacher_forcing_delegates_to_mle():
    model, corpus = small_model()
    batch = list(corpus.pairs[:4])
    twin = model.gen_qr.copy()
    a = teacher_forcing_step(model, batch, "qr", 0.3)
    b = mle_step(twin, batch, "qr", 0.3, model.config.clip)
    assert a == b
    np.testing.assert_array_equal(params_vec(model.gen_qr.parameters()), params_vec(twin.parameters()))


def test_teacher_forcing_overfits_five_pairs():
    model, corpus = small_model()
    batch = list(corpus.pairs[:5])
    losses = [teacher_forcing_step(model, batch, "qr", 0.2) for _ in range(100)]
    assert (np.diff(losses) < 0).all()


def test_teacher_forcing_lr_zero():
    model, corpus = small_model()
    before = params_vec(model.gen_rq.parameters())
    teacher_forcing_step(model, list(corpus.pairs[:3]), "rq", 0.0)
    np.testing.assert_array_equal(before, params_vec(model.gen_rq.parameters()))


# --- loops ----------------------------------------------------------------------------

def test_zero_pretrain_keeps_init_but_fits_lms():
    corpus = synthesize_corpus(SMALL, 0)
    cfg = TrainConfig(emb_size=4, hidden_size=6, pretrain_epochs_gen=0, pretrain_epochs_disc=0, seed=2)
    model = DalModel.create(corpus.vocab, cfg)
    init = model.state_arrays()
    model.lm_q = model.lm_r = None
    pretrain(model, corpus)
    assert model.lm_q is not None and model.lm_r is not None
    for k, v in init.items():
        np.testing.assert_array_equal(v, model.state_arrays()[k])


def test_pretrain_lowers_nll_and_updates_discriminators():
    # discriminator learning itself is checked at default scale in the acceptance suite
    model, corpus = small_model(pretrain_epochs_gen=10, pretrain_epochs_disc=3, lr_gen=0.5)
    disc_before = params_vec(model.disc_qr.parameters())
    log = pretrain(model, corpus)
    init = log.phase("init")[0]
    last = log.phase("pretrain-gen")[-1]
    assert last["nll_qr"] < init["nll_qr"] and last["nll_rq"] < init["nll_rq"]
    assert [r["epoch"] for r in log.phase("pretrain-disc")] == [1, 2, 3]
    assert not np.array_equal(disc_before, params_vec(model.disc_qr.parameters()))
    ev = log.phase("pretrain-disc-eval")[0]
    assert all(np.isfinite(v) for k, v in ev.items() if k != "phase")


def test_mle_only_skips_discriminator_pretraining():
    model, corpus = small_model(mode="mle-only")
    disc_before = params_vec(model.disc_qr.parameters())
    log = pretrain(model, corpus)
    assert not log.phase("pretrain-disc")
    np.testing.assert_array_equal(disc_before, params_vec(model.disc_qr.parameters()))


def test_zero_dal_epochs_is_identity():
    model, corpus = small_model(dal_epochs=0)
    pretrain(model, corpus)
    snap = model.state_arrays()
    log = train_dal(model, corpus)
    assert log.records == []
    for k, v in snap.items():
        np.testing.assert_array_equal(v, model.state_arrays()[k])


@pytest.mark.parametrize("mode", trainer.MODES)
def test_training_reproducible(mode, tmp_path):
    runs = []
    for i in range(2):
        model, corpus = small_model(mode=mode)
        log = pretrain(model, corpus)
        log.extend(train_dal(model, corpus, out_dir=tmp_path / str(i)))
        model.save(tmp_path / f"{i}.ckpt")
        runs.append(log.records)
        assert len(log.phase("dal")) == model.config.dal_epochs
    assert runs[0] == runs[1]
    assert (tmp_path / "0.ckpt").read_bytes() == (tmp_path / "1.ckpt").read_bytes()
    assert (tmp_path / "0" / "last.ckpt").read_bytes() == (tmp_path / "0.ckpt").read_bytes()


def test_dal_log_fields():
    model, corpus = small_model(mode="dual-adv")
    pretrain(model, corpus)
    rec = train_dal(model, corpus).records[-1]
    for k in ("upsilon", "nll_qr", "nll_rq", "disc_loss_qr", "disc_loss_rq", "reward_qr", "reward_rq",
              "baseline_qr", "baseline_rq"):
        assert rec[k] is not None and math.isfinite(rec[k])


def test_divergence_restores_last_good_state(monkeypatch, tmp_path):
    model, corpus = small_model(mode="mle-only", dal_epochs=3)
    pretrain(model, corpus)
    calls = {"n": 0}
    real = trainer.teacher_forcing_step
    per_epoch = math.ceil(len(corpus) / model.config.batch_size) * 2

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] > per_epoch:
            raise NonFiniteError("boom")
        return real(*a, **k)

    monkeypatch.setattr(trainer, "teacher_forcing_step", flaky)
    with pytest.raises(TrainingDiverged) as e:
        train_dal(model, corpus, out_dir=tmp_path)
    assert e.value.checkpoint_path == tmp_path / "last.ckpt"
    good = DalModel.load(tmp_path / "last.ckpt")
    assert model.epoch == good.epoch == 1
    for k, v in good.state_arrays().items():
        np.testing.assert_array_equal(v, model.state_arrays()[k])


# --- checkpoints ----------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    model, corpus = small_model()
    pretrain(model, corpus)
    model.baselines["qr"].value = 0.61
    model.save(tmp_path / "m.ckpt")
    back = DalModel.load(tmp_path / "m.ckpt")
    assert back.config == model.config and back.vocab == model.vocab
    assert back.baselines["qr"].value == 0.61 and back.corpus_fingerprint == corpus.fingerprint()
    assert back.lm_q == model.lm_q and back.lm_r == model.lm_r
    for k, v in model.state_arrays().items():
        np.testing.assert_array_equal(v, back.state_arrays()[k])
    back.save(tmp_path / "again.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_version_mismatch(tmp_path):
    checkpoint.write(tmp_path / "a.ckpt", {"x": np.arange(3.0)}, {"k": 1})
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    text = raw.decode("latin-1").replace('"format_version":1', '"format_version":7')
    (tmp_path / "b.ckpt").write_bytes(text.encode("latin-1"))
    with pytest.raises(checkpoint.CheckpointError, match="version 7"):
        checkpoint.read(tmp_path / "b.ckpt")
    (tmp_path / "c.ckpt").write_bytes(b"garbage")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.read(tmp_path / "c.ckpt")
    arrays, meta = checkpoint.read(tmp_path / "a.ckpt")
    np.testing.assert_array_equal(arrays["x"], np.arange(3.0)) and meta == {"k": 1}
