"""
Decoding strategies side by side
================================

Greedy, beam, anti-LM and bidirectional reranking on one briefly trained
model, with per-query latency.
"""

from dal.data import SyntheticSpec, synthesize_corpus
from dal.evaluation import benchmark_latency
from dal.mmi import MmiConfig, mmi_anti_decode, mmi_bidi_candidates
from dal.seq2seq import beam_decode, greedy_decode
from dal.trainer import DalModel, TrainConfig, pretrain

spec = SyntheticSpec(n_safe=2, m=6, n_diverse=30, alphabet=20, min_len=2, max_len=4)
corpus = synthesize_corpus(spec, seed=3)
model = DalModel.create(corpus.vocab, TrainConfig(mode="mle-only", emb_size=16, hidden_size=24,
                                                  pretrain_epochs_gen=20))
pretrain(model, corpus)
V = model.vocab
q = corpus.pairs[0].query
print("query:", V.decode(q), "| reference:", V.decode(corpus.pairs[0].response))

#%%
# beam search returns the N-best list with model scores
for toks, score in beam_decode(model.gen_qr, q, 4, 8):
    print(f"  beam  {score:7.3f}  {V.decode(toks)}")

#%%
# anti-LM subtracts a weighted bigram score for the first few tokens;
# bidi reranks the N-best list with the reverse model
cfg = MmiConfig(anti_lm_weight=0.5, anti_lm_threshold=3, bidi_nbest=5, bidi_reverse_weight=0.5)
print("greedy   ", V.decode(greedy_decode(model.gen_qr, q, 8)))
print("mmi-anti ", V.decode(mmi_anti_decode(model.gen_qr, model.lm_r, cfg, q, 8)))
best, cands, _ = mmi_bidi_candidates(model.gen_qr, model.gen_rq, cfg, q, 8)
print("mmi-bidi ", V.decode(best))
for toks, fwd, rev, comb in cands:
    print(f"    fwd {fwd:7.3f} rev {rev:7.3f} combined {comb:7.3f}  {V.decode(toks)}")

#%%
qs = [p.query for p in corpus.pairs[:20]]
for name, fn in [("greedy", lambda x: greedy_decode(model.gen_qr, x, 8)),
                 ("mmi-anti", lambda x: mmi_anti_decode(model.gen_qr, model.lm_r, cfg, x, 8)),
                 ("mmi-bidi-5", lambda x: mmi_bidi_candidates(model.gen_qr, model.gen_rq, cfg, x, 8))]:
    print(f"{name:10s} {benchmark_latency(fn, qs, 3):6.2f} ms/query")
