"""
Duality regularizer on the synthetic corpus
===========================================

Trains an MLE-only and a dual-only model on a reduced synthetic corpus and
compares the regularizer trend and the diversity of greedy outputs.
Takes well under a minute on one core.
"""

import numpy as np

from dal.data import SyntheticSpec, split_synthetic, synthesize_corpus, synthesize_queries
from dal.evaluation import distinct_n
from dal.seq2seq import greedy_decode
from dal.trainer import DalModel, TrainConfig, pretrain, train_dal

# a smaller corpus than the default: 3 safe responses shared by 10 queries
# each, plus 60 one-to-one pairs
spec = SyntheticSpec(n_safe=3, m=10, n_diverse=60, alphabet=30, min_len=3, max_len=5)
corpus = synthesize_corpus(spec, seed=0)
safe, diverse, safe_responses = split_synthetic(corpus)
print(len(corpus), "pairs,", len(safe), "of them share", len(safe_responses), "safe responses")

#%%
# Both runs share seed, budget and pretraining; only the DAL phase differs.
cfg = dict(emb_size=16, hidden_size=32, batch_size=8, pretrain_epochs_gen=20, dal_epochs=10, seed=0)
models = {}
for mode in ("mle-only", "dual-only"):
    m = DalModel.create(corpus.vocab, TrainConfig(mode=mode, **cfg))
    pretrain(m, corpus)
    log = train_dal(m, corpus)
    ups = [r["upsilon"] for r in log.records]
    print(f"{mode:10s} upsilon {ups[0]:8.2f} -> {ups[-1]:8.2f}   nll {log.records[-1]['nll_qr']:.2f}")
    models[mode] = m

#%%
# Diversity of greedy responses to unseen queries
queries = synthesize_queries(spec, 100, seed=1, exclude=corpus)
for mode, m in models.items():
    outs = [greedy_decode(m.gen_qr, q, 10) for q in queries]
    print(f"{mode:10s} distinct-1 {distinct_n(outs, 1):.3f}  distinct-2 {distinct_n(outs, 2):.3f}"
          f"  mean length {np.mean([len(o) for o in outs]):.2f}")
