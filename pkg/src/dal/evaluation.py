"""Diversity metrics, decode latency, duality diagnostics and evaluation reports.

Report file (``report.txt``) schema, one ``key = value`` per line, ``#`` comments:

    format                      dal-eval-report/1
    seed                        integer
    distinct_level              "token" (n-grams over token ids, BOS/EOS excluded)
    n_queries                   integer
    queries_fingerprint         sha256 prefix of the encoded query list
    corpus_fingerprint          training-corpus fingerprint of the evaluated model
    baseline_corpus_fingerprint same, for the model behind the baseline systems
    config.<field>              training config of the evaluated model
    mmi.<field>                 MmiConfig used by the MMI systems
    systems                     comma-separated system names
    system.<name>.decoder       decode procedure and its width
    system.<name>.distinct_1    in [0, 1]
    system.<name>.distinct_2    in [0, 1]
    system.<name>.mean_length   mean response length in tokens (EOS excluded)
    system.<name>.latency_ms    mean wall-clock ms per query, batch size 1
    system.<name>.duality_gap   mean |residual| (sqrt of upsilon) over responses the LMs
                                can score (non-empty, no PAD or BOS); nan if none
    system.<name>.mean_log_k    mean of log P_q(q) - log P_r(r) over the same pairs
    system.<name>.fallbacks     queries where the bidirectional rerank fell back to greedy

Per system, ``responses.<name>.txt`` holds one decoded response per line, aligned
with the query list, and ``duality.<name>.tsv`` the per-pair diagnostics.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import no_grad
from .data import BOS, EOS, PAD, TokenSeq
from .mmi import MmiConfig, mmi_anti_decode, mmi_bidi_candidates
from .seq2seq import greedy_decode, target_log_probs
from .trainer import DalModel

REPORT_FORMAT = "dal-eval-report/1"

ANNOTATION_RUBRIC = """\
Scoring guide for exported responses (one integer per response line):

  2  reads fluently, fits the query, and says something specific to it
  1  an acceptable reply to the query, but generic or low on content
  0  off-topic, incoherent, or ungrammatical

Score every response independently; average over annotators per response.
"""

_SKIP = {BOS, EOS, PAD}


def _tokens(resp) -> list:
    if isinstance(resp, str):
        return resp.split()
    return [t for t in resp if t not in _SKIP]


def distinct_n(responses: Sequence, n: int) -> float:
    """Distinct n-grams over total n-grams, pooled across all responses.

    Responses may be token-id sequences (BOS/EOS/PAD are dropped) or
    whitespace-tokenised strings. Returns 0 when there are no n-grams.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    grams = []
    for r in responses:
        t = _tokens(r)
        grams.extend(tuple(t[i:i + n]) for i in range(len(t) - n + 1))
    if not grams:
        return 0.0
    return len(set(grams)) / len(grams)


def benchmark_latency(decoder: Callable[[TokenSeq], object], queries: Sequence[TokenSeq],
                      repetitions: int = 10) -> float:
    """Mean wall-clock milliseconds per query, one query at a time.

    One untimed warm-up pass precedes ``repetitions`` timed passes.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if not queries:
        raise ValueError("no queries to benchmark")
    for q in queries:
        decoder(q)
    total = 0.0
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for q in queries:
            decoder(q)
        total += time.perf_counter() - t0
    ms = 1000.0 * total / (repetitions * len(queries))
    # perf_counter can tick coarser than a no-op decoder
    return max(ms, np.finfo(float).tiny)


def scoreable(response) -> bool:
    return bool(response) and PAD not in response and BOS not in response


def duality_diagnostics(model: DalModel, queries: Sequence[TokenSeq], responses: Sequence[TokenSeq]):
    """Per-pair ``(|residual|, log k)`` for scoreable responses.

    Empty responses and responses containing PAD or BOS (which an untrained
    generator can emit but the bigram LMs cannot score) are skipped; the
    returned arrays align with the remaining responses in order.

    ``log k = log P_q(q) - log P_r(r)``; the residual is
    ``log P(q|r) - log P(r|q) - log k``.
    """
    idx = [i for i, r in enumerate(responses) if scoreable(r)]
    if not idx:
        return np.zeros(0), np.zeros(0)
    q = [tuple(queries[i]) for i in idx]
    r = [tuple(responses[i]) for i in idx]
    log_k = np.array([model.lm_q.sequence_log_prob(a) - model.lm_r.sequence_log_prob(b) for a, b in zip(q, r)])
    with no_grad():
        fwd = target_log_probs(model.gen_qr, q, r).data
        rev = target_log_probs(model.gen_rq, r, q).data
    return np.abs(rev - fwd - log_k), log_k


@dataclass
class SystemResult:
    name: str
    decoder: str
    responses: list
    distinct_1: float
    distinct_2: float
    mean_length: float
    latency_ms: float
    duality_gap: float
    mean_log_k: float
    fallbacks: int = 0


@dataclass
class EvalReport:
    seed: int
    n_queries: int
    queries_fingerprint: str
    corpus_fingerprint: str
    baseline_corpus_fingerprint: str
    config: dict
    mmi: dict
    systems: dict = field(default_factory=dict)
    distinct_level: str = "token"

    def lines(self) -> list[str]:
        out = ["# evaluation report; see dal.evaluation for the schema",
               f"format = {REPORT_FORMAT}",
               f"seed = {self.seed}",
               f"distinct_level = {self.distinct_level}",
               f"n_queries = {self.n_queries}",
               f"queries_fingerprint = {self.queries_fingerprint}",
               f"corpus_fingerprint = {self.corpus_fingerprint}",
               f"baseline_corpus_fingerprint = {self.baseline_corpus_fingerprint}"]
        out += [f"config.{k} = {v}" for k, v in sorted(self.config.items())]
        out += [f"mmi.{k} = {v}" for k, v in sorted(self.mmi.items())]
        out.append(f"systems = {','.join(self.systems)}")
        for name, s in self.systems.items():
            for key in ("decoder", "distinct_1", "distinct_2", "mean_length", "latency_ms",
                        "duality_gap", "mean_log_k", "fallbacks"):
                v = getattr(s, key)
                out.append(f"system.{name}.{key} = {v!r}" if isinstance(v, float) else f"system.{name}.{key} = {v}")
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")


def read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def queries_fingerprint(queries: Sequence[TokenSeq]) -> str:
    h = hashlib.sha256()
    for q in queries:
        h.update((" ".join(map(str, q)) + "\n").encode())
    return h.hexdigest()[:16]


def decoders(model: DalModel, mmi_cfg: MmiConfig, baseline: DalModel | None = None, max_len: int | None = None):
    """Name -> (description, single-query decode function) for every evaluated system.

    The seq2seq and MMI systems use ``baseline`` (an MLE-trained model) when
    given, otherwise ``model`` itself.
    """
    base = baseline if baseline is not None else model
    L = max_len if max_len is not None else model.config.max_len
    n = mmi_cfg.bidi_nbest
    return {
        "seq2seq-greedy": ("greedy", lambda q: greedy_decode(base.gen_qr, q, L)),
        f"{model.config.mode}-greedy": ("greedy", lambda q: greedy_decode(model.gen_qr, q, L)),
        "mmi-anti": (f"mmi-anti(width={n})", lambda q: mmi_anti_decode(base.gen_qr, base.lm_r, mmi_cfg, q, L)),
        f"mmi-bidi-{n}": (f"mmi-bidi(nbest={n})", lambda q: mmi_bidi_candidates(base.gen_qr, base.gen_rq, mmi_cfg, q, L)),
    }


def evaluate_systems(model: DalModel, mmi_cfg: MmiConfig, eval_queries: Sequence[TokenSeq], out_path,
                     baseline: DalModel | None = None, seed: int = 0, latency_repetitions: int = 1,
                     vocab=None) -> EvalReport:
    """Decode ``eval_queries`` with every system, write report and response files to ``out_path``."""
    if not eval_queries:
        raise ValueError("no evaluation queries")
    if model.lm_q is None or model.lm_r is None:
        raise ValueError("model has no fitted language models")
    queries = [tuple(q) for q in eval_queries]
    vocab = vocab if vocab is not None else model.vocab
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    base = baseline if baseline is not None else model
    report = EvalReport(seed=seed, n_queries=len(queries), queries_fingerprint=queries_fingerprint(queries),
                        corpus_fingerprint=model.corpus_fingerprint,
                        baseline_corpus_fingerprint=base.corpus_fingerprint,
                        config=model.config.to_dict(), mmi=vars(mmi_cfg).copy())
    for name, (desc, fn) in decoders(model, mmi_cfg, baseline).items():
        fallbacks = 0
        responses = []
        for q in queries:
            res = fn(q)
            if name.startswith("mmi-bidi"):
                res, _, fell = res
                fallbacks += int(fell)
            responses.append(tuple(res))
        owner = model if name == f"{model.config.mode}-greedy" else base
        gap, log_k = duality_diagnostics(owner, queries, responses)
        latency = benchmark_latency(fn, queries, latency_repetitions)
        report.systems[name] = SystemResult(
            name=name, decoder=desc, responses=responses,
            distinct_1=distinct_n(responses, 1), distinct_2=distinct_n(responses, 2),
            mean_length=float(np.mean([len(r) for r in responses])), latency_ms=latency,
            duality_gap=float(gap.mean()) if gap.size else float("nan"),
            mean_log_k=float(log_k.mean()) if log_k.size else float("nan"), fallbacks=fallbacks)
        (out / f"responses.{name}.txt").write_text(
            "".join(vocab.decode(r) + "\n" for r in responses), encoding="utf-8")
        rows = ["query\tresponse\tlog_k\tgap"]
        j = 0
        for q, r in zip(queries, responses):
            if scoreable(r):
                rows.append(f"{vocab.decode(q)}\t{vocab.decode(r)}\t{log_k[j]!r}\t{gap[j]!r}")
                j += 1
            else:
                rows.append(f"{vocab.decode(q)}\t\t\t")
        (out / f"duality.{name}.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    (out / "queries.txt").write_text("".join(vocab.decode(q) + "\n" for q in queries), encoding="utf-8")
    (out / "RUBRIC.txt").write_text(ANNOTATION_RUBRIC, encoding="utf-8")
    report.write(out / "report.txt")
    return report
