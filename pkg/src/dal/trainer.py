"""Dual adversarial training of two directional generators.

Each generator update combines the gradient of the squared duality residual

    upsilon = (log P_r(r) + log P(q|r) - log P_q(q) - log P(r|q))**2

with a REINFORCE estimate of the discriminator reward, and is followed by a
teacher-forcing (maximum likelihood) update on the same real batch. The
``mode`` switch selects which of the two signals are active.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import bigram, checkpoint
from .autodiff import NonFiniteError, Tape, Tensor, no_grad
from .data import EOS, Corpus, QRPair, TokenSeq, Vocab, batch_iter
from .discriminator import DiscriminatorParams, discriminator_loss, discriminator_step, score_pairs
from .seq2seq import Seq2SeqParams, batch_nll, direction_io, mle_step, sample_batch, target_log_probs

logger = logging.getLogger(__name__)

MODES = ("mle-only", "dual-only", "adv-only", "dual-adv")
DIRECTIONS = ("qr", "rq")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint_path=None):
        super().__init__(msg)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    lambda_qr: float = 1.0
    lambda_rq: float = 1.0
    d: int = 1
    g: int = 1
    lr_gen: float = 0.5
    lr_disc: float = 0.5
    baseline_decay: float = 0.9
    pretrain_epochs_gen: int = 30
    pretrain_epochs_disc: int = 20
    dal_epochs: int = 30
    batch_size: int = 32
    max_len: int = 20
    seed: int = 0
    mode: str = "dual-adv"
    emb_size: int = 32
    hidden_size: int = 64
    clip: float = 5.0
    lm_k: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_qr < 0 or self.lambda_rq < 0:
            raise ValueError("lambda weights must be non-negative")
        if self.uses_adversary and (self.d < 1 or self.g < 1):
            raise ValueError("d and g must be >= 1 when adversarial training is enabled")
        if self.g < 1:
            raise ValueError("g must be >= 1")
        if not 0 <= self.baseline_decay < 1:
            raise ValueError("baseline_decay must be in [0, 1)")
        if min(self.pretrain_epochs_gen, self.pretrain_epochs_disc, self.dal_epochs) < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.max_len < 1:
            raise ValueError("batch_size and max_len must be >= 1")

    @property
    def uses_adversary(self) -> bool:
        return self.mode in ("adv-only", "dual-adv")

    @property
    def uses_duality(self) -> bool:
        return self.mode in ("dual-only", "dual-adv")

    def lam(self, direction: str) -> float:
        return self.lambda_qr if direction == "qr" else self.lambda_rq

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RewardBaseline:
    value: float = 0.5
    decay: float = 0.9

    def update(self, mean_reward: float) -> float:
        self.value = self.decay * self.value + (1.0 - self.decay) * float(mean_reward)
        return self.value


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named purpose, so e.g. generator batch order
    does not depend on whether discriminators are trained."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class DalModel:
    gen_qr: Seq2SeqParams
    gen_rq: Seq2SeqParams
    disc_qr: DiscriminatorParams
    disc_rq: DiscriminatorParams
    vocab: Vocab
    config: TrainConfig
    lm_q: bigram.BigramLM | None = None
    lm_r: bigram.BigramLM | None = None
    baselines: dict = field(default_factory=dict)
    epoch: int = 0
    corpus_fingerprint: str = ""

    @classmethod
    def create(cls, vocab: Vocab, config: TrainConfig) -> "DalModel":
        V, E, H = len(vocab), config.emb_size, config.hidden_size
        seed = lambda name: int(stream_rng(config.seed, name).integers(2**31))  # noqa: E731
        return cls(
            gen_qr=Seq2SeqParams.init(V, E, H, seed=seed("init/gen_qr")),
            gen_rq=Seq2SeqParams.init(V, E, H, seed=seed("init/gen_rq")),
            disc_qr=DiscriminatorParams.init(V, E, H, seed=seed("init/disc_qr")),
            disc_rq=DiscriminatorParams.init(V, E, H, seed=seed("init/disc_rq")),
            vocab=vocab, config=config,
            baselines={d: RewardBaseline(0.5, config.baseline_decay) for d in DIRECTIONS},
        )

    def generator(self, direction: str) -> Seq2SeqParams:
        return self.gen_qr if direction == "qr" else self.gen_rq

    def discriminator(self, direction: str) -> DiscriminatorParams:
        return self.disc_qr if direction == "qr" else self.disc_rq

    def fit_language_models(self, corpus: Corpus):
        V = len(self.vocab)
        self.lm_q = bigram.fit([p.query for p in corpus.pairs], V, self.config.lm_k)
        self.lm_r = bigram.fit([p.response for p in corpus.pairs], V, self.config.lm_k)
        self.corpus_fingerprint = corpus.fingerprint()

    # -- state snapshots -------------------------------------------------

    def _param_sets(self):
        return {"gen_qr": self.gen_qr, "gen_rq": self.gen_rq, "disc_qr": self.disc_qr, "disc_rq": self.disc_rq}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, ps in self._param_sets().items():
            for k, t in ps.tensors.items():
                out[f"{prefix}/{k}"] = t.data
        for name, lm in (("lm_q", self.lm_q), ("lm_r", self.lm_r)):
            if lm is not None:
                for k, a in lm.to_arrays().items():
                    out[f"{name}/{k}"] = a
        return out

    def snapshot(self) -> dict:
        return {"arrays": {k: v.copy() for k, v in self.state_arrays().items()},
                "baselines": {d: b.value for d, b in self.baselines.items()}, "epoch": self.epoch}

    def restore(self, snap: dict):
        for prefix, ps in self._param_sets().items():
            for k, t in ps.tensors.items():
                t.data = snap["arrays"][f"{prefix}/{k}"].copy()
                t.grad = None
        for d, v in snap["baselines"].items():
            self.baselines[d].value = v
        self.epoch = snap["epoch"]

    # -- checkpoints -----------------------------------------------------

    def save(self, path) -> None:
        meta = {"config": self.config.to_dict(), "vocab": list(self.vocab.itos), "epoch": self.epoch,
                "baselines": {d: b.value for d, b in self.baselines.items()},
                "corpus_fingerprint": self.corpus_fingerprint,
                "sizes": {"fc_size": self.disc_qr.fc_size}}
        checkpoint.write(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> "DalModel":
        arrays, meta = checkpoint.read(path)
        config = TrainConfig(**meta["config"])
        vocab = Vocab.from_tokens(meta["vocab"][4:])
        if list(vocab.itos) != meta["vocab"]:
            raise checkpoint.CheckpointError(f"{path}: reserved vocabulary entries do not match")
        model = cls.create(vocab, config)
        for prefix, ps in model._param_sets().items():
            for k, t in ps.tensors.items():
                a = arrays[f"{prefix}/{k}"]
                if a.shape != t.shape:
                    raise checkpoint.CheckpointError(f"{path}: {prefix}/{k} has shape {a.shape}, expected {t.shape}")
                t.data = a.copy()
        for name in ("lm_q", "lm_r"):
            if f"{name}/meta" in arrays:
                lm = bigram.BigramLM.from_arrays({k: arrays[f"{name}/{k}"] for k in ("pairs", "counts", "meta")})
                setattr(model, name, lm)
        for d, v in meta["baselines"].items():
            model.baselines[d].value = float(v)
        model.epoch = int(meta["epoch"])
        model.corpus_fingerprint = meta.get("corpus_fingerprint", "")
        return model


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def add(self, **rec):
        self.records.append(rec)
        return rec

    def phase(self, name: str) -> list[dict]:
        return [r for r in self.records if r["phase"] == name]

    def extend(self, other: "TrainLog"):
        self.records.extend(other.records)

    def to_dict(self):
        return {"records": self.records}


# ---------------------------------------------------------------------------
# dual signal
# ---------------------------------------------------------------------------

def _lm_offset(model: DalModel, batch: Sequence[QRPair]) -> np.ndarray:
    """log P_r(r) - log P_q(q) per pair (constants of the residual)."""
    if model.lm_q is None or model.lm_r is None:
        raise RuntimeError("language models are not fitted; run pretrain first")
    return np.array([model.lm_r.sequence_log_prob(p.response) - model.lm_q.sequence_log_prob(p.query)
                     for p in batch])


def duality_residuals(model: DalModel, batch: Sequence[QRPair], grad: Sequence[str] = DIRECTIONS) -> Tensor:
    """Per-pair residual of the log joint-probability identity, shape (B,).

    Only the generators named in ``grad`` are recorded for differentiation;
    the others enter as constants.
    """
    q = [p.query for p in batch]
    r = [p.response for p in batch]

    def lp(direction, src, tgt):
        if direction in grad:
            return target_log_probs(model.generator(direction), src, tgt)
        with no_grad():
            return ad.constant(target_log_probs(model.generator(direction), src, tgt).data)

    fwd = lp("qr", q, r)
    rev = lp("rq", r, q)
    return ad.add(ad.add(ad.constant(_lm_offset(model, batch)), rev), ad.scale(fwd, -1.0))


def dual_regularizer(model: DalModel, pair: QRPair) -> Tensor:
    """Squared duality residual of one real pair, differentiable in both generators."""
    res = duality_residuals(model, [pair])
    return ad.sum(ad.mul(res, res))


def _upsilon_loss(model, batch, direction) -> Tensor:
    res = duality_residuals(model, batch, grad=(direction,))
    return ad.scale(ad.sum(ad.mul(res, res)), 1.0 / len(batch))


def upsilon_values(model: DalModel, batch: Sequence[QRPair]) -> np.ndarray:
    with no_grad():
        res = duality_residuals(model, batch, grad=())
    return res.data ** 2


def dual_step(model: DalModel, batch: Sequence[QRPair], direction: str, lr: float) -> float:
    """Gradient step on mean upsilon for one generator; returns pre-update mean upsilon."""
    with Tape() as tape:
        loss = _upsilon_loss(model, batch, direction)
    ps = model.generator(direction).parameters()
    ad.backward(loss, tape, wrt=ps)
    ad.optimizer_step(ps, lr, model.config.clip)
    return loss.item()


# ---------------------------------------------------------------------------
# adversarial signal
# ---------------------------------------------------------------------------

def _disc_inputs(sources, outputs, direction):
    # an empty generated utterance is shown to the discriminator as a lone EOS
    outs = [o if o else (EOS,) for o in outputs]
    return (list(sources), outs) if direction == "qr" else (outs, list(sources))


def rewards(discriminator: DiscriminatorParams, sources, outputs, direction: str) -> np.ndarray:
    qs, rs = _disc_inputs(sources, outputs, direction)
    return score_pairs(discriminator, qs, rs)


def _pg_surrogate(generator, discriminator, baseline, sources, direction, max_len, rng):
    """Returns (surrogate tensor = mean (R-b) log p(y|x), rewards)."""
    samples, _, ended = sample_batch(generator, sources, max_len, rng)
    R = rewards(discriminator, sources, samples, direction)
    lp = target_log_probs(generator, sources, samples, eos=ended)
    adv = ad.constant(R - baseline.value)
    return ad.scale(ad.sum(ad.mul(lp, adv)), 1.0 / len(sources)), R


def policy_gradient_step(generator: Seq2SeqParams, discriminator: DiscriminatorParams, baseline: RewardBaseline,
                         sources: Sequence[TokenSeq], direction: str, lr: float, rng_seed: int,
                         max_len: int = 20, clip: float = 5.0) -> float:
    """REINFORCE step with a frozen discriminator as terminal reward; returns mean reward."""
    if not sources:
        raise ValueError("empty source batch")
    rng = np.random.default_rng(rng_seed)
    with Tape() as tape:
        surrogate, R = _pg_surrogate(generator, discriminator, baseline, sources, direction, max_len, rng)
        loss = ad.scale(surrogate, -1.0)
    ps = generator.parameters()
    ad.backward(loss, tape, wrt=ps)
    ad.optimizer_step(ps, lr, clip)
    baseline.update(R.mean())
    return float(R.mean())


def combined_generator_step(model: DalModel, batch: Sequence[QRPair], direction: str, lr: float,
                            rng_seed: int) -> tuple[float, float]:
    """One step on ``upsilon - lambda * J``; returns (mean upsilon, mean reward)."""
    cfg = model.config
    gen, disc = model.generator(direction), model.discriminator(direction)
    baseline = model.baselines[direction]
    src, _ = direction_io(batch, direction)
    rng = np.random.default_rng(rng_seed)
    with Tape() as tape:
        ups = _upsilon_loss(model, batch, direction)
        surrogate, R = _pg_surrogate(gen, disc, baseline, src, direction, cfg.max_len, rng)
        loss = ad.add(ups, ad.scale(surrogate, -cfg.lam(direction)))
    ps = gen.parameters()
    ad.backward(loss, tape, wrt=ps)
    ad.optimizer_step(ps, lr, cfg.clip)
    baseline.update(R.mean())
    return ups.item(), float(R.mean())


def teacher_forcing_step(model: DalModel, batch: Sequence[QRPair], direction: str, lr: float) -> float:
    return mle_step(model.generator(direction), batch, direction, lr, model.config.clip)


def _fake_pairs(model: DalModel, batch: Sequence[QRPair], direction: str, rng) -> list[QRPair]:
    src, _ = direction_io(batch, direction)
    samples, _, _ = sample_batch(model.generator(direction), src, model.config.max_len, rng)
    qs, rs = _disc_inputs(src, samples, direction)
    return [QRPair(q, r) for q, r in zip(qs, rs)]


def discriminator_update(model: DalModel, batch: Sequence[QRPair], direction: str, rng) -> float:
    fake = _fake_pairs(model, batch, direction, rng)
    return discriminator_step(model.discriminator(direction), batch, fake, model.config.lr_disc, model.config.clip)


def discriminator_diagnostics(model: DalModel, corpus: Corpus, seed: int = 0) -> dict:
    """Loss and mean real/fake scores of both discriminators over the corpus, fresh samples."""
    rng = stream_rng(seed, "diagnostics")
    out = {}
    for d in DIRECTIONS:
        losses, real, fake = [], [], []
        for batch in batch_iter(corpus, model.config.batch_size, 0):
            fakes = _fake_pairs(model, batch, d, rng)
            disc = model.discriminator(d)
            with no_grad():
                losses.append(discriminator_loss(disc, batch, fakes).item() * len(batch))
            real.extend(score_pairs(disc, [p.query for p in batch], [p.response for p in batch]))
            fake.extend(score_pairs(disc, [p.query for p in fakes], [p.response for p in fakes]))
        out[f"disc_loss_{d}"] = float(np.sum(losses) / len(corpus))
        out[f"real_score_{d}"] = float(np.mean(real))
        out[f"fake_score_{d}"] = float(np.mean(fake))
    return out


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def _batch_stream(corpus: Corpus, batch_size: int, rng: np.random.Generator) -> Iterator[list[QRPair]]:
    while True:
        yield from batch_iter(corpus, batch_size, int(rng.integers(2**31)))


def corpus_nll(model: DalModel, corpus: Corpus, direction: str) -> float:
    bs = model.config.batch_size
    tot = sum(batch_nll(model.generator(direction), corpus.pairs[i:i + bs], direction) * len(corpus.pairs[i:i + bs])
              for i in range(0, len(corpus), bs))
    return tot / len(corpus)


def _check_finite(**values):
    for k, v in values.items():
        if not math.isfinite(v):
            raise NonFiniteError(f"non-finite {k}: {v}")


def pretrain(model: DalModel, corpus: Corpus) -> TrainLog:
    """Fit both bigram LMs, MLE-pretrain both generators, then the discriminators.

    Discriminator pretraining is skipped in modes that never use them.
    """
    cfg = model.config
    log = TrainLog()
    model.fit_language_models(corpus)
    log.add(phase="init", nll_qr=corpus_nll(model, corpus, "qr"), nll_rq=corpus_nll(model, corpus, "rq"))
    rng = stream_rng(cfg.seed, "pretrain/gen-batches")
    for ep in range(cfg.pretrain_epochs_gen):
        nll = {d: [] for d in DIRECTIONS}
        for batch in batch_iter(corpus, cfg.batch_size, int(rng.integers(2**31))):
            for d in DIRECTIONS:
                nll[d].append(mle_step(model.generator(d), batch, d, cfg.lr_gen, cfg.clip))
        rec = log.add(phase="pretrain-gen", epoch=ep + 1, nll_qr=float(np.mean(nll["qr"])),
                      nll_rq=float(np.mean(nll["rq"])))
        _check_finite(nll_qr=rec["nll_qr"], nll_rq=rec["nll_rq"])
        logger.info("pretrain gen epoch %d: nll qr %.3f rq %.3f", ep + 1, rec["nll_qr"], rec["nll_rq"])
    if cfg.uses_adversary:
        brng = stream_rng(cfg.seed, "pretrain/disc-batches")
        srng = stream_rng(cfg.seed, "pretrain/disc-samples")
        for ep in range(cfg.pretrain_epochs_disc):
            losses = {d: [] for d in DIRECTIONS}
            for batch in batch_iter(corpus, cfg.batch_size, int(brng.integers(2**31))):
                for d in DIRECTIONS:
                    losses[d].append(discriminator_update(model, batch, d, srng))
            log.add(phase="pretrain-disc", epoch=ep + 1, disc_loss_qr=float(np.mean(losses["qr"])),
                    disc_loss_rq=float(np.mean(losses["rq"])))
        log.add(phase="pretrain-disc-eval", **discriminator_diagnostics(model, corpus, cfg.seed))
    return log


def _dal_epoch(model: DalModel, corpus: Corpus, streams: dict) -> dict:
    cfg = model.config
    n_iter = math.ceil(len(corpus) / cfg.batch_size)
    acc = {k: [] for k in ("upsilon", "nll_qr", "nll_rq", "disc_loss_qr", "disc_loss_rq",
                           "reward_qr", "reward_rq")}
    for _ in range(n_iter):
        if cfg.uses_adversary:
            for _ in range(cfg.d):
                batch = next(streams["disc"])
                for d in DIRECTIONS:
                    acc[f"disc_loss_{d}"].append(discriminator_update(model, batch, d, streams["disc_samples"]))
        for _ in range(cfg.g):
            batch = next(streams["gen"])
            for d in DIRECTIONS:
                lr = cfg.lr_gen
                if cfg.mode == "dual-adv":
                    seed = int(streams["gen_samples"].integers(2**63))
                    ups, rew = combined_generator_step(model, batch, d, lr, seed)
                    acc[f"reward_{d}"].append(rew)
                elif cfg.mode == "dual-only":
                    ups = dual_step(model, batch, d, lr)
                elif cfg.mode == "adv-only":
                    ups = float(upsilon_values(model, batch).mean()) if d == "qr" else None
                    seed = int(streams["gen_samples"].integers(2**63))
                    src, _ = direction_io(batch, d)
                    acc[f"reward_{d}"].append(policy_gradient_step(
                        model.generator(d), model.discriminator(d), model.baselines[d], src, d, lr, seed,
                        max_len=cfg.max_len, clip=cfg.clip))
                else:
                    ups = float(upsilon_values(model, batch).mean()) if d == "qr" else None
                if d == "qr":
                    acc["upsilon"].append(ups)
                acc[f"nll_{d}"].append(teacher_forcing_step(model, batch, d, lr))
    rec = {k: (float(np.mean(v)) if v else None) for k, v in acc.items()}
    rec["baseline_qr"] = model.baselines["qr"].value
    rec["baseline_rq"] = model.baselines["rq"].value
    _check_finite(**{k: v for k, v in rec.items() if v is not None})
    return rec


def train_dal(model: DalModel, corpus: Corpus, out_dir=None) -> TrainLog:
    """Alternate discriminator and generator updates for ``dal_epochs`` epochs.

    When ``out_dir`` is given, ``last.ckpt`` is rewritten after every epoch.
    A non-finite loss or parameter restores the last good state and raises
    :class:`TrainingDiverged`.
    """
    cfg = model.config
    if model.lm_q is None:
        model.fit_language_models(corpus)
    log = TrainLog()
    streams = {
        "gen": _batch_stream(corpus, cfg.batch_size, stream_rng(cfg.seed, "dal/gen-batches")),
        "disc": _batch_stream(corpus, cfg.batch_size, stream_rng(cfg.seed, "dal/disc-batches")),
        "gen_samples": stream_rng(cfg.seed, "dal/gen-samples"),
        "disc_samples": stream_rng(cfg.seed, "dal/disc-samples"),
    }
    ckpt = Path(out_dir) / "last.ckpt" if out_dir is not None else None
    for ep in range(cfg.dal_epochs):
        good = model.snapshot()
        try:
            rec = _dal_epoch(model, corpus, streams)
        except NonFiniteError as e:
            model.restore(good)
            where = ckpt if ckpt is not None and ckpt.exists() else None
            raise TrainingDiverged(f"training diverged in DAL epoch {ep + 1}: {e}", where) from e
        model.epoch += 1
        log.add(phase="dal", epoch=ep + 1, **rec)
        logger.info("dal epoch %d: %s", ep + 1, {k: round(v, 4) for k, v in rec.items() if v is not None})
        if ckpt is not None:
            model.save(ckpt)
    return log
