"""Command-line entry point: ``dal {synth-data,train,generate,evaluate,bench}``.

Every flag can also come from ``--config FILE`` (``key = value`` lines, ``#``
comments, keys are flag names with ``-`` or ``_``); flags on the command line
win. Each command writes its fully resolved configuration next to its outputs,
and that file can be passed back through ``--config`` to repeat the run.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint
from .data import CorpusError, SyntheticSpec, load_corpus, save_corpus, synthesize_corpus, synthesize_queries
from .evaluation import benchmark_latency, evaluate_systems
from .mmi import MmiConfig, mmi_anti_decode, mmi_bidi_decode
from .seq2seq import beam_decode, greedy_decode
from .trainer import MODES, DalModel, TrainConfig, TrainingDiverged, pretrain, stream_rng, train_dal

logger = logging.getLogger("dal")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


REQUIRED = {
    "synth-data": ("out",),
    "train": ("corpus", "out"),
    "generate": ("checkpoint", "queries", "out"),
    "evaluate": ("checkpoint", "queries", "out"),
    "bench": ("checkpoint", "queries", "out"),
}


def _add_mmi(p):
    d = MmiConfig()
    p.add_argument("--anti-lm-weight", type=float, default=d.anti_lm_weight)
    p.add_argument("--anti-lm-threshold", type=int, default=d.anti_lm_threshold)
    p.add_argument("--bidi-nbest", type=int, default=d.bidi_nbest)
    p.add_argument("--bidi-reverse-weight", type=float, default=d.bidi_reverse_weight)


def build_parser() -> _Parser:
    parser = _Parser(prog="dal", description="Dual adversarial training for paired sequence generation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value file; command-line flags override it")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--log-level", default="INFO")
        return p

    p = command("synth-data", "write a synthetic query/response corpus")
    p.add_argument("--out", help="corpus TSV path")
    s = SyntheticSpec()
    for f in ("n_safe", "m", "n_diverse", "alphabet", "min_len", "max_len"):
        p.add_argument("--" + f.replace("_", "-"), type=int, default=getattr(s, f))
    p.add_argument("--queries-out", help="also write held-out queries (one per line) here")
    p.add_argument("--n-queries", type=int, default=200)

    p = command("train", "pretrain and DAL-train a model")
    p.add_argument("--corpus")
    p.add_argument("--out", help="run directory")
    p.add_argument("--max-vocab", type=int, default=2000)
    c = TrainConfig()
    for f, v in c.to_dict().items():
        if f == "seed":
            continue
        if f == "mode":
            p.add_argument("--mode", choices=MODES, default=v)
        else:
            p.add_argument("--" + f.replace("_", "-"), type=type(v), default=v)

    p = command("generate", "decode responses for a query file")
    p.add_argument("--checkpoint")
    p.add_argument("--queries")
    p.add_argument("--out", help="response file, one per line")
    p.add_argument("--decoder", choices=("greedy", "beam", "mmi-anti", "mmi-bidi"), default="greedy")
    p.add_argument("--beam-size", type=int, default=5)
    p.add_argument("--max-len", type=int, default=None)
    _add_mmi(p)

    p = command("evaluate", "diversity, latency and duality report for all systems")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline-checkpoint", help="MLE-only checkpoint for the seq2seq and MMI systems")
    p.add_argument("--queries")
    p.add_argument("--out", help="report directory")
    p.add_argument("--latency-repetitions", type=int, default=1)
    _add_mmi(p)

    p = command("bench", "per-query latency of every decoder")
    p.add_argument("--checkpoint")
    p.add_argument("--queries")
    p.add_argument("--out", help="key = value result file")
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--nbest", default="5,10,20", help="comma-separated N-best sizes for mmi-bidi")
    p.add_argument("--max-len", type=int, default=None)
    _add_mmi(p)
    return parser


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (x.strip() for x in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage().strip())
    sub = parser._subparsers._group_actions[0].choices[args.command]
    if args.config:
        actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        defaults = {}
        for k, v in read_config_file(args.config).items():
            if k not in actions:
                raise UsageError(f"{args.config}: unknown key {k!r} for {args.command}")
            a = actions[k]
            if v == "None":
                defaults[k] = None
                continue
            try:
                val = a.type(v) if a.type is not None else v
            except ValueError as e:
                raise UsageError(f"{args.config}: bad value for {k}: {v!r}") from e
            if a.choices is not None and val not in a.choices:
                raise UsageError(f"{args.config}: {k} must be one of {list(a.choices)}")
            defaults[k] = val
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return args


def write_resolved_config(args, path) -> None:
    items = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    lines = [f"# resolved configuration for: dal {args.command}"]
    lines += [f"{k} = {v}" for k, v in sorted(items.items())]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _mmi_config(args) -> MmiConfig:
    try:
        return MmiConfig(args.anti_lm_weight, args.anti_lm_threshold, args.bidi_nbest, args.bidi_reverse_weight)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _read_queries(path, vocab):
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise CorpusError(f"cannot read queries {path}: {e}") from e
    queries = [vocab.encode(line) for line in lines if line.split()]
    if not queries:
        raise CorpusError(f"no queries in {path}")
    return queries


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args):
    try:
        spec = SyntheticSpec(args.n_safe, args.m, args.n_diverse, args.alphabet, args.min_len, args.max_len)
        corpus = synthesize_corpus(spec, args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    if args.queries_out:
        qs = synthesize_queries(spec, args.n_queries, int(stream_rng(args.seed, "heldout").integers(2**31)), corpus)
        Path(args.queries_out).write_text("".join(corpus.vocab.decode(q) + "\n" for q in qs), encoding="utf-8")
    write_resolved_config(args, out.with_name(out.name + ".config"))
    logger.info("wrote %d pairs to %s (fingerprint %s)", len(corpus), out, corpus.fingerprint())


def cmd_train(args):
    fields = {k: getattr(args, k) for k in TrainConfig().to_dict() if k != "seed"}
    try:
        cfg = TrainConfig(seed=args.seed, **fields)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(args, out / "config.txt")
    corpus = load_corpus(args.corpus, max_len=cfg.max_len, max_size=args.max_vocab)
    logger.info("corpus: %d pairs, vocab %d, %d malformed line(s)", len(corpus), len(corpus.vocab), corpus.malformed)
    model = DalModel.create(corpus.vocab, cfg)
    log = pretrain(model, corpus)
    try:
        log.extend(train_dal(model, corpus, out_dir=out))
    finally:
        (out / "train_log.json").write_text(json.dumps(log.to_dict(), sort_keys=True, indent=1) + "\n",
                                            encoding="utf-8")
    model.save(out / "final.ckpt")
    logger.info("wrote %s", out / "final.ckpt")


def _decoder_fn(model, name, args, max_len):
    if name == "greedy":
        return lambda q: greedy_decode(model.gen_qr, q, max_len)
    if name == "beam":
        if args.beam_size < 1:
            raise UsageError("--beam-size must be >= 1")
        return lambda q: beam_decode(model.gen_qr, q, args.beam_size, max_len)[0][0]
    cfg = _mmi_config(args)
    if name == "mmi-anti":
        return lambda q: mmi_anti_decode(model.gen_qr, model.lm_r, cfg, q, max_len)
    return lambda q: mmi_bidi_decode(model.gen_qr, model.gen_rq, cfg, q, max_len)


def cmd_generate(args):
    model = DalModel.load(args.checkpoint)
    max_len = args.max_len if args.max_len is not None else model.config.max_len
    fn = _decoder_fn(model, args.decoder, args, max_len)
    queries = _read_queries(args.queries, model.vocab)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(model.vocab.decode(fn(q)) + "\n" for q in queries), encoding="utf-8")
    write_resolved_config(args, out.with_name(out.name + ".config"))


def cmd_evaluate(args):
    cfg = _mmi_config(args)
    if args.latency_repetitions < 1:
        raise UsageError("--latency-repetitions must be >= 1")
    model = DalModel.load(args.checkpoint)
    baseline = DalModel.load(args.baseline_checkpoint) if args.baseline_checkpoint else None
    if baseline is not None and baseline.vocab != model.vocab:
        raise CorpusError("baseline checkpoint uses a different vocabulary")
    queries = _read_queries(args.queries, model.vocab)
    out = Path(args.out)
    write_resolved_config(args, out / "config.txt")
    report = evaluate_systems(model, cfg, queries, out, baseline=baseline, seed=args.seed,
                              latency_repetitions=args.latency_repetitions)
    for name, s in report.systems.items():
        logger.info("%-20s distinct-1 %.4f distinct-2 %.4f len %.2f %.2f ms", name, s.distinct_1, s.distinct_2,
                    s.mean_length, s.latency_ms)


def cmd_bench(args):
    if args.repetitions < 1:
        raise UsageError("--repetitions must be >= 1")
    try:
        sizes = [int(x) for x in args.nbest.split(",") if x.strip()]
    except ValueError as e:
        raise UsageError(f"bad --nbest {args.nbest!r}") from e
    base = _mmi_config(args)
    model = DalModel.load(args.checkpoint)
    max_len = args.max_len if args.max_len is not None else model.config.max_len
    queries = _read_queries(args.queries, model.vocab)
    systems = {"greedy": lambda q: greedy_decode(model.gen_qr, q, max_len),
               "mmi-anti": lambda q: mmi_anti_decode(model.gen_qr, model.lm_r, base, q, max_len)}
    for n in sizes:
        try:
            cfg = MmiConfig(base.anti_lm_weight, base.anti_lm_threshold, n, base.bidi_reverse_weight)
        except ValueError as e:
            raise UsageError(str(e)) from e
        systems[f"mmi-bidi-{n}"] = (lambda c: lambda q: mmi_bidi_decode(model.gen_qr, model.gen_rq, c, q, max_len))(cfg)
    lines = [f"repetitions = {args.repetitions}", f"n_queries = {len(queries)}"]
    for name, fn in systems.items():
        ms = benchmark_latency(fn, queries, args.repetitions)
        lines.append(f"latency_ms.{name} = {ms!r}")
        logger.info("%-12s %.3f ms/query", name, ms)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_resolved_config(args, out.with_name(out.name + ".config"))


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "bench": cmd_bench}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    level = getattr(logging, str(args.log_level).upper(), None)
    if not isinstance(level, int):
        print(f"unknown log level {args.log_level!r}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"error: {e} (last good checkpoint: {e.checkpoint_path})", file=sys.stderr)
        return EXIT_RUNTIME
    except (CorpusError, checkpoint.CheckpointError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())
