"""Command-line entry point: train / eval / probe / patterns / ablate / toy-corpus."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .ablation import DEFAULT_OMISSIONS, emit_ablation_report, omission_label, run_ablation, write_ablation_report
from .checkpoint import CheckpointError, load_checkpoint
from .data import BOS, EOS, RESERVED, IngestionError, Vocab, build_vocab, read_corpus, toy_corpus
from .model import ModelConfig
from .objective import GuidanceConfig
from .patterns import ALL_KINDS, PatternKind, build_pattern, emit_pattern_csv
from .probe import (ProbeDataError, emit_probe_report, generate_synthetic, probe_heads,
                    read_probe_tsv, write_probe_tsv)
from .trainer import (EVAL_SEED, CompatibilityError, TrainConfig, TrainingDivergedError,
                      evaluate_mlm, read_metrics_csv, train)

log = logging.getLogger("attnguide")

KIND_NAMES = "|".join(k.value for k in ALL_KINDS)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        help_ = action.help or ""
        if "%(default)" in help_ or action.default is argparse.SUPPRESS:
            return help_
        if action.option_strings or action.nargs in (argparse.OPTIONAL, argparse.ZERO_OR_MORE):
            help_ += " (default: %(default)s)"
        return help_


def _kind(text: str) -> PatternKind:
    try:
        return PatternKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _kind_list(text: str) -> frozenset:
    kinds = frozenset(_kind(k) for k in text.split(",") if k.strip())
    if not kinds:
        raise argparse.ArgumentTypeError("empty omission set")
    return kinds


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True, help="training text, one document per line")
    p.add_argument("--valid-corpus", default=None, help="held-out text evaluated after training")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--layers", type=int, default=2, help="encoder layers")
    p.add_argument("--heads", type=int, default=4, help="attention heads per layer")
    p.add_argument("--hidden", type=int, default=128, help="model width")
    p.add_argument("--seq-len", type=int, default=64, help="tokens per sequence including <s> and </s>")
    p.add_argument("--vocab-size", type=int, default=8192, help="vocabulary cap including reserved tokens")
    p.add_argument("--batch", type=int, default=32, help="sequences per batch")
    p.add_argument("--steps", type=int, default=20000, help="total planned optimizer steps")
    p.add_argument("--lr", type=float, default=1e-4, help="peak learning rate")
    p.add_argument("--warmup", type=int, default=0, help="linear warmup steps")
    p.add_argument("--lambda", dest="lam", metavar="LAMBDA", type=float, default=0.5, help="fraction of heads guided per layer")
    p.add_argument("--alpha0", type=float, default=100.0, help="initial AG weight, decayed linearly to 0")
    p.add_argument("--mask-prob", type=float, default=0.15, help="fraction of content tokens masked")
    p.add_argument("--attn-dropout", type=float, default=0.0, help="dropout on attention probabilities")
    p.add_argument("--seed", type=int, default=0, help="seed for initialisation, shuffling and masking")
    p.add_argument("--no-ag", action="store_true", help="train with the MLM loss only")
    p.add_argument("--bert-style-mask", action="store_true", help="80/10/10 mask/random/keep replacement")
    p.add_argument("--clip-norm", type=float, default=None, help="clip the global gradient norm")
    p.add_argument("--checkpoint-every", type=int, default=None,
                   help="steps between checkpoints (default: steps/10)")
    p.add_argument("--timing", action="store_true",
                   help="log wall-clock throughput in tokens_per_sec (otherwise 0, keeping metrics reproducible)")
    p.add_argument("--no-plot", action="store_true", help="skip figure output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attnguide", formatter_class=_Formatter,
                     description="Attention-guided masked language model toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", formatter_class=_Formatter, help="train a model")
    _add_train_flags(p)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("eval", formatter_class=_Formatter, help="validation MLM loss of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--corpus", required=True, help="held-out text, one document per line")
    p.add_argument("--vocab", default=None, help="vocabulary file that must match the checkpoint")
    p.add_argument("--seed", type=int, default=EVAL_SEED, help="masking seed")

    p = sub.add_parser("probe", formatter_class=_Formatter, help="antecedent-selection probe per head")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", default=None, help="probe TSV: sentence, mention, start, end")
    src.add_argument("--synthetic", type=int, default=None, metavar="N", help="generate N synthetic examples")
    p.add_argument("--distractor", action="store_true", help="insert a distractor sentence (synthetic only)")
    p.add_argument("--seed", type=int, default=0, help="synthetic generation seed")
    p.add_argument("--out", default="-", help="report CSV path, '-' for stdout")
    p.add_argument("--save-dataset", default=None, help="write the examples used as TSV")
    p.add_argument("--no-plot", action="store_true", help="skip figure output")

    p = sub.add_parser("patterns", formatter_class=_Formatter, help="emit a guidance pattern as CSV")
    p.add_argument("--kind", required=True, type=_kind, help=f"pattern kind: {KIND_NAMES}")
    size = p.add_mutually_exclusive_group(required=True)
    size.add_argument("--len", type=int, default=None, help="sequence length (content-free patterns)")
    size.add_argument("--sentence", default=None, help="whitespace-tokenized sentence; <s>/</s> added if absent")
    p.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    p.add_argument("--no-plot", action="store_true", help="skip figure output")

    p = sub.add_parser("ablate", formatter_class=_Formatter, help="leave-one-out pattern ablation")
    _add_train_flags(p)
    p.add_argument("--omit", action="append", type=_kind_list, default=None, metavar="KINDS",
                   help="comma list of kinds omitted together; repeat for several runs "
                        "(default: next,prev / first / period / delim)")
    p.add_argument("--probe-step", type=int, default=500, help="step at which losses are compared")
    p.add_argument("--refill", action="store_true", help="give omitted slots to [First]")

    p = sub.add_parser("toy-corpus", formatter_class=_Formatter, help="write the templated toy corpus")
    p.add_argument("--out", required=True, help="output text file")
    p.add_argument("--bytes", type=int, default=200_000, help="approximate corpus size")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    return parser


def _train_config(args, out_dir) -> TrainConfig:
    model = ModelConfig(args.layers, args.heads, args.hidden, args.seq_len, args.vocab_size, args.attn_dropout)
    guidance = GuidanceConfig.for_heads(args.heads, args.lam, args.alpha0, args.steps)
    return TrainConfig(
        model=model, guidance=guidance, lr=args.lr, warmup=args.warmup, steps=args.steps,
        batch_size=args.batch, mask_prob=args.mask_prob, seed=args.seed, out_dir=out_dir,
        ag_enabled=not args.no_ag, bert_style_mask=args.bert_style_mask, clip_norm=args.clip_norm,
        checkpoint_every=args.checkpoint_every, record_throughput=args.timing,
    )


def _cmd_train(args) -> int:
    if not args.out:
        raise UsageError("train: --out is required")
    corpus = read_corpus(args.corpus)
    cfg = _train_config(args, args.out)
    resume = prior = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        metrics_path = Path(args.out) / "metrics.csv"
        prior = read_metrics_csv(metrics_path) if metrics_path.exists() else None
    ckpt, metrics = train(cfg, corpus, resume=resume, prior_metrics=prior)
    out = Path(args.out)
    if not args.no_plot:
        from .plotting import plot_training_curves
        plot_training_curves(metrics, out / "curves.png")
    last = metrics.records[-1]
    print(f"steps={len(metrics)} final_mlm={last.mlm_loss:.6f} average_mlm={metrics.average_mlm:.6f}")
    if args.valid_corpus:
        loss = evaluate_mlm(ckpt, read_corpus(args.valid_corpus))
        (out / "valid.txt").write_text(f"{loss:.6f}\n")
        print(f"valid_mlm={loss:.6f}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    vocab = Vocab.load(args.vocab) if args.vocab else None
    loss = evaluate_mlm(ckpt, read_corpus(args.corpus), seed=args.seed, vocab=vocab)
    print(f"{loss:.6f}")
    return 0


def _open_out(path):
    return sys.stdout if path == "-" else open(path, "w", encoding="utf-8", newline="")


def _cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.dataset:
        if args.distractor:
            raise UsageError("probe: --distractor only applies to --synthetic")
        examples = read_probe_tsv(args.dataset)
    else:
        examples = generate_synthetic(args.synthetic, args.distractor, args.seed, Vocab(ckpt.vocab))
    if args.save_dataset:
        with open(args.save_dataset, "w", encoding="utf-8") as fh:
            write_probe_tsv(examples, fh)
    report = probe_heads(ckpt, examples)
    sink = _open_out(args.out)
    try:
        emit_probe_report(report, sink)
    finally:
        if sink is not sys.stdout:
            sink.close()
    if report.skipped:
        print(f"skipped {report.skipped} examples longer than the model limit", file=sys.stderr)
    if args.out != "-" and not args.no_plot:
        from .plotting import plot_probe_accuracy
        plot_probe_accuracy(report.accuracy, Path(args.out).with_suffix(".png"))
    return 0


def _cmd_patterns(args) -> int:
    kind = args.kind
    if args.sentence is not None:
        words = args.sentence.split()
        if not words or words[0] != BOS:
            words = [BOS] + words
        if words[-1] != EOS:
            words = words + [EOS]
    else:
        if args.len < 1:
            raise UsageError("patterns: --len must be positive")
        words = ([BOS] + ["w"] * (args.len - 2) + [EOS])[: args.len]
    vocab = _pattern_vocab(words)
    ids = vocab.ids(words)
    pattern = build_pattern(kind, ids, vocab.delim_ids, vocab.period_id)
    if pattern.fallback:
        print(f"warning: no {kind.value} trigger token; rows are uniform", file=sys.stderr)
    sink = _open_out(args.out)
    try:
        emit_pattern_csv(pattern, sink)
    finally:
        if sink is not sys.stdout:
            sink.close()
    if args.out != "-" and not args.no_plot:
        from .plotting import plot_pattern
        plot_pattern(pattern.values, Path(args.out).with_suffix(".png"), words, f"[{kind.label}]")
    return 0


def _pattern_vocab(words) -> Vocab:
    content = [w for w in words if w not in RESERVED]
    return build_vocab(content) if content else Vocab(RESERVED)


def _cmd_ablate(args) -> int:
    corpus = read_corpus(args.corpus)
    base = _train_config(args, None)
    if args.omit:
        omissions = args.omit
    else:
        omissions = list(DEFAULT_OMISSIONS)
    report = run_ablation(base, corpus, omissions, args.probe_step, args.refill)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_ablation_report(report, out / "ablation.txt")
        if not args.no_plot:
            from .plotting import plot_ablation
            plot_ablation([omission_label(r.omitted) for r in report.rows],
                          [r.delta for r in report.rows], out / "ablation.png")
    emit_ablation_report(report, sys.stdout)
    return 0


def _cmd_toy_corpus(args) -> int:
    lines = toy_corpus(args.bytes, args.seed)
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "probe": _cmd_probe,
    "patterns": _cmd_patterns,
    "ablate": _cmd_ablate,
    "toy-corpus": _cmd_toy_corpus,
}

RUNTIME_ERRORS = (OSError, ValueError, CheckpointError, CompatibilityError, IngestionError,
                  ProbeDataError, TrainingDivergedError, ArithmeticError)


def dispatch(argv=None) -> int:
    """Run one subcommand; 0 on success, 1 on usage error, 2 on runtime error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())
