"""Command line for the full pipeline: data, training, evaluation, analysis.

Subcommands: gen-data, train, eval, parse, score, analyze-attention. The
gen-data and train commands read a flat key=value config file; every config
key doubles as a command-line flag and flags win over the file. The effective
configuration is echoed into the output directory so a run reproduces from
its own snapshot.

Exit codes: 0 success, 2 usage or config errors, 3 missing file,
4 unreadable or wrong-version checkpoint, 5 vocabulary mismatch between
checkpoint and data, 6 training diverged, 7 run directory already owned.
Output files are written to a temp name and renamed into place, so a crashed
command never leaves a truncated artifact; the streamed metrics.csv inside a
run directory is the one deliberate exception.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from .decode import (
    BeamConfig,
    InferenceModel,
    attachments_to_tree,
    best_parse,
    marginal_logprob,
    surprisals,
)
from .dyck import (
    DyckSpec,
    DyckString,
    build_depth_gen_split,
    build_longrange_split,
    dyck_vocabulary,
    manifest_record,
    read_longrange_file,
    sample_dyck,
    write_corpus_file,
    write_longrange_file,
    write_manifest,
)
from .evaluate import (
    TAPE_MODES,
    accuracy,
    attachment_spans,
    closing_accuracy,
    corpus_f1,
    open_bracket_attention,
    perplexity_report,
    records_as_rows,
    tree_spans,
    write_attention_csv,
    write_attention_svg,
    write_report_csv,
)
from .model import ModelConfig, PushdownModel
from .train import TrainConfig, TrainingDiverged, train
from .treebank import (
    EOS_ID,
    EOS_TOKEN,
    ROOT_ID,
    ROOT_TOKEN,
    Vocabulary,
    binarize,
    format_sexpr,
    leaf_tokens,
    load_corpus,
    parse_sexpr,
)

EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_BAD_CHECKPOINT = 4
EXIT_VOCAB_MISMATCH = 5
EXIT_DIVERGED = 6
EXIT_LOCKED = 7

RUN_ROOT_ENV = "STACKLM_RUN_ROOT"


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code
        self.message = message


# --------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Every knob of the pipeline, flat so it round-trips through key=value.

    vocab_size 0 means "take it from the corpus"; an empty pushdown_layers
    means every layer when the mode is pushdown; an empty run_root defers to
    $STACKLM_RUN_ROOT and then ./runs.
    """

    # corpus generation
    num_types: int = 8
    dyck_depth: int = 6
    open_prob: float = 0.49
    min_len: int = 4
    max_len: int = 96
    train_count: int = 20000
    val_count: int = 2000
    depth_lo: int = 8
    depth_hi: int = 12
    depth_count: int = 300
    longrange_targets: tuple[int, ...] = (40,)
    longrange_count: int = 500
    # model
    vocab_size: int = 0
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 48
    max_seq_len: int = 128
    max_depth: int = 24
    mode: str = "pushdown"
    pushdown_layers: tuple[int, ...] = ()
    dropout: float = 0.0
    attach_form: str = "mlp"
    clamp_depths: bool = True
    # training
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 100
    schedule: str = "cosine"
    lambda_attach: float = 1.0
    grad_clip: float = 1.0
    eval_every: int = 200
    patience: int = 0
    # plumbing
    data_dir: str = "data"
    run_root: str = ""
    seed: int = 0


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key, text):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "tuple[int, ...]":
            if not text:
                return ()
            return tuple(int(part) for part in text.split(","))
        return text
    except ValueError as err:
        raise CliError(EXIT_USAGE, f"bad value for {key}: {err}") from None


def parse_config_file(path):
    """Flat key=value lines; blank lines and # comments are skipped."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(
                    EXIT_USAGE, f"{path}:{lineno}: expected key=value, got {line!r}"
                )
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise CliError(EXIT_USAGE, f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _parse_value(key, text)
    return out


def load_run_config(config_path, overrides):
    merged = {}
    if config_path is not None:
        merged.update(parse_config_file(config_path))
    for key, text in overrides.items():
        merged[key] = _parse_value(key, text)
    return RunConfig(**merged)


def config_lines(rc):
    """The effective config as key=value lines, parse_config_file compatible."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(rc, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def config_hash(rc):
    return hashlib.sha256(config_lines(rc).encode("utf-8")).hexdigest()[:8]


# --------------------------------------------------------------------------
# small plumbing helpers


def _atomic_write(path, text):
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_file(path, writer):
    """Run writer(tmp_path), then rename the result into place."""
    tmp = f"{path}.tmp-{os.getpid()}"
    writer(tmp)
    os.replace(tmp, path)


def _load_engine(path):
    try:
        return InferenceModel.from_checkpoint(path)
    except ValueError as err:
        raise CliError(EXIT_BAD_CHECKPOINT, f"{path}: {err}") from None


def _load_model(path):
    try:
        return PushdownModel.load(path)
    except ValueError as err:
        raise CliError(EXIT_BAD_CHECKPOINT, f"{path}: {err}") from None


def _stored_vocab(extra, path):
    tokens = extra.get("vocab_tokens")
    if not tokens:
        raise CliError(
            EXIT_VOCAB_MISMATCH, f"{path}: checkpoint stores no vocabulary"
        )
    tokens = tuple(tokens)
    return Vocabulary(tokens, {t: i for i, t in enumerate(tokens)})


def _check_bracket_vocab(engine_config, extra, path):
    """Closing-accuracy evaluation assumes the fixed bracket inventory."""
    v = engine_config.vocab_size
    if v < 4 or (v - 2) % 2:
        raise CliError(
            EXIT_VOCAB_MISMATCH, f"{path}: vocabulary size {v} is not a bracket inventory"
        )
    expected = dyck_vocabulary((v - 2) // 2).id_to_token
    stored = extra.get("vocab_tokens")
    if stored is not None and tuple(stored) != expected:
        raise CliError(
            EXIT_VOCAB_MISMATCH,
            f"{path}: checkpoint vocabulary does not match the bracket inventory",
        )


def _ids_for_tokens(tokens, vocab, path, lineno):
    ids = [ROOT_ID]
    for tok in tokens:
        if tok not in vocab.token_to_id:
            raise CliError(
                EXIT_VOCAB_MISMATCH,
                f"{path}:{lineno}: token {tok!r} not in checkpoint vocabulary",
            )
        ids.append(vocab.token_to_id[tok])
    ids.append(EOS_ID)
    return ids


def _read_sentences(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    return [(i, ln.split()) for i, ln in enumerate(lines, start=1) if ln]


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    rc = load_run_config(args.config, _overrides(args))
    out_dir = args.out if args.out is not None else rc.data_dir
    os.makedirs(out_dir, exist_ok=True)
    spec = DyckSpec(
        num_types=rc.num_types,
        max_depth=rc.dyck_depth,
        open_prob=rc.open_prob,
        min_len=rc.min_len,
        max_len=rc.max_len,
        seed=rc.seed,
    )
    train_strings = sample_dyck(spec, rc.train_count, shard=0)
    val_strings = sample_dyck(spec, rc.val_count, shard=1)
    depth_strings = build_depth_gen_split(spec, (rc.depth_lo, rc.depth_hi), rc.depth_count)
    seen = [s.tokens for s in train_strings] + [s.tokens for s in val_strings]
    longrange = build_longrange_split(
        spec, rc.longrange_targets, rc.longrange_count, exclude=seen
    )

    files = {
        "train.trees": lambda p: write_corpus_file(train_strings, p),
        "val.trees": lambda p: write_corpus_file(val_strings, p),
        "depth_gen.trees": lambda p: write_corpus_file(depth_strings, p),
        "longrange.jsonl": lambda p: write_longrange_file(longrange, p),
    }
    for name, writer in files.items():
        _atomic_file(os.path.join(out_dir, name), writer)

    records = [
        manifest_record("train", "train.trees", spec, len(train_strings)),
        manifest_record("val", "val.trees", spec, len(val_strings)),
        manifest_record(
            "depth_gen", "depth_gen.trees", spec, len(depth_strings),
            depth_range=[rc.depth_lo, rc.depth_hi],
        ),
        manifest_record(
            "longrange", "longrange.jsonl", spec, len(longrange),
            targets=list(rc.longrange_targets),
        ),
    ]
    _atomic_file(os.path.join(out_dir, "manifest.jsonl"), lambda p: write_manifest(records, p))
    _atomic_write(os.path.join(out_dir, "config.txt"), config_lines(rc))
    for name in list(files) + ["manifest.jsonl", "config.txt"]:
        print(os.path.join(out_dir, name))
    return 0


def _resolve_run_root(rc):
    if rc.run_root:
        return rc.run_root
    return os.environ.get(RUN_ROOT_ENV, "runs")


def _claim_run_dir(root, rc):
    """Create a fresh run directory; mkdir is the ownership claim."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(root, f"{stamp}-{config_hash(rc)}")
    for attempt in range(100):
        candidate = base if attempt == 0 else f"{base}-{attempt}"
        try:
            os.mkdir(candidate)
        except FileExistsError:
            continue
        with open(os.path.join(candidate, "lock"), "w", encoding="utf-8") as fh:
            fh.write(f"{os.getpid()}\n")
        return candidate
    raise CliError(EXIT_LOCKED, f"could not claim a run directory under {root}")


def cmd_train(args):
    rc = load_run_config(args.config, _overrides(args))
    train_path = os.path.join(rc.data_dir, "train.trees")
    vocab = dyck_vocabulary(rc.num_types) if rc.num_types > 0 else None
    try:
        corpus = load_corpus(train_path, vocab=vocab)
    except ValueError as err:
        raise CliError(EXIT_VOCAB_MISMATCH, f"{train_path}: {err}") from None
    if rc.vocab_size and rc.vocab_size != len(corpus.vocab):
        raise CliError(
            EXIT_VOCAB_MISMATCH,
            f"config vocab_size {rc.vocab_size} != corpus vocabulary {len(corpus.vocab)}",
        )

    val_path = os.path.join(rc.data_dir, "val.trees")
    val_corpus = None
    if os.path.exists(val_path):
        try:
            val_corpus = load_corpus(val_path, vocab=corpus.vocab)
        except ValueError as err:
            raise CliError(EXIT_VOCAB_MISMATCH, f"{val_path}: {err}") from None

    root = _resolve_run_root(rc)
    os.makedirs(root, exist_ok=True)
    rc = replace(rc, vocab_size=len(corpus.vocab), run_root=root)

    try:
        model_config = ModelConfig(
            vocab_size=len(corpus.vocab),
            n_layers=rc.n_layers,
            n_heads=rc.n_heads,
            d_model=rc.d_model,
            max_seq_len=rc.max_seq_len,
            max_depth=rc.max_depth,
            mode=rc.mode,
            pushdown_layers=rc.pushdown_layers or None,
            dropout=rc.dropout,
            attach_form=rc.attach_form,
            clamp_depths=rc.clamp_depths,
        )
        train_config = TrainConfig(
            steps=rc.steps,
            batch_size=rc.batch_size,
            lr=rc.lr,
            warmup_steps=rc.warmup_steps,
            schedule=rc.schedule,
            lambda_attach=rc.lambda_attach,
            grad_clip=rc.grad_clip,
            eval_every=rc.eval_every,
            patience=rc.patience,
            seed=rc.seed,
        )
    except ValueError as err:
        raise CliError(EXIT_USAGE, str(err)) from None

    run_dir = _claim_run_dir(root, rc)
    _atomic_write(os.path.join(run_dir, "config.txt"), config_lines(rc))
    model = PushdownModel(model_config, seed=rc.seed)
    result = train(model, corpus, train_config, out_dir=run_dir, val_corpus=val_corpus)

    print(f"run_dir: {run_dir}")
    print(f"steps_run: {result.steps_run}")
    print(f"final_lm_loss: {result.final_lm_loss!r}")
    if math.isfinite(result.best_val_ppl):
        print(f"best_val_ppl: {result.best_val_ppl!r}")
    return 0


def cmd_eval(args):
    engine, extra = _load_engine(args.checkpoint)
    if args.task == "closing":
        _check_bracket_vocab(engine.config, extra, args.checkpoint)
        if args.split.endswith(".jsonl"):
            split = read_longrange_file(args.split)
        else:
            split = [
                DyckString.from_tokens(leaf_tokens(parse_sexpr(line)))
                for _, line in _read_lines(args.split)
            ]
        records, buckets = closing_accuracy(
            engine, split, args.tape_mode, beam_width=args.beam_width
        )
        _atomic_file(args.out, lambda p: write_report_csv(records_as_rows(records), p))
        for key, acc in buckets.items():
            print(f"bucket[{key}]: {acc!r}")
        print(f"accuracy: {accuracy(records)!r}")
        return 0

    if args.task == "f1":
        vocab = _stored_vocab(extra, args.checkpoint)
        beam = BeamConfig(width=args.beam_width)
        rows = []
        pairs = []
        for lineno, line in _read_lines(args.split):
            tree = parse_sexpr(line)
            tokens = leaf_tokens(tree)
            ids = _ids_for_tokens(tokens, vocab, args.split, lineno)
            r_hat, _ = best_parse(engine, np.asarray(ids), beam)
            pred = attachment_spans(r_hat)
            gold = tree_spans(binarize(tree))
            result = corpus_f1([(pred, gold)])
            pairs.append((pred, gold))
            rows.append(
                {
                    "sentence": lineno,
                    "matched": result.matched,
                    "gold_count": result.gold_count,
                    "pred_count": result.pred_count,
                    "f1": result.f1,
                }
            )
        total = corpus_f1(pairs)
        _atomic_file(args.out, lambda p: write_report_csv(rows, p))
        print(f"unlabeled_f1: {total.f1!r}")
        print(f"precision: {total.precision!r}")
        print(f"recall: {total.recall!r}")
        return 0

    # args.task == "ppl"
    model, extra = _load_model(args.checkpoint)
    vocab = _stored_vocab(extra, args.checkpoint)
    try:
        corpus = load_corpus(args.split, vocab=vocab)
    except ValueError as err:
        raise CliError(EXIT_VOCAB_MISMATCH, f"{args.split}: {err}") from None
    name = os.path.basename(args.checkpoint)
    rows = perplexity_report({name: model}, corpus, batch_size=args.batch_size)
    _atomic_file(args.out, lambda p: write_report_csv(rows, p))
    print(f"val_ppl: {rows[0]['val_ppl']!r}")
    return 0


def cmd_parse(args):
    engine, extra = _load_engine(args.checkpoint)
    vocab = _stored_vocab(extra, args.checkpoint)
    beam = BeamConfig(width=args.beam_width)
    lines = []
    for lineno, tokens in _read_sentences(args.input):
        ids = _ids_for_tokens(tokens, vocab, args.input, lineno)
        if len(ids) > engine.config.max_seq_len:
            raise CliError(
                EXIT_USAGE,
                f"{args.input}:{lineno}: sequence of {len(ids)} tokens "
                f"exceeds max_seq_len {engine.config.max_seq_len}",
            )
        r_hat, _ = best_parse(engine, np.asarray(ids), beam)
        tree = attachments_to_tree((ROOT_TOKEN, *tokens, EOS_TOKEN), r_hat)
        lines.append(format_sexpr(tree))
    _atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"parsed: {len(lines)}")
    return 0


def cmd_score(args):
    engine, extra = _load_engine(args.checkpoint)
    vocab = _stored_vocab(extra, args.checkpoint)
    beam = BeamConfig(width=args.beam_width)
    out_lines = []
    for lineno, tokens in _read_sentences(args.input):
        ids = np.asarray(_ids_for_tokens(tokens, vocab, args.input, lineno))
        record = {"tokens": tokens, "beam_width": beam.width, "mode": args.mode}
        if args.mode == "joint":
            r_hat, logp = best_parse(engine, ids, beam)
            record["logprob"] = float(logp)
            record["attachments"] = [int(r) for r in r_hat]
        elif args.mode == "marginal":
            record["logprob"] = float(marginal_logprob(engine, ids, beam))
        else:
            surps = surprisals(engine, ids, beam)
            record["surprisals"] = [float(s) for s in surps]
            record["logprob"] = -float(surps.sum())
        out_lines.append(json.dumps(record, sort_keys=True))
    _atomic_write(args.out, "\n".join(out_lines) + "\n")
    print(f"scored: {len(out_lines)}")
    return 0


def cmd_analyze_attention(args):
    engine, extra = _load_engine(args.checkpoint)
    _check_bracket_vocab(engine.config, extra, args.checkpoint)
    items = read_longrange_file(args.probes)[: args.limit]
    if not items:
        raise CliError(EXIT_USAGE, f"{args.probes}: no probe items")
    reports = open_bracket_attention(engine, items, args.tape_mode)
    rows = []
    for i, report in enumerate(reports):
        _atomic_file(f"{args.out_prefix}.{i}.csv", lambda p, r=report: write_attention_csv(r, p))
        _atomic_file(f"{args.out_prefix}.{i}.svg", lambda p, r=report: write_attention_svg(r, p))
        rows.append(
            {
                "probe": i,
                "prefix_length": len(report.tokens) - 1,
                "targets": " ".join(str(t) for t in report.targets),
                "target_mass": report.target_mass,
            }
        )
    _atomic_file(f"{args.out_prefix}.summary.csv", lambda p: write_report_csv(rows, p))
    mean_mass = float(np.mean([r.target_mass for r in reports]))
    print(f"probes: {len(reports)}")
    print(f"mean_target_mass: {mean_mass!r}")
    return 0


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    return [(i, ln) for i, ln in enumerate(lines, start=1) if ln]


# --------------------------------------------------------------------------
# argument parsing


def _overrides(args):
    out = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            out[f.name] = value
    return out


def _add_config_flags(sub):
    sub.add_argument("--config", default=None, help="key=value config file")
    for f in fields(RunConfig):
        sub.add_argument(f"--{f.name}", default=None, metavar="V",
                         help=f"override config key {f.name}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stacklm", description=__doc__.splitlines()[0]
    )
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen-data", help="sample corpora and splits")
    _add_config_flags(gen)
    gen.add_argument("--out", default=None, help="output directory (default: data_dir)")
    gen.set_defaults(func=cmd_gen_data)

    tr = subs.add_parser("train", help="train a model into a fresh run directory")
    _add_config_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = subs.add_parser("eval", help="closing accuracy, F1, or perplexity")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", required=True, help=".trees file or longrange .jsonl")
    ev.add_argument("--task", required=True, choices=("closing", "f1", "ppl"))
    ev.add_argument("--out", required=True, help="report CSV path")
    ev.add_argument("--tape-mode", default="model-greedy", choices=TAPE_MODES)
    ev.add_argument("--beam-width", type=int, default=32,
                    help="parse beam for f1; tape beam for closing with model-beam")
    ev.add_argument("--batch-size", type=int, default=16)
    ev.set_defaults(func=cmd_eval)

    pa = subs.add_parser("parse", help="bracketed best parses for raw sentences")
    pa.add_argument("--checkpoint", required=True)
    pa.add_argument("--input", required=True, help="one space-separated sentence per line")
    pa.add_argument("--out", required=True)
    pa.add_argument("--beam-width", type=int, default=32)
    pa.set_defaults(func=cmd_parse)

    sc = subs.add_parser("score", help="sentence log-probabilities as JSON lines")
    sc.add_argument("--checkpoint", required=True)
    sc.add_argument("--input", required=True)
    sc.add_argument("--out", required=True)
    sc.add_argument("--beam-width", type=int, default=32)
    sc.add_argument("--mode", default="marginal",
                    choices=("joint", "marginal", "surprisal"))
    sc.set_defaults(func=cmd_score)

    at = subs.add_parser("analyze-attention", help="attention maps on bracket probes")
    at.add_argument("--checkpoint", required=True)
    at.add_argument("--probes", required=True, help="longrange .jsonl probe file")
    at.add_argument("--out-prefix", required=True)
    at.add_argument("--tape-mode", default="gold-oracle", choices=TAPE_MODES)
    at.add_argument("--limit", type=int, default=8)
    at.set_defaults(func=cmd_analyze_attention)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    try:
        return args.func(args) or 0
    except CliError as err:
        print(f"stacklm: {err.message}", file=sys.stderr)
        return err.code
    except FileNotFoundError as err:
        print(f"stacklm: missing file: {err.filename}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except TrainingDiverged as err:
        print(f"stacklm: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
