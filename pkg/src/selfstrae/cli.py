"""Command-line entry point: train, eval, parse, embed, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 data/input error,
4 numeric failure, 5 constant predictions (correlation undefined),
6 gradient check failure.

Option precedence, lowest to highest: built-in defaults, ``--config`` JSON
file, ``SELFSTRAE_<OPTION>`` environment variables, presets
(``--paper-defaults``, ``--preset``), explicit flags. stdout carries only
machine-readable records; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .autograd import OPS, inject_fault
from .data import (
    Tokenizer,
    load_checkpoint,
    load_corpus,
    load_merges,
    load_pairs,
    load_vocab,
)
from .errors import (
    CheckpointError,
    ConfigError,
    EvaluationError,
    InputError,
    NumericError,
    ParseError,
    UndefinedCorrelation,
    UsageError,
    VocabError,
)
from .evaluation import append_results, eval_pairs, sample_nodes, uniformity_alignment
from .model import Objective, non_embedding_param_count
from .objectives import check_objective_gradients
from .structure import induce, to_bracket
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CONSTANT = 5
EXIT_GRADCHECK = 6

ENV_PREFIX = "SELFSTRAE_"

PAPER_DEFAULTS = {"E": 256, "batch_size": 512, "lr": 1e-3, "epochs": 15, "tau": 1.2, "k": 128, "u": 2}

# (k, u) channel layouts swept at E = 256.
PRESETS = {f"k{k}u{u}": {"k": k, "u": u, "E": 256} for k, u in ((8, 32), (32, 8), (64, 4), (128, 2), (256, 1))}

log = logging.getLogger("selfstrae")


class ArgumentError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so exit codes stay ours."""

    def error(self, message):
        raise ArgumentError(f"{self.prog}: {message}")


# -- option resolution -----------------------------------------------------

# option name -> (flag, type); the option name is also the config-file key
# and, upper-cased, the environment-variable suffix.
_TRAIN_FLAGS = {
    "E": ("--dim", int),
    "k": ("--k", int),
    "u": ("--u", int),
    "objective": ("--objective", str),
    "seed": ("--seed", int),
    "epochs": ("--epochs", int),
    "batch_size": ("--batch-size", int),
    "lr": ("--lr", float),
    "tau": ("--tau", float),
    "max_len": ("--max-len", int),
    "dropout_p": ("--dropout", float),
    "tied": ("--tied", bool),
    "merge_score": ("--merge-score", str),
    "per_sentence_ce": ("--per-sentence-ce", bool),
    "clip_norm": ("--clip-norm", float),
    "workers": ("--workers", int),
    "dense_dtype": ("--dense-dtype", str),
}
_PATH_FLAGS = {
    "corpus": "--corpus",
    "vocab": "--vocab",
    "merges": "--merges",
    "out": "--out",
}


def _parse_bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"cannot read {text!r} as a boolean")


def _coerce(name, value, kind):
    if value is None:
        return None
    try:
        if kind is bool:
            return value if isinstance(value, bool) else _parse_bool(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"option {name}: cannot read {value!r} as {kind.__name__}") from None


def _env_layer(names_types):
    out = {}
    for name, kind in names_types.items():
        raw = os.environ.get(ENV_PREFIX + name.upper())
        if raw is not None:
            out[name] = _coerce(name, raw, kind)
    return out


def _file_layer(path, known):
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown option(s) in {path}: {', '.join(sorted(unknown))}")
    return {k: _coerce(k, v, known[k]) for k, v in data.items()}


def resolve_train_options(args):
    """Merge defaults, config file, environment, presets and flags."""
    known = {n: t for n, (_, t) in _TRAIN_FLAGS.items()}
    known.update({n: str for n in _PATH_FLAGS})
    known["eval"] = list
    merged = {}
    merged.update(_file_layer(args.config, known))
    merged.update(_env_layer({n: t for n, t in known.items() if t is not list}))
    if args.paper_defaults:
        merged.update(PAPER_DEFAULTS)
    if args.preset:
        merged.update(PRESETS[args.preset])
    for name in known:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    return merged


def _train_config(options, out_dir):
    kwargs = {n: options[n] for n in _TRAIN_FLAGS if n in options and options[n] is not None}
    if out_dir is not None:
        kwargs.setdefault("checkpoint_dir", str(out_dir / "checkpoints"))
        kwargs.setdefault("metrics_path", str(out_dir / "metrics.csv"))
    return TrainConfig(**kwargs)


# -- shared helpers --------------------------------------------------------

def _tokenizer(vocab_path, merges_path, lowercase=True):
    vocab = load_vocab(vocab_path)
    merges = load_merges(merges_path)
    return Tokenizer(vocab, merges, lowercase=lowercase)


def _load_model(ckpt_path, tokenizer):
    ckpt = load_checkpoint(ckpt_path)
    fp = tokenizer.vocab.fingerprint()
    if ckpt.vocab_fingerprint is not None and ckpt.vocab_fingerprint != fp:
        raise VocabError(
            f"checkpoint was trained with vocab fingerprint {ckpt.vocab_fingerprint} "
            f"but the given vocab has {fp}"
        )
    if ckpt.config.V != len(tokenizer.vocab):
        raise VocabError(f"checkpoint has V={ckpt.config.V} but the vocab has {len(tokenizer.vocab)} entries")
    return ckpt


def _emit(record):
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def _read_input_lines(path):
    if path in (None, "-"):
        return sys.stdin.read().splitlines()
    with open(path, encoding="utf-8", newline=None) as fh:
        return fh.read().splitlines()


# -- subcommands -----------------------------------------------------------

def cmd_train(args):
    options = resolve_train_options(args)
    out_dir = Path(options.get("out") or "run")
    config = _train_config(options, out_dir)
    if args.print_config:
        _emit({**config.to_dict(), **{n: options.get(n) for n in _PATH_FLAGS}, "eval": options.get("eval") or []})
        return EXIT_OK
    missing = [f for n, f in _PATH_FLAGS.items() if n in ("corpus", "vocab", "merges") and not options.get(n)]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")
    tok = _tokenizer(options["vocab"], options["merges"], not args.no_lowercase)
    corpus, stats = load_corpus(options["corpus"], tok, config.max_len)
    log.info("corpus: %d sentences kept, %d too short, %d too long, %d tokens",
             stats["kept"], stats["too_short"], stats["too_long"], stats["tokens"])
    if not corpus and config.epochs > 0:
        raise InputError(f"{options['corpus']}: no usable sentences")
    evals = {}
    for path in options.get("eval") or []:
        ds = load_pairs(path)

        def run(params, ds=ds):
            try:
                return eval_pairs(params, tok, ds, workers=config.workers).spearman_x100
            except UndefinedCorrelation:
                return None

        evals[ds.name] = run
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(config, corpus, len(tok.vocab), evals, tok.vocab.fingerprint())
    final = result.metrics[-1] if result.metrics else {}
    _emit({
        "checkpoint": str(result.final_checkpoint),
        "metrics": config.metrics_path,
        "epochs": config.epochs,
        "final_loss": final.get("mean_loss"),
        "non_embedding_params": non_embedding_param_count(config.k, config.u),
    })
    return EXIT_OK


def cmd_eval(args):
    tok = _tokenizer(args.vocab, args.merges, not args.no_lowercase)
    ckpt = _load_model(args.checkpoint, tok)
    params = ckpt.params
    c = ckpt.config
    base = {"objective": c.objective.value, "k": c.k, "u": c.u, "seed": ckpt.seed}
    status = EXIT_OK
    for path in args.pairs:
        ds = load_pairs(path)
        if args.metric == "ua":
            texts = list(dict.fromkeys(ds.text_a + ds.text_b))
            sentences = [s for s in (tok.encode(t) for t in texts) if s.shape[0] > 0]
            if not sentences:
                raise InputError(f"{path}: no text tokenizes to anything")
            up, down = sample_nodes(params, sentences, args.sample, args.seed)
            uni, ali = uniformity_alignment(up, down)
            _emit({"dataset": ds.name, "uniformity": uni, "alignment": ali, "n_nodes": int(up.shape[0]),
                   "pooling": "all nodes", **base})
            continue
        try:
            report = eval_pairs(params, tok, ds, leaf_rows=args.leaf_rows)
        except UndefinedCorrelation as exc:
            print(f"{ds.name}: {exc}", file=sys.stderr)
            _emit({"dataset": ds.name, "error": "constant_predictions", **base})
            status = EXIT_CONSTANT
            continue
        record = json.loads(report.to_json())
        record.update(base)
        _emit(record)
        if args.results:
            append_results(args.results, ds.name, c.objective.value, c.k, c.u, ckpt.seed, report.spearman_x100)
    return status


def _lines_with_counts(path):
    lines = _read_input_lines(path)
    kept = [(i, line) for i, line in enumerate(lines, 1) if line.strip()]
    blank = len(lines) - len(kept)
    if blank:
        print(f"skipped {blank} blank line(s)", file=sys.stderr)
    return kept


def cmd_parse(args):
    tok = _tokenizer(args.vocab, args.merges, not args.no_lowercase)
    params = _load_model(args.checkpoint, tok).params
    empty = 0
    for lineno, line in _lines_with_counts(args.input):
        ids = tok.encode(line)
        if ids.shape[0] == 0:
            empty += 1
            continue
        enc = induce(params, ids)
        surface = tok.surface(line)
        if len(surface) != ids.shape[0]:
            surface = [tok.vocab.id_to_token[i] for i in ids]
        sys.stdout.write(to_bracket(enc.tree, surface) + "\n")
    if empty:
        print(f"skipped {empty} line(s) with no known tokens", file=sys.stderr)
    return EXIT_OK


def cmd_embed(args):
    tok = _tokenizer(args.vocab, args.merges, not args.no_lowercase)
    params = _load_model(args.checkpoint, tok).params
    empty = 0
    for lineno, line in _lines_with_counts(args.input):
        ids = tok.encode(line)
        if ids.shape[0] == 0:
            empty += 1
            continue
        root = induce(params, ids).up[-1]
        _emit({"line": lineno, "n_tokens": int(ids.shape[0]), "vector": root.tolist()})
    if empty:
        print(f"skipped {empty} line(s) with no known tokens", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args):
    objectives = [Objective.parse(o) for o in args.objective] if args.objective else list(Objective)
    faults = list(args.inject_fault or [])
    env_fault = os.environ.get(ENV_PREFIX + "INJECT_FAULT")
    if env_fault:
        faults += [f.strip() for f in env_fault.split(",") if f.strip()]
    bad = set(faults) - set(OPS)
    if bad:
        raise ConfigError(f"unknown op(s) for --inject-fault: {', '.join(sorted(bad))}")
    failed = []
    with inject_fault(*faults):
        for obj in objectives:
            rep = check_objective_gradients(obj, n_configs=args.configs, seed=args.seed, tol=args.tol)
            _emit({"objective": obj.name, "max_rel_err": float(rep.max_rel_err), "n_configs": rep.n_configs,
                   "n_checked": rep.n_checked, "tol": rep.tol, "passed": rep.passed})
            if not rep.passed:
                failed.append(obj.name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _add_model_io(p, need_input=False):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--merges", required=True)
    p.add_argument("--no-lowercase", action="store_true", help="keep case before BPE")
    if need_input:
        p.add_argument("--input", default="-", help="text file, one sentence per line ('-' for stdin)")


def build_parser():
    ap = _Parser(prog="selfstrae", description="Self-structuring autoencoder toolkit")
    ap.add_argument("--log-level", default=os.environ.get(ENV_PREFIX + "LOG_LEVEL", "INFO"))
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    tr = sub.add_parser("train", help="train a model")
    for name, flag in _PATH_FLAGS.items():
        tr.add_argument(flag, dest=name, default=None)
    for name, (flag, kind) in _TRAIN_FLAGS.items():
        if kind is bool:
            tr.add_argument(flag, dest=name, action="store_const", const=True, default=None)
        else:
            tr.add_argument(flag, dest=name, type=kind, default=None)
    tr.add_argument("--eval", dest="eval", action="append", default=None, metavar="PAIRS_TSV",
                    help="pair set scored after every epoch (repeatable)")
    tr.add_argument("--config", default=None, help="JSON file of options")
    tr.add_argument("--paper-defaults", action="store_true",
                    help="E=256, batch 512, lr 1e-3, 15 epochs, tau 1.2, k=128, u=2")
    tr.add_argument("--preset", choices=sorted(PRESETS), default=None, help="channel layout at E=256")
    tr.add_argument("--no-lowercase", action="store_true")
    tr.add_argument("--print-config", action="store_true", help="print the resolved options and exit")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="zero-shot pair evaluation")
    _add_model_io(ev)
    ev.add_argument("--pairs", action="append", required=True, help="pair TSV (repeatable)")
    ev.add_argument("--metric", choices=("spearman", "ua"), default="spearman")
    ev.add_argument("--results", default=None, help="CSV results table to append to")
    ev.add_argument("--leaf-rows", action="store_true", help="single-token texts use their embedding row")
    ev.add_argument("--sample", type=int, default=2048, help="nodes sampled for --metric ua")
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    pa = sub.add_parser("parse", help="print the induced bracketing of each line")
    _add_model_io(pa, need_input=True)
    pa.set_defaults(func=cmd_parse)

    em = sub.add_parser("embed", help="print the root embedding of each line as JSON")
    _add_model_io(em, need_input=True)
    em.set_defaults(func=cmd_embed)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every objective")
    gc.add_argument("--objective", action="append", default=None, help="restrict to an objective (repeatable)")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--configs", type=int, default=20, help="random tiny configurations per objective")
    gc.add_argument("--tol", type=float, default=1e-5)
    gc.add_argument("--inject-fault", action="append", default=None, metavar="OP",
                    help="negate the adjoint of OP (self-test of the checker)")
    gc.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UndefinedCorrelation as exc:
        print(f"undefined correlation: {exc}", file=sys.stderr)
        return EXIT_CONSTANT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, CheckpointError, VocabError, InputError, EvaluationError, OSError, UnicodeDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
