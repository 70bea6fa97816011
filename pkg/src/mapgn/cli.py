"""Command-line interface: synth-data, build-vocab, pretrain, finetune,
decode, evaluate, mask-preview, grad-check, report.

Run configuration is a JSON file with three optional sections ("model",
"train", "masking"); unknown keys are rejected and every violation is
reported at once. All file paths go through environment-variable expansion
(`$VAR`/`${VAR}`), which is the only effect the environment has on a run.

Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import json
import os
import sys

import numpy as np

from . import tensor as T
from .corpus import (SynthRuleSet, load_paired, load_unpaired, save_paired,
                     save_unpaired, synth_corpus)
from .decoding import beam_decode, greedy_decode
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .estimators import validate_text_list
from .masking import (PRESETS, MaskingSpec, RANDOM_FROM_ALL, RANDOM_FROM_SPAN,
                      build_pretrain_example, masking_report)
from .metrics import evaluate_corpus
from .model import ModelConfig, init_params
from .training import (TrainConfig, checkpoint_metadata, load_checkpoint,
                       save_checkpoint, train, transfer_params)
from .vocab import NUM_SPECIALS, Vocab, build_vocab, load_vocab

_MODEL_DEFAULTS = {f.name: f.default for f in dataclasses.fields(ModelConfig)
                   if f.name != "vocab_size"}
_TRAIN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}


def _config_reference() -> str:
    lines = ["configuration file keys (JSON; every key optional):"]
    for key, value in _MODEL_DEFAULTS.items():
        lines.append(f"  model.{key} (default {value!r})")
    for key, value in _TRAIN_DEFAULTS.items():
        lines.append(f"  train.{key} (default {value!r})")
    lines.append("  masking (default 'mapgn'; one of "
                 + "/".join(sorted(PRESETS))
                 + ", or an object with name/p_mask/p_random/p_unchanged/"
                   "random_source/span_ratio)")
    return "\n".join(lines)


@dataclasses.dataclass
class RunConfig:
    model: dict
    train: TrainConfig
    masking: MaskingSpec

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model)


def _expect_number(section: str, key: str, value, errors: list[str],
                   integer: bool = False) -> bool:
    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if ok and integer and not isinstance(value, int):
        ok = False
    if not ok:
        errors.append(f"{section}.{key}: expected {'an integer' if integer else 'a number'},"
                      f" got {value!r}")
    return ok


def parse_run_config(raw: dict) -> RunConfig:
    """Validate a parsed JSON config, collecting every violation."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for key in raw:
        if key not in ("model", "train", "masking"):
            errors.append(f"unknown top-level key {key!r}")

    model = dict(_MODEL_DEFAULTS)
    section = raw.get("model", {})
    if not isinstance(section, dict):
        errors.append("model: expected an object")
        section = {}
    for key, value in section.items():
        if key not in _MODEL_DEFAULTS:
            errors.append(f"model.{key}: unknown key")
            continue
        if key == "arch":
            if value not in ("encoder-decoder", "pointer-generator"):
                errors.append(f"model.arch: invalid value {value!r}")
                continue
        elif key == "dropout":
            if not _expect_number("model", key, value, errors):
                continue
            if not 0.0 <= value < 1.0:
                errors.append(f"model.dropout: {value!r} outside [0, 1)")
                continue
        else:
            if not _expect_number("model", key, value, errors, integer=True):
                continue
            if value < 1:
                errors.append(f"model.{key}: must be >= 1, got {value!r}")
                continue
        model[key] = value

    train_kw = dict(_TRAIN_DEFAULTS)
    section = raw.get("train", {})
    if not isinstance(section, dict):
        errors.append("train: expected an object")
        section = {}
    for key, value in section.items():
        if key not in _TRAIN_DEFAULTS:
            errors.append(f"train.{key}: unknown key")
            continue
        if key == "precision":
            if value not in ("float32", "float64"):
                errors.append(f"train.precision: invalid value {value!r}")
                continue
        elif key == "grad_clip":
            if value is not None:
                if not _expect_number("train", key, value, errors):
                    continue
                if value <= 0:
                    errors.append(f"train.grad_clip: must be positive or null, got {value!r}")
                    continue
        elif key in ("batch_size", "max_len", "steps", "seed", "log_every",
                     "checkpoint_every", "valid_every"):
            if not _expect_number("train", key, value, errors, integer=True):
                continue
            if key in ("batch_size", "max_len", "steps", "log_every") and value < 1:
                errors.append(f"train.{key}: must be >= 1, got {value!r}")
                continue
            if key in ("checkpoint_every", "valid_every") and value < 0:
                errors.append(f"train.{key}: must be >= 0, got {value!r}")
                continue
        else:
            if not _expect_number("train", key, value, errors):
                continue
            if key in ("lr", "eps") and value <= 0:
                errors.append(f"train.{key}: must be positive, got {value!r}")
                continue
            if key in ("beta1", "beta2", "label_smoothing") and not 0.0 <= value < 1.0:
                errors.append(f"train.{key}: {value!r} outside [0, 1)")
                continue
        train_kw[key] = value

    masking_raw = raw.get("masking", "mapgn")
    masking = PRESETS["mapgn"]
    if isinstance(masking_raw, str):
        if masking_raw in PRESETS:
            masking = PRESETS[masking_raw]
        else:
            errors.append(f"masking: unknown preset {masking_raw!r}"
                          f" (choose from {sorted(PRESETS)})")
    elif isinstance(masking_raw, dict):
        allowed = {"name", "p_mask", "p_random", "p_unchanged", "random_source", "span_ratio"}
        for key in masking_raw:
            if key not in allowed:
                errors.append(f"masking.{key}: unknown key")
        try:
            masking = MaskingSpec(
                name=masking_raw.get("name", "custom"),
                p_mask=masking_raw.get("p_mask", 0.0),
                p_random=masking_raw.get("p_random", 0.0),
                p_unchanged=masking_raw.get("p_unchanged", 0.0),
                random_source=masking_raw.get("random_source", RANDOM_FROM_ALL),
                span_ratio=masking_raw.get("span_ratio", 0.5),
            )
        except (TypeError, ValueError) as exc:
            errors.append(f"masking: {exc}")
    else:
        errors.append("masking: expected a preset name or an object")

    if errors:
        raise ConfigError("; ".join(errors))
    return RunConfig(model=model, train=TrainConfig(**train_kw), masking=masking)


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
    config = parse_run_config(raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "masking":
            config = RunConfig(config.model, config.train,
                               parse_run_config({"masking": value}).masking)
        else:
            config = RunConfig(config.model,
                               dataclasses.replace(config.train, **{key: value}),
                               config.masking)
    return config


def _path(value: str) -> str:
    return os.path.expandvars(value)


def _read_column(path: str, column: int) -> list[str]:
    """Sentences from a .txt (one per line) or .tsv (given column) file."""
    if path.endswith(".tsv"):
        return [pair[column] for pair in load_paired(path)]
    return load_unpaired(path)


def _encode_pretrain_corpus(sentences: list[str], vocab: Vocab):
    encoded = [vocab.encode(s) for s in sentences]
    usable = [ids for ids in encoded if all(t >= NUM_SPECIALS for t in ids)]
    dropped = len(encoded) - len(usable)
    if dropped:
        print(f"note: dropped {dropped} sentences containing out-of-vocabulary "
              f"characters (special ids cannot be masked)", file=sys.stderr)
    if not usable:
        raise DataError("no usable sentences: everything maps to out-of-vocabulary ids")
    return usable


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    rules = SynthRuleSet(seed=args.seed, insertion_prob=args.insertion_prob,
                         substitution_prob=args.substitution_prob,
                         lexicon_size=args.lexicon_size)
    corpus = synth_corpus(rules, args.n_unpaired, args.n_paired,
                          np.random.default_rng(args.seed))
    out = _path(args.out_dir)
    os.makedirs(out, exist_ok=True)
    save_unpaired(os.path.join(out, "unpaired.txt"), corpus.unpaired)
    save_paired(os.path.join(out, "train.tsv"), corpus.train)
    save_paired(os.path.join(out, "valid.tsv"), corpus.valid)
    save_paired(os.path.join(out, "test.tsv"), corpus.test)
    with open(os.path.join(out, "rules.json"), "w", encoding="utf-8") as fh:
        fh.write(rules.to_json() + "\n")
    print(f"wrote {len(corpus.unpaired)} unpaired / {len(corpus.train)} train / "
          f"{len(corpus.valid)} valid / {len(corpus.test)} test sentences to {out}")
    return 0


def cmd_build_vocab(args) -> int:
    def stream():
        for path in args.inputs:
            path = _path(path)
            if path.endswith(".tsv"):
                for source, target in load_paired(path):
                    yield source
                    yield target
            else:
                yield from load_unpaired(path)

    vocab = build_vocab(stream(), min_count=args.min_count, max_size=args.max_size)
    vocab.save(_path(args.output))
    print(f"vocab size {vocab.size} ({vocab.size - NUM_SPECIALS} characters + "
          f"{NUM_SPECIALS} specials) -> {args.output}")
    return 0


def cmd_pretrain(args) -> int:
    config = load_run_config(args.config, {"seed": args.seed, "steps": args.steps,
                                           "masking": args.masking})
    T.set_default_dtype(config.train.precision)
    vocab = load_vocab(_path(args.vocab))
    sentences = load_unpaired(_path(args.data))
    data = _encode_pretrain_corpus(sentences, vocab)
    model_config = config.model_config(vocab.size)
    params = init_params(model_config, np.random.default_rng(config.train.seed))
    meta = checkpoint_metadata(model_config, 0, vocab.sha256(), config.masking.name)
    log_file = None
    if args.log:
        log_file = open(_path(args.log), "w", encoding="utf-8", newline="\n")
        log_file.write("step,loss,lr,seconds\n")
    try:
        result = train("pretrain", data, params, model_config, config.train,
                       masking_spec=config.masking, log_file=log_file,
                       checkpoint_path=_path(args.output), checkpoint_meta=meta)
    finally:
        if log_file:
            log_file.close()
    print(f"pretrain[{config.masking.name}] finished at step {result.log[-1][0]} "
          f"loss {result.log[-1][1]:.4f} -> {args.output}")
    return 0


def cmd_finetune(args) -> int:
    config = load_run_config(args.config, {"seed": args.seed, "steps": args.steps})
    T.set_default_dtype(config.train.precision)
    vocab = load_vocab(_path(args.vocab))
    pairs = [(vocab.encode(s), vocab.encode(t)) for s, t in load_paired(_path(args.train))]
    valid = None
    if args.valid:
        valid = [(vocab.encode(s), vocab.encode(t)) for s, t in load_paired(_path(args.valid))]
    model_config = config.model_config(vocab.size)
    rng = np.random.default_rng(config.train.seed)
    if args.init_from:
        donor, _, donor_meta = load_checkpoint(_path(args.init_from),
                                               expect_vocab_sha=vocab.sha256())
        params, copied = transfer_params(donor, model_config, rng)
        print(f"transferred {len(copied)} parameter tensors from {args.init_from} "
              f"(pretrained with {donor_meta.get('masking')!r})")
    else:
        params = init_params(model_config, rng)
    meta = checkpoint_metadata(model_config, 0, vocab.sha256(), None)
    log_file = None
    if args.log:
        log_file = open(_path(args.log), "w", encoding="utf-8", newline="\n")
        log_file.write("step,loss,lr,seconds\n")
    try:
        result = train("finetune", pairs, params, model_config, config.train,
                       valid_data=valid, log_file=log_file,
                       checkpoint_path=_path(args.output), checkpoint_meta=meta)
    finally:
        if log_file:
            log_file.close()
    if result.best_params is not None:
        best_path = _path(args.output) + ".best"
        save_checkpoint(best_path, result.best_params, None,
                        {**meta, "step": result.log[-1][0],
                         "valid_loss": result.best_valid_loss})
        print(f"best validation loss {result.best_valid_loss:.4f} -> {best_path}")
    print(f"finetune finished at step {result.log[-1][0]} "
          f"loss {result.log[-1][1]:.4f} -> {args.output}")
    return 0


def cmd_decode(args) -> int:
    params, _, meta = load_checkpoint(_path(args.checkpoint))
    vocab = load_vocab(_path(args.vocab))
    if meta.get("vocab_sha256") != vocab.sha256():
        raise CheckpointError("vocabulary hash mismatch between checkpoint and vocab file")
    model_config = ModelConfig(**meta["model_config"])
    max_len = args.max_len or model_config.max_len
    sources = _read_column(_path(args.input), 0)
    with open(_path(args.output), "w", encoding="utf-8", newline="\n") as fh:
        for text in sources:
            ids = vocab.encode(text)[:model_config.max_len]
            if args.beam > 1:
                hyp = beam_decode(params, model_config, ids, args.beam, max_len,
                                  length_norm=args.length_norm)
            else:
                hyp = greedy_decode(params, model_config, ids, max_len)
            fh.write(vocab.decode(hyp.tokens) + "\n")
    print(f"decoded {len(sources)} sentences -> {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    hypotheses = _read_column(_path(args.hypotheses), 1)
    references = _read_column(_path(args.references), 1)
    try:
        validate_text_list(hypotheses, "hypotheses")
        report = evaluate_corpus(hypotheses, references)
    except ValueError as exc:
        raise DataError(str(exc))
    meta = {}
    for item in args.meta or []:
        if "=" not in item:
            raise ConfigError(f"--meta expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        meta[key] = value
    payload = {
        "bleu3": report.bleu3,
        "rouge_l": report.rouge_l,
        "meteor": report.meteor,
        "sentences": len(report.per_sentence),
        "meta": meta,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.output:
        with open(_path(args.output), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
    if args.per_sentence:
        with open(_path(args.per_sentence), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "bleu3", "rouge_l", "meteor", "hyp_len", "ref_len",
                             "lcs", "unigram_matches", "chunks"])
            for row in report.per_sentence:
                writer.writerow([row.index, f"{row.bleu3:.6f}", f"{row.rouge_l:.6f}",
                                 f"{row.meteor:.6f}", row.hyp_len, row.ref_len,
                                 row.lcs, row.unigram_matches, row.chunks])
    print(text)
    return 0


def cmd_mask_preview(args) -> int:
    vocab = load_vocab(_path(args.vocab))
    config = load_run_config(args.config, {"masking": args.masking})
    sentences = load_unpaired(_path(args.data))
    rng = np.random.default_rng(args.seed)
    shown = 0
    for text in sentences:
        if shown >= args.count:
            break
        ids = vocab.encode(text)
        if any(t < NUM_SPECIALS for t in ids):
            continue
        example = build_pretrain_example(ids, config.masking, rng, vocab.size)
        print("\t".join([
            text,
            vocab.decode(example.encoder_input),
            vocab.decode(example.decoder_input),
            vocab.decode(example.targets),
            str(example.span[0]),
            str(example.span[1]),
        ]))
        shown += 1
    if args.stats:
        usable = [vocab.encode(s) for s in sentences]
        usable = [ids for ids in usable if all(t >= NUM_SPECIALS for t in ids)]
        report = masking_report(usable, config.masking, rng, args.stats, vocab.size)
        print(json.dumps({
            "fractions": report.fractions,
            "containment_rate": report.containment_rate,
            "span_lengths": {str(k): v for k, v in report.span_lengths.items()},
        }, sort_keys=True), file=sys.stderr)
    return 0


def cmd_grad_check(args) -> int:
    from .checks import full_model_grad_errors, primitive_grad_errors

    with T.precision("float64"):
        failures = []
        for name, err in primitive_grad_errors(np.random.default_rng(args.seed)).items():
            status = "ok" if err < args.tolerance else "FAIL"
            print(f"{name:24s} max-rel-err {err:.3e} {status}")
            if err >= args.tolerance:
                failures.append(name)
        for name, err in full_model_grad_errors(np.random.default_rng(args.seed)).items():
            status = "ok" if err < args.tolerance else "FAIL"
            print(f"model/{name:18s} max-rel-err {err:.3e} {status}")
            if err >= args.tolerance:
                failures.append(f"model/{name}")
    if failures:
        raise NumericError(f"gradient check failed for: {', '.join(failures)}")
    print("all gradient checks passed")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in sorted(glob.glob(os.path.join(_path(args.runs), "*.json"))):
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        meta = payload.get("meta", {})
        if "method" not in meta or "pairs" not in meta:
            continue
        rows.append((meta["method"], int(meta["pairs"]), payload["bleu3"],
                     payload["rouge_l"], payload["meteor"]))
    if not rows:
        raise DataError(f"no evaluation reports with method/pairs metadata under {args.runs}")
    rows.sort(key=lambda r: (r[0], r[1]))
    out = sys.stdout if args.output == "-" else open(_path(args.output), "w",
                                                     encoding="utf-8", newline="")
    try:
        writer = csv.writer(out)
        writer.writerow(["method", "pairs", "bleu3", "rouge_l", "meteor"])
        for method, pairs, b, r, m in rows:
            writer.writerow([method, pairs, f"{b:.6f}", f"{r:.6f}", f"{m:.6f}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mapgn",
        description="Pointer-generator seq2seq with masked-span pre-training.",
        epilog=_config_reference(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic normalization corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-unpaired", type=int, default=10_000)
    p.add_argument("--n-paired", type=int, default=1_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--insertion-prob", type=float, default=0.25)
    p.add_argument("--substitution-prob", type=float, default=0.5)
    p.add_argument("--lexicon-size", type=int, default=160)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("build-vocab", help="build a character vocabulary from text files")
    p.add_argument("--output", required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--max-size", type=int, default=None)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="span-masked self-supervised pre-training",
                       epilog=_config_reference(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="unpaired text, one sentence per line")
    p.add_argument("--vocab", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--masking", help="override the config masking preset")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="loss log CSV path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised training on paired data",
                       epilog=_config_reference(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config")
    p.add_argument("--train", required=True, help="paired .tsv (source TAB target)")
    p.add_argument("--valid", help="paired .tsv used for best-checkpoint selection")
    p.add_argument("--vocab", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--init-from", help="checkpoint to transfer parameters from")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="loss log CSV path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("decode", help="decode sources with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True, help=".txt lines or .tsv (source column)")
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-len", type=int)
    p.add_argument("--length-norm", action="store_true")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--hypotheses", required=True, help=".txt lines or .tsv (target column)")
    p.add_argument("--references", required=True, help=".txt lines or .tsv (target column)")
    p.add_argument("--output", help="write the JSON report here as well")
    p.add_argument("--per-sentence", help="write per-sentence scores CSV")
    p.add_argument("--meta", nargs="*", help="key=value pairs recorded in the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mask-preview", help="show corrupted pre-training examples",
                       epilog=_config_reference(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--masking")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stats", type=int, default=0,
                   help="additionally aggregate this many corruption samples")
    p.set_defaults(func=cmd_mask_preview)

    p = sub.add_parser("grad-check", help="verify gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("report", help="aggregate evaluation JSONs into a CSV")
    p.add_argument("--runs", required=True, help="directory of evaluate --output files")
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {_oneline(exc)}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: data: {_oneline(exc)}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: numeric: {_oneline(exc)}", file=sys.stderr)
        return 4


def _oneline(exc: Exception) -> str:
    return str(exc).replace("\n", "; ")


if __name__ == "__main__":
    sys.exit(main())
