"""``rlsum`` command-line interface.

Every option may also be given in a JSON file passed with ``--config``; keys
are option names with underscores.  A flag on the command line beats the
file, which beats the built-in default.  Each run writes a manifest holding
the resolved configuration, its hash, the seed, package versions and digests
of the input files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, fields
from importlib import metadata
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .decoding import has_duplicate_trigram
from .forward import SummaryModel
from .model import load_checkpoint
from .rouge import METRICS, report_lines, score_corpus
from .textdata import (
    EntityLexicon,
    SchemaVersionError,
    SyntheticConfig,
    build_vocab,
    chronological_split,
    encode_example,
    generate_synthetic_corpus,
    load_vocab,
    normalize_nyt,
    read_dataset,
    read_raw_corpus,
    save_vocab,
    tokenize,
    write_dataset,
    write_raw_corpus,
)
from .training import (
    TrainingConfig,
    TrainingDiverged,
    WarmStartRequired,
    evaluate,
    length_bucket_diagnostic,
    train,
)

log = logging.getLogger("rlsum")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_DIVERGED = 5


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    type: Any = str
    default: Any = None
    help: str = ""
    required: bool = False
    nargs: int | None = None
    choices: tuple | None = None
    is_input: bool = False  # path that must exist; digested into the manifest


def _path(name, help, required=False, is_input=False):
    return Opt(name, str, None, help, required=required, is_input=is_input)


_TRAIN_TYPES = {"lr": float, "patience": int, "validation_size": int, "clip_norm": float, "warm_start": str}
_TRAIN_CHOICES = {
    "objective": ("ml", "rl", "ml+rl"),
    "supervision": ("labeled", "marginal"),
    "profile": ("desk", "paper"),
    "reward_metric": METRICS,
}


def _training_opts() -> list[Opt]:
    out = []
    for f in fields(TrainingConfig):
        typ = _TRAIN_TYPES.get(f.name, type(f.default))
        out.append(Opt(f.name, typ, f.default, f"training option ({f.default!r} by default)",
                       choices=_TRAIN_CHOICES.get(f.name), is_input=f.name == "warm_start"))
    return out


_DECODE = [
    Opt("beam_width", int, 5, "beam width; 0 decodes greedily"),
    Opt("max_len", int, 100, "maximum summary length in tokens"),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "gen-synthetic": ("generate a synthetic dated corpus", [
        _path("out", "raw corpus file to write", required=True),
        _path("lexicon_out", "entity lexicon file to write"),
        Opt("n_docs", int, 256, "number of documents"),
        Opt("vocab_size", int, 60, "number of distinct content words"),
        Opt("article_len", int, [24, 48], "article length range", nargs=2),
        Opt("summary_len", int, [8, 16], "summary length range", nargs=2),
        Opt("entity_density", float, 0.5, "probability of an entity in a name slot"),
        Opt("rare_rate", float, 0.15, "probability of a one-off object word"),
        Opt("n_entities", int, 24, "number of lexicon entities"),
        Opt("seed", int, 0, "random seed"),
    ]),
    "build-vocab": ("build input and output vocabularies", [
        _path("raw", "raw corpus file", required=True, is_input=True),
        _path("out", "vocabulary file to write", required=True),
        Opt("input_size", int, 5000, "input vocabulary size"),
        Opt("output_size", int, 2000, "output vocabulary size"),
        Opt("normalize_nyt", bool, False, "apply NYT-style normalization first"),
        Opt("train_only", bool, False, "count tokens from the chronological training split only"),
    ]),
    "prepare": ("tokenize, encode and split a raw corpus", [
        _path("raw", "raw corpus file", required=True, is_input=True),
        _path("vocab", "vocabulary file", required=True, is_input=True),
        _path("out_dir", "directory for train/valid/test datasets", required=True),
        _path("lexicon", "entity lexicon file", is_input=True),
        Opt("normalize_nyt", bool, False, "apply NYT-style normalization first"),
        Opt("split", bool, True, "split chronologically 90/5/5 (otherwise write all.jsonl)"),
        Opt("max_input_len", int, 800, "article truncation length"),
        Opt("max_output_len", int, 100, "summary truncation length, EOS included"),
    ]),
    "train": ("train a model", [
        _path("train", "training dataset", required=True, is_input=True),
        _path("vocab", "vocabulary file", required=True, is_input=True),
        _path("out_dir", "directory for checkpoints and the training log", required=True),
        _path("valid", "validation dataset", is_input=True),
        *_training_opts(),
    ]),
    "evaluate": ("decode a dataset and score it with ROUGE", [
        _path("checkpoint", "model checkpoint", required=True, is_input=True),
        _path("vocab", "vocabulary file", required=True, is_input=True),
        _path("data", "dataset to evaluate", required=True, is_input=True),
        _path("report", "per-example report file (JSON lines)"),
        _path("hypotheses_out", "file for decoded summaries, one per line"),
        *_DECODE,
        Opt("stem", bool, True, "Porter-stem tokens before matching"),
        Opt("limited_length", bool, False, "truncate hypotheses to the reference length (report recall)"),
        Opt("workers", int, 1, "decoding processes"),
    ]),
    "summarize": ("summarize articles", [
        _path("checkpoint", "model checkpoint", required=True, is_input=True),
        _path("vocab", "vocabulary file", required=True, is_input=True),
        Opt("text", str, None, "article text"),
        _path("input", "file with one article per line", is_input=True),
        _path("out", "output file (standard output by default)"),
        Opt("max_input_len", int, 800, "article truncation length"),
        *_DECODE,
    ]),
    "diagnose": ("cumulative ROUGE improvement of model A over B by summary length", [
        _path("checkpoint_a", "checkpoint of model A", required=True, is_input=True),
        _path("checkpoint_b", "checkpoint of model B", required=True, is_input=True),
        _path("vocab", "vocabulary file", required=True, is_input=True),
        _path("data", "dataset", required=True, is_input=True),
        _path("out", "table file (standard output by default)"),
        Opt("metric", str, "rouge-1", "metric", choices=METRICS),
        *_DECODE,
    ]),
    "rouge": ("score a hypothesis file against a reference file", [
        _path("hyp", "hypotheses, one per line", required=True, is_input=True),
        _path("ref", "references, one per line", required=True, is_input=True),
        _path("report", "per-example report file (JSON lines)"),
        Opt("stem", bool, True, "Porter-stem tokens before matching"),
        Opt("limited_length", bool, False, "truncate hypotheses to the reference length"),
    ]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlsum", description="Reinforced intra-attention summarizer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("--manifest", help="manifest path (default: next to the main output)")
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            if o.type is bool:
                p.add_argument(flag, dest=o.name, action=argparse.BooleanOptionalAction, help=o.help)
            else:
                p.add_argument(flag, dest=o.name, type=o.type, nargs=o.nargs, choices=o.choices, help=o.help)
    return parser


def resolve_options(command: str, given: dict, config_path: str | None) -> dict:
    """Merge built-in defaults, the config file and explicit flags, in rising priority."""
    opts = COMMANDS[command][1]
    resolved = {o.name: o.default for o in opts}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise UsageError(f"{path}: expected a JSON object")
        unknown = set(data) - set(resolved)
        if unknown:
            raise UsageError(f"{path}: unknown option(s) for {command}: {', '.join(sorted(unknown))}")
        resolved.update(data)
    resolved.update({k: v for k, v in given.items() if k in resolved})
    for o in opts:
        if o.required and resolved[o.name] is None:
            raise UsageError(f"{command}: --{o.name.replace('_', '-')} is required")
    for o in opts:
        if o.is_input and resolved[o.name] is not None and not Path(resolved[o.name]).exists():
            raise FileNotFoundError(f"input file not found: {resolved[o.name]}")
    return resolved


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _version(pkg: str) -> str:
    try:
        return metadata.version(pkg)
    except metadata.PackageNotFoundError:
        return "unknown"


def build_manifest(command: str, options: dict) -> dict:
    canonical = json.dumps({"command": command, "options": options}, sort_keys=True)
    inputs = {o.name: _sha256(options[o.name]) for o in COMMANDS[command][1]
              if o.is_input and options[o.name] is not None}
    return {
        "command": command,
        "options": options,
        "config_hash": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
        "seed": options.get("seed"),
        "inputs": inputs,
        "versions": {
            "rlsum": _version("rlsum"),
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }


def _manifest_path(options: dict, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    if options.get("out_dir"):
        return Path(options["out_dir"]) / "manifest.json"
    for key in ("out", "report"):
        if options.get(key):
            return Path(str(options[key]) + ".manifest.json")
    return Path("rlsum-manifest.json")


def _emit(path: str | None, lines: list[str]) -> None:
    text = "".join(line + "\n" for line in lines)
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands


def _pairs(docs: list[dict], normalize: bool) -> list[tuple[list[str], list[str]]]:
    out = []
    for d in docs:
        article, summary = d["article"], d["summary"]
        if normalize:
            norm = normalize_nyt(article, summary)
            article, summary = norm.article, norm.abstract
        out.append((tokenize(article), tokenize(summary)))
    return out


def cmd_gen_synthetic(o: dict) -> int:
    cfg = SyntheticConfig(
        n_docs=o["n_docs"], vocab_size=o["vocab_size"], article_len=tuple(o["article_len"]),
        summary_len=tuple(o["summary_len"]), entity_density=o["entity_density"],
        rare_rate=o["rare_rate"], n_entities=o["n_entities"],
    )
    corpus = generate_synthetic_corpus(cfg, seed=o["seed"])
    write_raw_corpus(o["out"], corpus.docs)
    if o["lexicon_out"]:
        corpus.lexicon.save(o["lexicon_out"])
    log.info("wrote %d documents to %s", len(corpus.docs), o["out"])
    return EXIT_OK


def cmd_build_vocab(o: dict) -> int:
    docs = read_raw_corpus(o["raw"])
    if o["train_only"]:
        docs = chronological_split(docs)[0]
    iv, ov = build_vocab(_pairs(docs, o["normalize_nyt"]), o["input_size"], o["output_size"])
    save_vocab(o["out"], iv, ov)
    log.info("vocabulary: %d input, %d output tokens", len(iv), len(ov))
    return EXIT_OK


def cmd_prepare(o: dict) -> int:
    docs = read_raw_corpus(o["raw"])
    iv, ov = load_vocab(o["vocab"])
    lexicon = EntityLexicon.load(o["lexicon"]) if o["lexicon"] else None
    out_dir = Path(o["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = dict(zip(("train", "valid", "test"), chronological_split(docs))) if o["split"] else {"all": docs}
    meta = {"vocab_digest": iv.digest()}
    for name, part in splits.items():
        examples = [
            encode_example(a, s, iv, ov, lexicon, o["max_input_len"], o["max_output_len"],
                           date=d.get("date"), uid=d.get("uid"))
            for d, (a, s) in zip(part, _pairs(part, o["normalize_nyt"]))
            if a
        ]
        write_dataset(out_dir / f"{name}.jsonl", examples, meta)
        log.info("%s: %d examples", name, len(examples))
    return EXIT_OK


def cmd_train(o: dict) -> int:
    keys = {f.name for f in fields(TrainingConfig)}
    try:
        config = TrainingConfig(**{k: v for k, v in o.items() if k in keys})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    iv, ov = load_vocab(o["vocab"])
    train_set = read_dataset(o["train"])
    valid_set = read_dataset(o["valid"]) if o["valid"] else None
    out_dir = Path(o["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")
    result = train(config, train_set, iv, ov, out_dir, valid_set)
    summary = {"steps": len(result.log), "best_score": result.best_score,
               "last": str(result.last_path) if result.last_path else None,
               "best": str(result.best_path) if result.best_path else None}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _load_model(checkpoint, vocab) -> SummaryModel:
    iv, ov = load_vocab(vocab)
    return SummaryModel(load_checkpoint(checkpoint), iv, ov)


def cmd_evaluate(o: dict) -> int:
    model = _load_model(o["checkpoint"], o["vocab"])
    examples = read_dataset(o["data"])
    res = evaluate(model, examples, o["beam_width"], o["max_len"], stem=o["stem"],
                   limited_length=o["limited_length"], workers=o["workers"])
    ids = [ex.uid if ex.uid is not None else i for i, ex in enumerate(examples)]
    if o["report"]:
        _emit(o["report"], report_lines(res.per_example, res.means, ids, res.empty))
    if o["hypotheses_out"]:
        _emit(o["hypotheses_out"], [" ".join(h) for h in res.hypotheses])
    field = "recall" if o["limited_length"] else "f1"
    means = {m: getattr(s, field) for m, s in res.means.items()}
    print(json.dumps({"n": len(examples), "empty": len(res.empty), field: means}, sort_keys=True))
    return EXIT_OK


def cmd_summarize(o: dict) -> int:
    if (o["text"] is None) == (o["input"] is None):
        raise UsageError("summarize: give exactly one of --text or --input")
    model = _load_model(o["checkpoint"], o["vocab"])
    if o["text"] is not None:
        articles = [o["text"]]
    else:
        articles = [line for line in Path(o["input"]).read_text(encoding="utf-8").splitlines() if line.strip()]
    lines = []
    for article in articles:
        tokens = tokenize(article)[: o["max_input_len"]]
        if not tokens:
            raise UsageError("summarize: article has no tokens")
        summary = model.summarize(tokens, o["beam_width"], o["max_len"])
        if o["beam_width"] > 0 and has_duplicate_trigram(summary):
            raise AssertionError("beam search emitted a duplicate trigram")
        lines.append(" ".join(summary))
    _emit(o["out"], lines)
    return EXIT_OK


def cmd_diagnose(o: dict) -> int:
    model_a = _load_model(o["checkpoint_a"], o["vocab"])
    model_b = model_a if o["checkpoint_a"] == o["checkpoint_b"] else _load_model(o["checkpoint_b"], o["vocab"])
    rows = length_bucket_diagnostic(model_a, model_b, read_dataset(o["data"]),
                                    o["beam_width"], o["max_len"], o["metric"])
    cols = ("max_length", "n", "mean_a", "mean_b", "relative_improvement")
    lines = ["\t".join(cols)] + ["\t".join(str(r[c]) for c in cols) for r in rows]
    _emit(o["out"], lines)
    return EXIT_OK


def cmd_rouge(o: dict) -> int:
    hyps = Path(o["hyp"]).read_text(encoding="utf-8").splitlines()
    refs = Path(o["ref"]).read_text(encoding="utf-8").splitlines()
    if len(hyps) != len(refs):
        raise UsageError(f"rouge: {len(hyps)} hypotheses but {len(refs)} references")
    pairs = [(tokenize(h), tokenize(r)) for h, r in zip(hyps, refs)]
    per, means = score_corpus(pairs, METRICS, stem=o["stem"], limited_length=o["limited_length"])
    if o["report"]:
        empty = [i for i, (h, _) in enumerate(pairs) if not h]
        _emit(o["report"], report_lines(per, means, empty=empty))
    field = "recall" if o["limited_length"] else "f1"
    print(json.dumps({"n": len(pairs), field: {m: getattr(s, field) for m, s in means.items()}}, sort_keys=True))
    return EXIT_OK


HANDLERS: dict[str, Callable[[dict], int]] = {
    "gen-synthetic": cmd_gen_synthetic,
    "build-vocab": cmd_build_vocab,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "summarize": cmd_summarize,
    "diagnose": cmd_diagnose,
    "rouge": cmd_rouge,
}


def run(command: str, options: dict, manifest: str | None = None) -> int:
    """Execute ``command`` with fully resolved ``options`` and write the manifest."""
    log.info("config %s", json.dumps({"command": command, "options": options}, sort_keys=True))
    status = HANDLERS[command](options)
    path = _manifest_path(options, manifest)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(build_manifest(command, options), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return status


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    given = vars(args)
    command = given.pop("command")
    verbose = given.pop("verbose", False)
    config_path = given.pop("config", None)
    manifest = given.pop("manifest", None)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        options = resolve_options(command, given, config_path)
        return run(command, options, manifest)
    except UsageError as exc:
        print(f"rlsum: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except WarmStartRequired as exc:
        print(f"rlsum: error: {exc} (--warm-start PATH or --cold-start)", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"rlsum: error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except SchemaVersionError as exc:
        print(f"rlsum: error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except TrainingDiverged as exc:
        print(f"rlsum: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"rlsum: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
