"""Tokenization, vocabularies, pointer supervision and dataset files."""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

PAD, UNK, SOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD, UNK, SOS, EOS)
PAD_ID, UNK_ID, SOS_ID, EOS_ID = 0, 1, 2, 3

ENTITY_TYPES = ("PERSON", "LOCATION", "ORGANIZATION", "MISC")

RAW_FORMAT = "rlsum.raw"
DATASET_FORMAT = "rlsum.dataset"
VOCAB_FORMAT = "rlsum.vocab"
FORMAT_VERSION = 1


class SchemaVersionError(ValueError):
    """A file declares an unknown format name or version."""


# ---------------------------------------------------------------------------
# tokenization

# Order matters: dotted abbreviations (optionally hyphen-joined to a word),
# numbers with internal separators, words with internal hyphens, periods or
# apostrophes, then any other single non-space character.
_TOKEN_RE = re.compile(
    r"""
    (?:[^\W\d_]\.){2,}(?:-\w+(?:[-.']\w+)*)?   # u.s.  u.s.-based
    | \d+(?:[.,]\d+)+                          # 1,000  3.5
    | \w+(?:[-.'’]\w+)*                        # well-known  o'neill  e.on
    | [^\w\s]                                  # punctuation, one char each
    """,
    re.VERBOSE,
)


def tokenize(text: str) -> list[str]:
    """Lowercase and split ``text`` into word and punctuation tokens.

    Hyphens, periods and apostrophes are kept when they sit between word
    characters; everything else that is not a word character becomes its own
    token.

    >>> tokenize("The cat sat.")
    ['the', 'cat', 'sat', '.']
    >>> tokenize("U.S.-based firm")
    ['u.s.-based', 'firm']
    """
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# NYT-style normalization

_MEDIA_WORDS = ("photo", "graph", "chart", "map", "table", "drawing")
_MEDIA_RE = re.compile(r"^(?:%s)s?$" % "|".join(_MEDIA_WORDS))
_MARK_RE = re.compile(r"\((?:s|m)\)")
_DIGITS_RE = re.compile(r"\d+(?:[.,]\d+)*")
_SPACE_RE = re.compile(r"\s+")


class NormalizedPair(NamedTuple):
    article: str
    abstract: str
    sentences: list[str]


def _clean(text: str) -> str:
    return _SPACE_RE.sub(" ", text).strip()


def normalize_nyt(article_text: str, abstract_text: str) -> NormalizedPair:
    """Apply the NYT article/abstract clean-up rules.

    Rules, in the order applied:

    1. lowercase both texts;
    2. drop ``(s)`` and ``(m)`` marks from the abstract;
    3. split the abstract at semicolons and drop segments that consist only
       of a media word (photo, graph, chart, map, table, drawing, singular or
       plural) when the segment is semicolon-delimited or final, and drop a
       media word that ends the abstract (once, not repeatedly);
    4. replace every number (digits with optional internal ``.``/``,``
       separators) with ``0`` in both texts.

    The remaining abstract segments are the summary sentences; ``abstract``
    joins them with ``"; "``.
    """
    article = _DIGITS_RE.sub("0", article_text.lower())
    abstract = _MARK_RE.sub("", abstract_text.lower())
    segments = [_clean(s) for s in abstract.split(";")]
    last = len(segments) - 1
    tail = segments[last].split(" ")
    if len(tail) > 1 and _MEDIA_RE.match(tail[-1]):
        segments[last] = " ".join(tail[:-1])
    kept = [
        seg for k, seg in enumerate(segments)
        if not (_MEDIA_RE.match(seg) and (0 < k < last or k == last))
    ]
    sentences = [_DIGITS_RE.sub("0", s) for s in kept if s]
    return NormalizedPair(_clean(article), "; ".join(sentences), sentences)


# ---------------------------------------------------------------------------
# vocabularies


@dataclass
class Vocab:
    """Token/id mapping with the four reserved entries at ids 0..3."""

    itos: list[str]
    limit: int | None = None
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if self.limit is not None and len(self.itos) > self.limit:
            raise ValueError(f"vocabulary has {len(self.itos)} entries, limit {self.limit}")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()


def _ranked(counts: Counter) -> list[str]:
    return [tok for tok, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]


def build_vocab(
    corpus: Iterable[tuple[Sequence[str], Sequence[str]]],
    input_limit: int,
    output_limit: int,
) -> tuple[Vocab, Vocab]:
    """Frequency-ranked input and output vocabularies.

    ``corpus`` yields ``(article_tokens, summary_tokens)`` pairs.  The output
    vocabulary ranks summary tokens; the input vocabulary starts with the
    output vocabulary (same ids) and is filled with the most frequent
    remaining training tokens, so one embedding table indexed by input ids
    serves both roles.  Ties are broken lexicographically.
    """
    if input_limit < 4 or output_limit < 4:
        raise ValueError("vocabulary limits must be at least 4 (the reserved tokens)")
    if output_limit > input_limit:
        raise ValueError("output vocabulary limit cannot exceed the input limit")
    in_counts: Counter = Counter()
    out_counts: Counter = Counter()
    n = 0
    for article, summary in corpus:
        n += 1
        in_counts.update(article)
        in_counts.update(summary)
        out_counts.update(summary)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED:
        in_counts.pop(tok, None)
        out_counts.pop(tok, None)
    out_tokens = _ranked(out_counts)[: output_limit - 4]
    out_vocab = Vocab(list(RESERVED) + out_tokens, limit=output_limit)
    seen = set(out_vocab.itos)
    extra = [t for t in _ranked(in_counts) if t not in seen][: input_limit - len(out_vocab)]
    in_vocab = Vocab(out_vocab.itos + extra, limit=input_limit)
    return in_vocab, out_vocab


def save_vocab(path: str | Path, input_vocab: Vocab, output_vocab: Vocab) -> None:
    payload = {
        "format": VOCAB_FORMAT,
        "version": FORMAT_VERSION,
        "input_limit": input_vocab.limit,
        "output_limit": output_vocab.limit,
        "output_size": len(output_vocab),
        "tokens": input_vocab.itos,
    }
    Path(path).write_text(json.dumps(payload, ensure_ascii=False) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> tuple[Vocab, Vocab]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    _check_header(payload, VOCAB_FORMAT, path)
    tokens = payload["tokens"]
    k = payload["output_size"]
    return Vocab(tokens, payload.get("input_limit")), Vocab(tokens[:k], payload.get("output_limit"))


# ---------------------------------------------------------------------------
# entity lexicon


class EntityLexicon:
    """Token-sequence entities with longest-match lookup."""

    def __init__(self, entries: Iterable[tuple[Sequence[str], str]] = ()):
        self.entries: dict[tuple[str, ...], str] = {}
        self.max_len = 0
        for tokens, etype in entries:
            self.add(tokens, etype)

    def add(self, tokens: Sequence[str], etype: str) -> None:
        tokens = tuple(tokens)
        if not tokens:
            raise ValueError("lexicon entries must be non-empty")
        if etype not in ENTITY_TYPES:
            raise ValueError(f"unknown entity type {etype!r}")
        self.entries[tokens] = etype
        self.max_len = max(self.max_len, len(tokens))

    def __len__(self) -> int:
        return len(self.entries)

    def spans(self, tokens: Sequence[str]) -> list[tuple[int, int, str]]:
        """Non-overlapping ``(start, end, type)`` matches, scanning left to right."""
        out = []
        i = 0
        n = len(tokens)
        while i < n:
            for k in range(min(self.max_len, n - i), 0, -1):
                etype = self.entries.get(tuple(tokens[i : i + k]))
                if etype is not None:
                    out.append((i, i + k, etype))
                    i += k
                    break
            else:
                i += 1
        return out

    @classmethod
    def load(cls, path: str | Path) -> "EntityLexicon":
        lex = cls()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                etype, text = line.split("\t", 1)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'TYPE<TAB>tokens'") from None
            lex.add(tokenize(text), etype.strip())
        return lex

    def save(self, path: str | Path) -> None:
        lines = [f"{etype}\t{' '.join(toks)}" for toks, etype in sorted(self.entries.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# encoded examples


@dataclass
class Example:
    """A tokenized article/summary pair with pointer labels.

    Target arrays have one entry per decoding step; the final step is
    ``EOS``.  ``pointer_positions[t]`` is -1 wherever ``pointer_flags[t]``
    is 0.
    """

    input_tokens: list[str]
    input_ids: list[int]
    target_tokens: list[str]
    target_ids: list[int]
    pointer_flags: list[int]
    pointer_positions: list[int]
    date: str | None = None
    uid: str | None = None

    @property
    def summary_tokens(self) -> list[str]:
        return self.target_tokens[:-1]

    def validate(self, max_input_len: int | None = None, max_output_len: int | None = None) -> None:
        n, m = len(self.input_tokens), len(self.target_tokens)
        if n == 0 or len(self.input_ids) != n:
            raise ValueError("input tokens and ids must be non-empty and aligned")
        if not (m == len(self.target_ids) == len(self.pointer_flags) == len(self.pointer_positions)):
            raise ValueError("target arrays are misaligned")
        if m == 0 or self.target_tokens[-1] != EOS:
            raise ValueError("target must end with EOS")
        if max_input_len is not None and n > max_input_len:
            raise ValueError(f"input length {n} exceeds {max_input_len}")
        if max_output_len is not None and m > max_output_len:
            raise ValueError(f"target length {m} exceeds {max_output_len}")
        for t, (u, pos) in enumerate(zip(self.pointer_flags, self.pointer_positions)):
            if u == 1:
                if not 0 <= pos < n or self.input_tokens[pos] != self.target_tokens[t]:
                    raise ValueError(f"invalid pointer label at step {t}")
            elif u != 0 or pos != -1:
                raise ValueError(f"invalid pointer label at step {t}")

    def to_record(self) -> dict:
        return {
            "uid": self.uid,
            "date": self.date,
            "input_tokens": self.input_tokens,
            "input_ids": self.input_ids,
            "target_tokens": self.target_tokens,
            "target_ids": self.target_ids,
            "pointer_flags": self.pointer_flags,
            "pointer_positions": self.pointer_positions,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Example":
        return cls(
            input_tokens=rec["input_tokens"],
            input_ids=rec["input_ids"],
            target_tokens=rec["target_tokens"],
            target_ids=rec["target_ids"],
            pointer_flags=rec["pointer_flags"],
            pointer_positions=rec["pointer_positions"],
            date=rec.get("date"),
            uid=rec.get("uid"),
        )


def _find(haystack: Sequence[str], needle: Sequence[str]) -> int:
    k = len(needle)
    for i in range(len(haystack) - k + 1):
        if list(haystack[i : i + k]) == list(needle):
            return i
    return -1


def encode_example(
    article_tokens: Sequence[str],
    summary_tokens: Sequence[str],
    input_vocab: Vocab,
    output_vocab: Vocab,
    lexicon: EntityLexicon | None = None,
    max_input_len: int = 800,
    max_output_len: int = 100,
    date: str | None = None,
    uid: str | None = None,
) -> Example:
    """Encode one pair and derive pointer supervision.

    A summary step is pointer-supervised when it belongs to a lexicon entity
    whose full token span also occurs in the article (label: the matching
    token of the span's first occurrence), or when the token is outside the
    output vocabulary and occurs in the article (label: its first
    occurrence).  OOV tokens absent from the article fall back to ``UNK``
    with no pointer label.
    """
    if not article_tokens:
        raise ValueError("article must contain at least one token")
    src = list(article_tokens[:max_input_len])
    tgt = list(summary_tokens[: max_output_len - 1])
    flags = [0] * len(tgt)
    positions = [-1] * len(tgt)
    if lexicon is not None and len(lexicon):
        for start, end, _ in lexicon.spans(tgt):
            at = _find(src, tgt[start:end])
            if at < 0:
                continue
            for k in range(end - start):
                flags[start + k] = 1
                positions[start + k] = at + k
    first: dict[str, int] = {}
    for i, tok in enumerate(src):
        first.setdefault(tok, i)
    for t, tok in enumerate(tgt):
        if flags[t] == 0 and tok not in output_vocab and tok in first:
            flags[t] = 1
            positions[t] = first[tok]
    ex = Example(
        input_tokens=src,
        input_ids=input_vocab.encode(src),
        target_tokens=tgt + [EOS],
        target_ids=output_vocab.encode(tgt) + [EOS_ID],
        pointer_flags=flags + [0],
        pointer_positions=positions + [-1],
        date=date,
        uid=uid,
    )
    return ex


# ---------------------------------------------------------------------------
# splits


def _parse_date(value) -> _dt.date:
    if value is None or value == "":
        raise ValueError("chronological split requires every document to have a date")
    if isinstance(value, _dt.date):
        return value
    return _dt.date.fromisoformat(str(value))


def chronological_split(docs: Sequence, date_key=lambda d: d["date"]):
    """Sort by publication date and cut 90% / 5% / 5%.

    Boundaries are rounded down; the test split takes the remainder.  The
    sort is stable, so documents sharing a date keep their input order.
    """
    keyed = [(_parse_date(date_key(d)), i, d) for i, d in enumerate(docs)]
    keyed.sort(key=lambda x: (x[0], x[1]))
    ordered = [d for _, _, d in keyed]
    n = len(ordered)
    n_train = math.floor(0.90 * n)
    n_valid = math.floor(0.05 * n)
    return ordered[:n_train], ordered[n_train : n_train + n_valid], ordered[n_train + n_valid :]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticConfig:
    """Knobs for the templated fact corpus.

    Lengths are in tokens.  ``entity_density`` is the probability that a
    subject or location slot holds a lexicon entity; ``rare_rate`` is the
    probability that an object is a one-off word (OOV after vocabulary
    truncation).
    """

    n_docs: int = 256
    vocab_size: int = 60
    article_len: tuple[int, int] = (24, 48)
    summary_len: tuple[int, int] = (8, 16)
    entity_density: float = 0.5
    rare_rate: float = 0.15
    n_entities: int = 24

    def __post_init__(self):
        self.article_len = tuple(self.article_len)
        self.summary_len = tuple(self.summary_len)
        lo, hi = self.article_len
        slo, shi = self.summary_len
        if not (0 < lo <= hi) or not (0 < slo <= shi):
            raise ValueError("length ranges must satisfy 0 < low <= high")
        if shi > hi:
            raise ValueError("summary length bound exceeds article length bound")
        if slo < 8:
            raise ValueError("summary lower bound must fit one restated fact (8 tokens)")
        if lo < 9:
            raise ValueError("article lower bound must fit one fact clause (9 tokens)")
        if not 0.0 <= self.entity_density <= 1.0 or not 0.0 <= self.rare_rate <= 1.0:
            raise ValueError("densities must lie in [0, 1]")
        if self.n_docs < 1 or self.vocab_size < 12:
            raise ValueError("need at least one document and a vocabulary of 12 words")


@dataclass
class SyntheticCorpus:
    docs: list[dict]
    lexicon: EntityLexicon


_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")


def _pseudo_words(rng: np.random.Generator, count: int, syllables: int, taken: set) -> list[str]:
    words = []
    while len(words) < count:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def generate_synthetic_corpus(config: SyntheticConfig, seed: int) -> SyntheticCorpus:
    """Deterministic dated corpus of templated fact clauses with distractors.

    Article: fact clauses ``<subj> <verb> <num> <obj> near <place> .`` mixed
    with distractors ``officials said the <noun> was <adj> .``.  Summary:
    the leading facts restated as ``<subj> <verb'> <obj> near <place> .``
    where ``verb'`` comes from a fixed synonym table (generation) while
    subjects, places and objects (entities, rare words) are copied.
    """
    rng = np.random.default_rng(seed)
    taken: set = {"the", "officials", "said", "was", "near", "."}
    n_common = config.vocab_size
    nouns = _pseudo_words(rng, max(4, n_common // 3), 2, taken)
    adjs = _pseudo_words(rng, max(2, n_common // 6), 2, taken)
    verbs = _pseudo_words(rng, max(2, n_common // 6), 2, taken)
    synonyms = dict(zip(verbs, _pseudo_words(rng, len(verbs), 2, taken)))
    numbers = [str(k) for k in range(2, 2 + max(2, n_common // 6))]

    lexicon = EntityLexicon()
    persons, places = [], []
    for k in range(config.n_entities):
        first, last = _pseudo_words(rng, 2, 3, taken)
        if k % 2 == 0:
            persons.append((first, last))
            lexicon.add((first, last), "PERSON")
        else:
            places.append((first, last))
            lexicon.add((first, last), "LOCATION")

    def noun_phrase(pool):
        if pool and rng.random() < config.entity_density:
            return list(pool[rng.integers(len(pool))])
        return ["the", str(rng.choice(nouns))]

    start = _dt.date(1996, 1, 1).toordinal()
    span = _dt.date(2007, 12, 31).toordinal() - start
    docs = []
    rare_counter = 0
    lo, hi = config.article_len
    slo, shi = config.summary_len
    for d in range(config.n_docs):
        target_len = int(rng.integers(lo, hi + 1))
        summary_budget = int(rng.integers(slo, shi + 1))
        facts, clauses = [], []
        length = 0
        while True:
            if facts and rng.random() < 0.35:
                clause = ["officials", "said", "the", str(rng.choice(nouns)), "was", str(rng.choice(adjs)), "."]
                fact = None
            else:
                subj = noun_phrase(persons)
                verb = str(rng.choice(verbs))
                if rng.random() < config.rare_rate:
                    obj = _pseudo_words(rng, 1, 4, taken)[0]
                    rare_counter += 1
                else:
                    obj = str(rng.choice(nouns))
                place = noun_phrase(places)
                clause = subj + [verb, str(rng.choice(numbers)), obj, "near"] + place + ["."]
                fact = subj + [synonyms[verb], obj, "near"] + place + ["."]
            if facts and length + len(clause) > target_len:
                break
            clauses.append(clause)
            length += len(clause)
            if fact is not None:
                facts.append(fact)
        summary: list[str] = []
        for fact in facts:
            if summary and len(summary) + len(fact) > summary_budget:
                break
            summary.extend(fact)
        date = _dt.date.fromordinal(start + int(rng.integers(span + 1))).isoformat()
        docs.append(
            {
                "uid": f"syn-{seed}-{d:06d}",
                "date": date,
                "article": " ".join(t for c in clauses for t in c),
                "summary": " ".join(summary),
            }
        )
    return SyntheticCorpus(docs, lexicon)


# ---------------------------------------------------------------------------
# files


def _check_header(header: dict, fmt: str, path) -> None:
    if header.get("format") != fmt:
        raise SchemaVersionError(f"{path}: expected format {fmt!r}, found {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise SchemaVersionError(
            f"{path}: unsupported {fmt} version {header.get('version')!r} (expected {FORMAT_VERSION})"
        )


def _write_jsonl(path, fmt: str, records: Iterable[dict], meta: dict | None = None) -> None:
    header = {"format": fmt, "version": FORMAT_VERSION}
    if meta:
        header["meta"] = meta
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def _read_jsonl(path, fmt: str) -> tuple[dict, Iterator[dict]]:
    fh = open(path, encoding="utf-8")
    first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError:
        fh.close()
        raise SchemaVersionError(f"{path}: missing header line") from None
    try:
        _check_header(header, fmt, path)
    except SchemaVersionError:
        fh.close()
        raise

    def rows():
        with fh:
            for line in fh:
                if line.strip():
                    yield json.loads(line)

    return header, rows()


def write_raw_corpus(path, docs: Iterable[dict]) -> None:
    """Raw documents: ``uid``, ``date``, ``article``, ``summary`` per line."""
    _write_jsonl(path, RAW_FORMAT, docs)


def read_raw_corpus(path) -> list[dict]:
    _, rows = _read_jsonl(path, RAW_FORMAT)
    return list(rows)


def write_dataset(path, examples: Iterable[Example], meta: dict | None = None) -> None:
    _write_jsonl(path, DATASET_FORMAT, (ex.to_record() for ex in examples), meta)


def read_dataset(path) -> list[Example]:
    _, rows = _read_jsonl(path, DATASET_FORMAT)
    return [Example.from_record(r) for r in rows]
