"""ROUGE-N / ROUGE-L with optional Porter stemming.

Used both for evaluation (full-length F1, limited-length recall) and as the
sequence reward during self-critical training.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

# ---------------------------------------------------------------------------
# Porter stemmer (original 1980 algorithm)


def _is_cons(w: str, i: int) -> bool:
    ch = w[i]
    if ch in "aeiou":
        return False
    if ch == "y":
        return i == 0 or not _is_cons(w, i - 1)
    return True


def _measure(stem: str) -> int:
    """Number of VC sequences in ``[C](VC)^m[V]``."""
    m = 0
    prev_vowel = False
    for i in range(len(stem)):
        cons = _is_cons(stem, i)
        if cons and prev_vowel:
            m += 1
        prev_vowel = not cons
    return m


def _has_vowel(stem: str) -> bool:
    return any(not _is_cons(stem, i) for i in range(len(stem)))


def _double_cons(w: str) -> bool:
    return len(w) >= 2 and w[-1] == w[-2] and _is_cons(w, len(w) - 1)


def _cvc(w: str) -> bool:
    if len(w) < 3:
        return False
    return (
        _is_cons(w, len(w) - 3)
        and not _is_cons(w, len(w) - 2)
        and _is_cons(w, len(w) - 1)
        and w[-1] not in "wxy"
    )


_STEP2 = (
    ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
    ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
    ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
    ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
    ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"),
)
_STEP3 = (
    ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
    ("ical", "ic"), ("ful", ""), ("ness", ""),
)
_STEP4 = (
    "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement", "ment",
    "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
)


def _replace_first(w: str, rules, min_m: int) -> str:
    # The longest listed suffix that matches decides; its condition is then
    # checked and no shorter suffix is tried.
    best = None
    for suffix, repl in rules:
        if w.endswith(suffix) and (best is None or len(suffix) > len(best[0])):
            best = (suffix, repl)
    if best is None:
        return w
    stem = w[: len(w) - len(best[0])]
    return stem + best[1] if _measure(stem) > min_m else w


def _step1ab(w: str) -> str:
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies"):
        w = w[:-2]
    elif w.endswith("ss"):
        pass
    elif w.endswith("s"):
        w = w[:-1]

    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
        return w
    for suffix in ("ed", "ing"):
        if w.endswith(suffix) and _has_vowel(w[: -len(suffix)]):
            w = w[: -len(suffix)]
            if w.endswith(("at", "bl", "iz")):
                return w + "e"
            if _double_cons(w) and w[-1] not in "lsz":
                return w[:-1]
            if _measure(w) == 1 and _cvc(w):
                return w + "e"
            return w
    return w


def _step4(w: str) -> str:
    best = None
    for suffix in _STEP4:
        if w.endswith(suffix) and (best is None or len(suffix) > len(best)):
            best = suffix
    if best is None:
        return w
    stem = w[: -len(best)]
    if _measure(stem) <= 1:
        return w
    if best == "ion" and not stem.endswith(("s", "t")):
        return w
    return stem


@lru_cache(maxsize=65536)
def porter_stem(word: str) -> str:
    """Classic Porter stem of a lowercase alphabetic word.

    Anything else (digits, punctuation, mixed case, words of two letters or
    fewer) is returned unchanged.
    """
    if len(word) <= 2 or not (word.isalpha() and word.isascii() and word.islower()):
        return word
    w = _step1ab(word)
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"
    w = _replace_first(w, _STEP2, 0)
    w = _replace_first(w, _STEP3, 0)
    w = _step4(w)
    if w.endswith("e"):
        stem = w[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _cvc(stem)):
            w = stem
    if w.endswith("ll") and _measure(w) > 1:
        w = w[:-1]
    return w


# ---------------------------------------------------------------------------
# scores


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, match: int, n_hyp: int, n_ref: int) -> "RougeScore":
        if n_hyp == 0 or n_ref == 0:
            return cls(0.0, 0.0, 0.0)
        p = match / n_hyp
        r = match / n_ref
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)


def _prepare(tokens: Sequence[str], stem: bool) -> list[str]:
    return [porter_stem(t) for t in tokens] if stem else list(tokens)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(hyp: Sequence[str], ref: Sequence[str], n: int = 1, stem: bool = False) -> RougeScore:
    """Clipped n-gram overlap."""
    if n < 1:
        raise ValueError("n must be at least 1")
    h = _ngrams(_prepare(hyp, stem), n)
    r = _ngrams(_prepare(ref, stem), n)
    match = sum(min(c, r[g]) for g, c in h.items())
    return RougeScore.from_counts(match, sum(h.values()), sum(r.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Sequence[str], ref: Sequence[str], stem: bool = False) -> RougeScore:
    """LCS-based score over the whole summary treated as one sequence."""
    h = _prepare(hyp, stem)
    r = _prepare(ref, stem)
    return RougeScore.from_counts(lcs_length(h, r), len(h), len(r))


METRICS = ("rouge-1", "rouge-2", "rouge-l")


def score(metric: str, hyp: Sequence[str], ref: Sequence[str], stem: bool = False) -> RougeScore:
    if metric == "rouge-l":
        return rouge_l(hyp, ref, stem)
    if metric.startswith("rouge-") and metric[6:].isdigit():
        return rouge_n(hyp, ref, int(metric[6:]), stem)
    raise ValueError(f"unknown metric {metric!r}")


def limited_length_recall(hyp: Sequence[str], ref: Sequence[str], metric: str = "rouge-1", stem: bool = True) -> float:
    """Recall after truncating the hypothesis to the reference length."""
    return score(metric, list(hyp)[: len(ref)], ref, stem).recall


def reward(sequence: Sequence[str], reference: Sequence[str], metric: str = "rouge-l") -> float:
    """Sequence-level reward: F1 of ``metric`` without stemming."""
    return score(metric, sequence, reference, stem=False).f1


# ---------------------------------------------------------------------------
# corpus reports


def score_corpus(
    pairs: Iterable[tuple[Sequence[str], Sequence[str]]],
    metrics: Sequence[str] = METRICS,
    stem: bool = True,
    limited_length: bool = False,
) -> tuple[list[dict[str, RougeScore]], dict[str, RougeScore]]:
    """Per-example scores and their arithmetic means."""
    per: list[dict[str, RougeScore]] = []
    for hyp, ref in pairs:
        if limited_length:
            hyp = list(hyp)[: len(ref)]
        per.append({m: score(m, hyp, ref, stem) for m in metrics})
    means = {}
    for m in metrics:
        k = max(len(per), 1)
        means[m] = RougeScore(
            sum(s[m].precision for s in per) / k,
            sum(s[m].recall for s in per) / k,
            sum(s[m].f1 for s in per) / k,
        )
    return per, means


def report_lines(
    per: Sequence[dict[str, RougeScore]],
    means: dict[str, RougeScore],
    ids=None,
    empty: Iterable[int] = (),
) -> list[str]:
    """Structured report: one JSON object per example and metric, then the means.

    Examples listed in ``empty`` (empty hypotheses) carry ``"empty": true``.
    """
    empty = set(empty)
    lines = []
    for k, scores in enumerate(per):
        uid = ids[k] if ids is not None else k
        for m, s in scores.items():
            rec = {"id": uid, "metric": m, "p": s.precision, "r": s.recall, "f1": s.f1}
            if k in empty:
                rec["empty"] = True
            lines.append(json.dumps(rec))
    for m, s in means.items():
        lines.append(json.dumps({"id": "mean", "metric": m, "p": s.precision, "r": s.recall, "f1": s.f1, "n": len(per)}))
    return lines
