import json
import random
from functools import lru_cache

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rlsum.rouge import (
    RougeScore,
    lcs_length,
    limited_length_recall,
    porter_stem,
    report_lines,
    reward,
    rouge_l,
    rouge_n,
    score,
    score_corpus,
)

nltk_porter = pytest.importorskip("nltk.stem.porter")

WORDS = """
caresses ponies ties caress cats feed agreed plastered bled motoring sing conflated troubled sized
hopping tanned falling hissing fizzed failing filing happy sky relational conditional rational
valenci hesitanci digitizer conformabli radicalli differentli vileli analogousli vietnamization
predication operator feudalism decisiveness hopefulness callousness formaliti sensitiviti
sensibiliti triplicate formative formalize electriciti electrical hopeful goodness revival
allowance inference airliner gyroscopic adjustable defensible irritant replacement adjustment
dependent adoption homologou communism activate angulariti homologous effective bowdlerize
probate rate cease controll roll generalizations oscillators running runner dying lying
summarization summaries summarized attention attentive temporal intra decoder encoder pointer
generation generated generating reinforcement learning learned abstractive extractive
""".split()


def oracle_ngram_matches(hyp, ref, n):
    pool = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
    matches = 0
    for i in range(len(hyp) - n + 1):
        g = tuple(hyp[i : i + n])
        if g in pool:
            pool.remove(g)
            matches += 1
    return matches


def oracle_lcs(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def oracle_f(match, nh, nr):
    if nh == 0 or nr == 0 or match == 0:
        return 0.0
    p, r = match / nh, match / nr
    return 2 * p * r / (p + r)


def random_pairs(count, seed=0, max_len=12, alphabet="abcde"):
    r = random.Random(seed)
    for _ in range(count):
        yield (
            [r.choice(alphabet) for _ in range(r.randint(0, max_len))],
            [r.choice(alphabet) for _ in range(r.randint(0, max_len))],
        )


class TestRougeN:
    def test_identity(self):
        s = rouge_n(["the", "cat"], ["the", "cat"], 1)
        assert (s.precision, s.recall, s.f1) == (1.0, 1.0, 1.0)

    def test_hand_counts(self):
        s = rouge_n(["the", "cat"], ["the", "cat", "sat"], 1)
        assert s.precision == 1.0 and s.recall == pytest.approx(2 / 3) and s.f1 == pytest.approx(0.8)

    def test_disjoint(self):
        assert rouge_n(["a"], ["b"], 1).f1 == 0.0

    def test_clipping(self):
        s = rouge_n(["the"] * 4, ["the", "cat"], 1)
        assert s.precision == 0.25 and s.recall == 0.5

    def test_empty(self):
        assert rouge_n([], ["a"], 1) == RougeScore(0.0, 0.0, 0.0)
        assert rouge_n(["a"], ["a"], 2) == RougeScore(0.0, 0.0, 0.0)

    @pytest.mark.parametrize("n", [1, 2])
    def test_matches_oracle(self, n):
        for hyp, ref in random_pairs(1000, seed=n):
            m = oracle_ngram_matches(hyp, ref, n)
            nh, nr = max(len(hyp) - n + 1, 0), max(len(ref) - n + 1, 0)
            s = rouge_n(hyp, ref, n)
            assert s.f1 == oracle_f(m, nh, nr)
            if nh and nr:
                assert s.precision == m / nh and s.recall == m / nr

    def test_bad_n(self):
        with pytest.raises(ValueError):
            rouge_n(["a"], ["a"], 0)


class TestRougeL:
    def test_worked_example(self):
        s = rouge_l("the cat on the mat".split(), "the cat sat on the mat".split())
        assert lcs_length("the cat on the mat".split(), "the cat sat on the mat".split()) == 5
        assert s.precision == 1.0 and s.recall == pytest.approx(5 / 6)
        assert s.f1 == pytest.approx(10 / 11, abs=1e-15)

    def test_identity(self):
        assert rouge_l(list("abc"), list("abc")).f1 == 1.0

    def test_reversed_distinct(self):
        assert lcs_length(list("abcdef"), list("fedcba")) == 1

    def test_matches_oracle(self):
        for hyp, ref in random_pairs(1000, seed=7):
            m = oracle_lcs(tuple(hyp), tuple(ref))
            assert lcs_length(hyp, ref) == m
            assert rouge_l(hyp, ref).f1 == oracle_f(m, len(hyp), len(ref))

    @given(st.lists(st.sampled_from("abc"), max_size=10), st.lists(st.sampled_from("abc"), max_size=10))
    def test_symmetric_lcs(self, a, b):
        assert lcs_length(a, b) == lcs_length(b, a)


class TestPorter:
    @pytest.mark.parametrize("word,stem", [("caresses", "caress"), ("cat", "cat"), ("ponies", "poni")])
    def test_examples(self, word, stem):
        assert porter_stem(word) == stem

    def test_matches_reference_implementation(self):
        ref = nltk_porter.PorterStemmer(mode=nltk_porter.PorterStemmer.ORIGINAL_ALGORITHM)
        for w in WORDS:
            assert porter_stem(w) == ref.stem(w), w

    def test_matches_reference_on_random_words(self):
        ref = nltk_porter.PorterStemmer(mode=nltk_porter.PorterStemmer.ORIGINAL_ALGORITHM)
        r = random.Random(3)
        suffixes = ["", "s", "es", "ies", "ed", "ing", "ational", "ness", "ful", "ement", "ize", "ly", "ous", "ate", "er", "al", "ion"]
        for _ in range(2000):
            stem = "".join(r.choice("bcdfglmnprstaeiouy") for _ in range(r.randint(1, 7)))
            w = stem + r.choice(suffixes)
            if len(w) <= 2:
                # the reference C stemmer leaves these alone; nltk's original mode does not
                continue
            assert porter_stem(w) == ref.stem(w), w

    def test_non_words_untouched(self):
        for w in ("0", "u.s.", "Cats", "is", "ls", "."):
            assert porter_stem(w) == w

    def test_stemming_changes_matches(self):
        assert rouge_n(["cats"], ["cat"], 1).f1 == 0.0
        assert rouge_n(["cats"], ["cat"], 1, stem=True).f1 == 1.0


class TestLimitedLength:
    def test_extra_tokens(self):
        assert limited_length_recall(list("abcxyz"), list("abc"), stem=False) == 1.0

    def test_shorter_unchanged(self):
        assert limited_length_recall(list("ab"), list("abcd"), stem=False) == rouge_n(list("ab"), list("abcd")).recall

    def test_composition(self):
        for hyp, ref in random_pairs(300, seed=11):
            for metric in ("rouge-1", "rouge-2", "rouge-l"):
                assert limited_length_recall(hyp, ref, metric, stem=False) == score(metric, hyp[: len(ref)], ref).recall


class TestReward:
    def test_identity_and_disjoint(self):
        assert reward(list("abc"), list("abc")) == 1.0
        assert reward(list("abc"), list("xyz")) == 0.0

    def test_equals_rouge_l(self):
        for hyp, ref in random_pairs(200, seed=5):
            assert reward(hyp, ref) == rouge_l(hyp, ref).f1

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            score("bleu", [], [])


class TestCorpus:
    def test_self_scores_one(self):
        refs = [list("abc"), list("defg")]
        per, means = score_corpus(zip(refs, refs))
        assert all(s.f1 == 1.0 for row in per for s in row.values())
        assert means["rouge-l"].f1 == 1.0

    def test_mean_is_arithmetic(self):
        pairs = list(random_pairs(20, seed=2))
        per, means = score_corpus(pairs, stem=False)
        for m in means:
            assert means[m].f1 == pytest.approx(sum(r[m].f1 for r in per) / len(per), abs=1e-15)

    def test_report_flags_empty(self):
        per, means = score_corpus([([], list("ab")), (list("ab"), list("ab"))], stem=False)
        lines = [json.loads(x) for x in report_lines(per, means, ids=["x", "y"], empty=[0])]
        assert all(rec.get("empty") for rec in lines if rec["id"] == "x")
        assert not any(rec.get("empty") for rec in lines if rec["id"] == "y")
        assert {rec["f1"] for rec in lines if rec["id"] == "x"} == {0.0}
        assert lines[-1]["id"] == "mean" and lines[-1]["n"] == 2
