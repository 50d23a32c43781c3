import sys
import numpy as np
import pytest

from rlsum.forward import SummaryModel
from rlsum.model import ModelConfig, ModelParams
from rlsum.textdata import SyntheticConfig, build_vocab, encode_example, generate_synthetic_corpus, tokenize


def make_dataset(n_docs=32, seed=0, input_limit=200, output_limit=60, **synth):
    corpus = generate_synthetic_corpus(SyntheticConfig(n_docs=n_docs, **synth), seed=seed)
    pairs = [(tokenize(d["article"]), tokenize(d["summary"])) for d in corpus.docs]
    iv, ov = build_vocab(pairs, input_limit, output_limit)
    examples = [
        encode_example(a, s, iv, ov, corpus.lexicon, date=d["date"], uid=d["uid"])
        for d, (a, s) in zip(corpus.docs, pairs)
    ]
    return corpus, iv, ov, examples


@pytest.fixture(scope="session")
def small_data():
    return make_dataset(n_docs=24, seed=5)


@pytest.fixture
def small_model(small_data):
    _, iv, ov, _ = small_data
    cfg = ModelConfig(len(iv), len(ov), d_emb=8, d_enc=6, d_dec=12)
    return SummaryModel(ModelParams.initialize(cfg, seed=1, scale=0.3, vocab_digest=iv.digest()), iv, ov)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")
