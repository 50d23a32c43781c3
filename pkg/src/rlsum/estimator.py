"""Scikit-learn style wrapper: ``fit`` on article/summary strings, ``predict`` summaries."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .rouge import rouge_l
from .textdata import EntityLexicon, build_vocab, encode_example, tokenize
from .training import TrainingConfig, build_model, train


def check_texts(X, name: str = "X") -> list[str]:
    """Validate a 1-d collection of non-empty strings."""
    if isinstance(X, str):
        raise TypeError(f"{name} must be a sequence of strings, not a single string")
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"{name} must be iterable") from None
    arr = np.asarray(items, dtype=object)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    for i, x in enumerate(items):
        if not isinstance(x, str):
            raise TypeError(f"{name}[{i}] is {type(x).__name__}, expected str")
        if not x.strip():
            raise ValueError(f"{name}[{i}] is empty")
    return items


def check_pairs(X, y) -> tuple[list[str], list[str]]:
    X = check_texts(X, "X")
    y = check_texts(y, "y")
    if len(X) != len(y):
        raise ValueError(f"X and y have different lengths ({len(X)} vs {len(y)})")
    if not X:
        raise ValueError("at least one training pair is required")
    return X, y


class Summarizer(BaseEstimator):
    """Abstractive summarizer trained with maximum likelihood, optionally followed by RL.

    ``objective`` of ``"rl"`` or ``"ml+rl"`` first trains ``ml_steps`` of
    maximum likelihood and then ``max_steps`` of the chosen objective from
    those parameters.
    """

    def __init__(
        self,
        objective: str = "ml",
        profile: str = "desk",
        input_vocab_size: int = 5000,
        output_vocab_size: int = 2000,
        max_steps: int = 1000,
        ml_steps: int = 1000,
        batch_size: int = 50,
        lr: float | None = None,
        gamma: float = 0.9984,
        sampling_prob: float = 0.25,
        beam_width: int = 5,
        max_input_len: int = 800,
        max_output_len: int = 100,
        intra_decoder: bool = True,
        seed: int = 0,
        lexicon: EntityLexicon | None = None,
    ):
        self.objective = objective
        self.profile = profile
        self.input_vocab_size = input_vocab_size
        self.output_vocab_size = output_vocab_size
        self.max_steps = max_steps
        self.ml_steps = ml_steps
        self.batch_size = batch_size
        self.lr = lr
        self.gamma = gamma
        self.sampling_prob = sampling_prob
        self.beam_width = beam_width
        self.max_input_len = max_input_len
        self.max_output_len = max_output_len
        self.intra_decoder = intra_decoder
        self.seed = seed
        self.lexicon = lexicon

    def _config(self, objective: str, steps: int) -> TrainingConfig:
        return TrainingConfig(
            objective=objective,
            gamma=self.gamma,
            lr=self.lr,
            batch_size=self.batch_size,
            sampling_prob=self.sampling_prob,
            max_steps=steps,
            seed=self.seed,
            profile=self.profile,
            intra_decoder=self.intra_decoder,
            beam_width=self.beam_width,
            max_output_len=self.max_output_len,
        )

    def fit(self, X: Iterable[str], y: Iterable[str]) -> "Summarizer":
        X, y = check_pairs(X, y)
        pairs = [(tokenize(a), tokenize(s)) for a, s in zip(X, y)]
        iv, ov = build_vocab(pairs, self.input_vocab_size, self.output_vocab_size)
        examples = [
            encode_example(a, s, iv, ov, self.lexicon, self.max_input_len, self.max_output_len)
            for a, s in pairs
        ]
        if self.objective == "ml":
            result = train(self._config("ml", self.max_steps), examples, iv, ov)
        else:
            warm = train(self._config("ml", self.ml_steps), examples, iv, ov)
            result = train(self._config(self.objective, self.max_steps), examples, iv, ov, init_params=warm.params)
        self.input_vocab_ = iv
        self.output_vocab_ = ov
        self.model_ = build_model(self._config("ml", 0), iv, ov, result.params)
        self.train_log_ = result.log
        return self

    def predict(self, X: Iterable[str]) -> list[str]:
        check_is_fitted(self, "model_")
        X = check_texts(X)
        return [" ".join(self.summarize_tokens(tokenize(x))) for x in X]

    def summarize_tokens(self, tokens: Sequence[str]) -> list[str]:
        check_is_fitted(self, "model_")
        return self.model_.summarize(list(tokens)[: self.max_input_len], self.beam_width, self.max_output_len)

    def score(self, X: Iterable[str], y: Iterable[str]) -> float:
        """Mean ROUGE-L F1 of the predicted summaries."""
        X, y = check_pairs(X, y)
        preds = self.predict(X)
        return float(np.mean([rouge_l(tokenize(p), tokenize(r), stem=True).f1 for p, r in zip(preds, y)]))
