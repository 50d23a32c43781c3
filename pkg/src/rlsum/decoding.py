"""Greedy, sampled and beam-search decoding.

Decoders are duck-typed: anything with ``tokens`` (candidate strings),
``start_index``, ``eos_index``, ``start()`` and ``step(state, prev_index) ->
(log_probs, new_state)`` works, which keeps the search code testable with
tiny hand-built tables.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .autodiff import NonFiniteError
from .pointer import LOG_PROB_FLOOR


@dataclass
class Hypothesis:
    indices: list[int] = field(default_factory=list)
    tokens: list[str] = field(default_factory=list)  # raw strings, EOS excluded
    logp: float = 0.0
    step_logps: list[float] = field(default_factory=list)
    state: Any = None
    finished: bool = False
    forced_eos: bool = False

    @property
    def last_index(self) -> int | None:
        return self.indices[-1] if self.indices else None

    def extend(self, index: int, token: str | None, logp: float, state, eos: bool) -> "Hypothesis":
        if self.finished:
            raise ValueError("cannot extend a finished hypothesis")
        return Hypothesis(
            indices=self.indices + [index],
            tokens=self.tokens if eos else self.tokens + [token],
            logp=self.logp + logp,
            step_logps=self.step_logps + [logp],
            state=state,
            finished=eos,
        )


def _prev(decoder, hyp: Hypothesis) -> int:
    return decoder.start_index if not hyp.indices else hyp.indices[-1]


def greedy_decode(decoder, max_len: int) -> Hypothesis:
    """Arg-max of the step distribution at every step; no repetition ban."""
    hyp = Hypothesis(state=decoder.start())
    for _ in range(max_len):
        lp, state = decoder.step(hyp.state, _prev(decoder, hyp))
        k = int(np.argmax(lp))
        hyp = hyp.extend(k, decoder.tokens[k], float(lp[k]), state, k == decoder.eos_index)
        if hyp.finished:
            break
    return hyp


def sample_decode(decoder, max_len: int, rng: np.random.Generator | int) -> Hypothesis:
    """Multinomial sample from the step distribution (temperature 1)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    hyp = Hypothesis(state=decoder.start())
    for _ in range(max_len):
        lp, state = decoder.step(hyp.state, _prev(decoder, hyp))
        p = np.exp(lp)
        total = p.sum()
        if not (np.isfinite(total) and total > 0):
            raise NonFiniteError("step distribution is not a finite probability vector")
        k = int(rng.choice(len(p), p=p / total))
        hyp = hyp.extend(k, decoder.tokens[k], float(lp[k]), state, k == decoder.eos_index)
        if hyp.finished:
            break
    return hyp


def trigram_allows(prefix: Sequence[str], candidate: str) -> bool:
    """False iff ``prefix + [candidate]`` would repeat a trigram already in ``prefix``."""
    if len(prefix) < 2:
        return True
    tri = (prefix[-2], prefix[-1], candidate)
    return all(tuple(prefix[i : i + 3]) != tri for i in range(len(prefix) - 2))


def _banned(prefix: Sequence[str]) -> set[str]:
    if len(prefix) < 3:
        return set()
    tail = (prefix[-2], prefix[-1])
    return {prefix[i + 2] for i in range(len(prefix) - 2) if (prefix[i], prefix[i + 1]) == tail}


def has_duplicate_trigram(tokens: Sequence[str]) -> bool:
    seen = set()
    for i in range(len(tokens) - 2):
        tri = tuple(tokens[i : i + 3])
        if tri in seen:
            return True
        seen.add(tri)
    return False


def beam_search(
    decoder,
    width: int,
    max_len: int,
    length_norm: bool = True,
    block_trigrams: bool = True,
) -> Hypothesis:
    """Beam search over step log-probabilities.

    Candidates that would repeat a trigram get probability zero.  Finished
    hypotheses keep their beam slot and compete with live ones; with
    ``length_norm`` every hypothesis is ranked by its mean per-token
    log-probability.  A hypothesis whose candidates are all banned is forced
    to emit EOS.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")

    def score(h: Hypothesis) -> float:
        if length_norm and h.indices:
            return h.logp / len(h.indices)
        return h.logp

    index = {tok: i for i, tok in enumerate(decoder.tokens)}
    eos = decoder.eos_index
    beam = [Hypothesis(state=decoder.start())]
    for _ in range(max_len):
        pool = [h for h in beam if h.finished]
        for h in beam:
            if h.finished:
                continue
            lp, state = decoder.step(h.state, _prev(decoder, h))
            lp = np.array(lp, dtype=np.float64)
            if block_trigrams:
                for tok in _banned(h.tokens):
                    k = index.get(tok)
                    if k is not None and k != eos:
                        lp[k] = -math.inf
            if not np.any(np.isfinite(lp)):
                forced = h.extend(eos, None, LOG_PROB_FLOOR, state, True)
                forced.forced_eos = True
                pool.append(forced)
                continue
            k_top = min(width, int(np.sum(np.isfinite(lp))))
            # stable ordering: highest log-prob first, then lowest index
            order = np.lexsort((np.arange(len(lp)), -lp))[:k_top]
            for k in order:
                k = int(k)
                pool.append(h.extend(k, decoder.tokens[k], float(lp[k]), state, k == eos))
        pool.sort(key=score, reverse=True)
        beam = pool[:width]
        if all(h.finished for h in beam):
            break
    return max(beam, key=score)
