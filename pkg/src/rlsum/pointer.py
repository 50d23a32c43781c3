"""Token generation, copying, the copy switch and their mixture."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)


@dataclass
class ClampStats:
    """Counts log-probabilities that hit the ``1e-12`` floor."""

    count: int = 0


class ExtendedVocab:
    """Output vocabulary plus the article's tokens that fall outside it.

    Index ``k < V_out`` is an output-vocabulary id; larger indices name raw
    article tokens in order of first appearance.  ``copy_index[i]`` is the
    extended index of article position ``i``.
    """

    def __init__(self, output_itos: Sequence[str], input_tokens: Sequence[str], input_stoi: dict[str, int]):
        self.v_out = len(output_itos)
        out_index = {tok: i for i, tok in enumerate(output_itos)}
        self.tokens: list[str] = list(output_itos)
        index = dict(out_index)
        copy_index = []
        for tok in input_tokens:
            k = index.get(tok)
            if k is None:
                k = index[tok] = len(self.tokens)
                self.tokens.append(tok)
            copy_index.append(k)
        self.index = index
        self.copy_index = np.asarray(copy_index, dtype=np.int64)
        unk = 1
        self.embed_ids = np.asarray(
            [i if i < self.v_out else input_stoi.get(t, unk) for i, t in enumerate(self.tokens)],
            dtype=np.int64,
        )

    def __len__(self) -> int:
        return len(self.tokens)


def generation_distribution(features: np.ndarray, W_out: np.ndarray, b_out: np.ndarray) -> np.ndarray:
    """Softmax over the output vocabulary of ``W_out [h ∥ c^e ∥ c^d] + b_out``."""
    z = W_out @ features + b_out
    z = np.exp(z - z.max())
    return z / z.sum()


def copy_distribution(alpha: np.ndarray, input_tokens: Sequence[str]) -> dict[str, float]:
    """Copy probability per distinct article token; repeated tokens sum their weights."""
    out: dict[str, float] = {}
    for a, tok in zip(alpha, input_tokens):
        out[tok] = out.get(tok, 0.0) + float(a)
    return out


def switch_probability(features: np.ndarray, W_u: np.ndarray, b_u) -> float:
    """``p(u_t = 1) = σ(W_u · [h ∥ c^e ∥ c^d] + b_u)``."""
    z = float(W_u @ features + b_u)
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@dataclass
class StepDistribution:
    p_gen: np.ndarray  # over the output vocabulary
    alpha: np.ndarray  # copy weights over article positions
    p_switch: float  # p(u_t = 1)
    vocab: ExtendedVocab = field(repr=False)

    def p_copy(self) -> np.ndarray:
        """Copy distribution over the extended vocabulary."""
        out = np.zeros(len(self.vocab))
        np.add.at(out, self.vocab.copy_index, self.alpha)
        return out

    def extended(self) -> np.ndarray:
        """Full mixture over the extended vocabulary."""
        out = self.p_switch * self.p_copy()
        out[: self.vocab.v_out] += (1.0 - self.p_switch) * self.p_gen
        return out


def mixture(dist: StepDistribution, token: str) -> float:
    """Probability of emitting ``token``, combining both branches."""
    k = dist.vocab.index.get(token)
    if k is None:
        return 0.0
    p = dist.p_switch * float(dist.alpha[dist.vocab.copy_index == k].sum())
    if k < dist.vocab.v_out:
        p += (1.0 - dist.p_switch) * float(dist.p_gen[k])
    return p


def _floor(logp: float, stats: ClampStats | None) -> float:
    if logp < LOG_PROB_FLOOR or not math.isfinite(logp):
        if stats is not None:
            stats.count += 1
        return LOG_PROB_FLOOR
    return logp


def step_likelihood(
    dist: StepDistribution,
    target_id: int,
    flag: int,
    position: int,
    stats: ClampStats | None = None,
) -> float:
    """Log-likelihood of one supervised step.

    Pointer steps score the switch and the labeled article position; other
    steps score the complementary switch and the generated token.
    """
    if flag:
        p = dist.p_switch * float(dist.alpha[position])
    else:
        p = (1.0 - dist.p_switch) * float(dist.p_gen[target_id])
    return _floor(math.log(p) if p > 0 else -math.inf, stats)


# ---------------------------------------------------------------------------
# whole-path forms on the tape


def _floored(ll: Tensor, stats: ClampStats | None) -> Tensor:
    hit = int(np.sum(ll.value < LOG_PROB_FLOOR))
    if stats is not None:
        stats.count += hit
    return ad.clamp_min(ll, LOG_PROB_FLOOR)


def supervised_log_likelihood(
    log_alpha: Tensor,
    log_p_gen: Tensor,
    log_switch: Tensor,
    log_no_switch: Tensor,
    target_ids: Sequence[int],
    flags: Sequence[int],
    positions: Sequence[int],
    stats: ClampStats | None = None,
) -> Tensor:
    """Per-step supervised log-likelihoods along a decoder path, shape (T,)."""
    T = len(target_ids)
    steps = np.arange(T)
    u = np.asarray(flags, dtype=np.float64)
    pos = np.where(u > 0, np.asarray(positions), 0)
    ids = np.asarray(target_ids, dtype=np.int64)
    copy_ll = log_switch + log_alpha[(steps, pos)]
    gen_ll = log_no_switch + log_p_gen[(steps, ids)]
    ll = copy_ll * u + gen_ll * (1.0 - u)
    return _floored(ll, stats)


def marginal_log_likelihood(
    alpha: Tensor,
    log_p_gen: Tensor,
    switch: Tensor,
    gen_ids: np.ndarray,
    gen_mask: np.ndarray,
    copy_match: np.ndarray,
    stats: ClampStats | None = None,
) -> Tensor:
    """Per-step log of the full mixture probability of the emitted tokens.

    ``gen_ids[t]``/``gen_mask[t]`` give the output-vocabulary id of token
    ``t`` and whether it has one; ``copy_match[t, i]`` marks article
    positions holding that token.
    """
    T = len(gen_ids)
    steps = np.arange(T)
    p_gen = ad.exp(log_p_gen[(steps, np.asarray(gen_ids, dtype=np.int64))]) * np.asarray(gen_mask, dtype=np.float64)
    p_copy = ad.tsum(alpha * np.asarray(copy_match, dtype=np.float64), axis=1)
    p = switch * p_copy + (1.0 - switch) * p_gen
    hit = int(np.sum(p.value < PROB_FLOOR))
    if stats is not None:
        stats.count += hit
    return ad.log(ad.clamp_min(p, PROB_FLOOR))
