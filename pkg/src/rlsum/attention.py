"""Intra-temporal encoder attention and intra-decoder attention.

Two forms of the same maths live here.  The streaming functions work on plain
arrays one decoding step at a time and carry explicit histories (used by the
decoders); :func:`temporal_attention` and :func:`intra_decoder_attention`
process a whole known decoder path at once on the autodiff tape (used for
training).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class TemporalHistory:
    """Per-position log-sum-exp of the raw scores of all earlier steps."""

    lse: np.ndarray | None
    step: int = 1  # the step about to be scored

    @classmethod
    def empty(cls) -> "TemporalHistory":
        return cls(None, 1)


@dataclass(frozen=True)
class DecoderHistory:
    """Decoder hidden states h^d_1 .. h^d_{t-1}, append-only."""

    states: tuple[np.ndarray, ...] = ()

    def append(self, h: np.ndarray) -> "DecoderHistory":
        return DecoderHistory(self.states + (h,))

    def __len__(self) -> int:
        return len(self.states)


def encoder_scores(h_dec: np.ndarray, enc_states: np.ndarray, W_attn: np.ndarray) -> np.ndarray:
    """Bilinear scores ``h_decᵀ W h^e_i`` for every input position."""
    return enc_states @ (W_attn.T @ h_dec)


def temporal_normalize(scores: np.ndarray, history: TemporalHistory, log: bool = False):
    """Divide exponentiated scores by the sum of earlier exponentiated scores.

    Returns ``(e', new_history)``, or ``(log e', new_history)`` when ``log``
    is set.  At the first step the scores are only exponentiated.
    """
    if history.lse is None:
        log_e = scores.copy()
        lse = scores.copy()
    else:
        log_e = scores - history.lse
        lse = np.logaddexp(history.lse, scores)
    new = TemporalHistory(lse, history.step + 1)
    return (log_e if log else np.exp(log_e)), new


def encoder_context(temporal_scores: np.ndarray, enc_states: np.ndarray, log: bool = False):
    """Normalize temporal scores over positions and build the input context.

    With ``log`` set the first argument holds ``log e'`` and the
    normalization is done in log space.
    """
    if log:
        z = temporal_scores - np.max(temporal_scores)
        w = np.exp(z)
    else:
        w = np.asarray(temporal_scores, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise ValueError("temporal scores sum to zero; cannot normalize attention")
    alpha = w / total
    return alpha, alpha @ enc_states


def decoder_context(h_dec: np.ndarray, history: DecoderHistory, W_attn: np.ndarray):
    """Attention over earlier decoder states.

    Returns ``(alpha, context)``; at the first step ``alpha`` is empty and the
    context is the zero vector.
    """
    if len(history) == 0:
        return np.zeros(0), np.zeros_like(h_dec)
    past = np.stack(history.states)
    s = past @ (W_attn.T @ h_dec)
    s = np.exp(s - s.max())
    alpha = s / s.sum()
    return alpha, alpha @ past


# ---------------------------------------------------------------------------
# whole-path forms on the tape


def temporal_attention(dec_states: Tensor, enc_states: Tensor, W_attn: Tensor) -> Tensor:
    """Log attention weights ``log α^e`` for every step of a decoder path, (T, n)."""
    scores = ad.bilinear(dec_states, W_attn, enc_states)
    log_temporal = scores - ad.temporal_log_normalizer(scores)
    return ad.log_softmax(log_temporal, axis=1)


def intra_decoder_attention(dec_states: Tensor, W_attn: Tensor) -> Tensor:
    """Intra-decoder attention weights ``α^d`` for every step, (T, T).

    Row ``t`` attends over the strictly earlier states; the first row is all
    zeros so the first context vector is zero.
    """
    T = dec_states.shape[0]
    scores = ad.bilinear(dec_states, W_attn, dec_states)
    mask = np.tril(np.ones((T, T), dtype=bool), k=-1)
    return ad.masked_softmax(scores, mask)
