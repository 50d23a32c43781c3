"""Network forward passes.

:func:`forced_path` evaluates the whole network along a known decoder input
sequence on the autodiff tape.  :class:`StreamingDecoder` evaluates it one
step at a time on plain arrays for greedy, sampled and beam decoding.  The
decoder LSTM reads only the previous token's embedding, so given the same
inputs both produce the same step distributions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .attention import (
    DecoderHistory,
    TemporalHistory,
    decoder_context,
    encoder_context,
    encoder_scores,
    intra_decoder_attention,
    temporal_attention,
    temporal_normalize,
)
from .autodiff import Tensor
from .decoding import beam_search, greedy_decode
from .model import ModelConfig, ModelParams, embed, encode, lstm_cell, shared_output_matrix
from .pointer import ExtendedVocab, StepDistribution, generation_distribution, switch_probability
from .textdata import EOS_ID, SOS_ID


class PathOutputs(NamedTuple):
    log_alpha: Tensor  # (T, n)
    alpha: Tensor
    log_p_gen: Tensor  # (T, V_out)
    switch: Tensor  # (T,) p(u_t = 1)
    log_switch: Tensor
    log_no_switch: Tensor
    dec_states: Tensor  # (T, d_dec)
    enc_final: Tensor


def forced_path(
    p: dict[str, Tensor],
    config: ModelConfig,
    input_ids: Sequence[int],
    decoder_inputs: Sequence[int],
) -> PathOutputs:
    """Step distributions for every position of a fixed decoder input sequence.

    ``decoder_inputs[t]`` is the embedding id fed at step ``t`` (``SOS``
    first).
    """
    enc = encode(input_ids, p)
    Hd_dim = config.d_dec
    emb = embed(np.asarray(decoder_inputs, dtype=np.int64), p["W_emb"])
    xproj = ad.matmul(emb, p["dec_Wx"].T) + p["dec_b"]
    seq = ad.lstm_sequence(xproj, enc.final, ad.tensor(np.zeros(Hd_dim)), p["dec_Wh"])
    Hd = seq[:, :Hd_dim]
    log_alpha = temporal_attention(Hd, enc.states, p["W_e_attn"])
    alpha = ad.exp(log_alpha)
    parts = [Hd, ad.matmul(alpha, enc.states)]
    if config.intra_decoder:
        parts.append(ad.matmul(intra_decoder_attention(Hd, p["W_d_attn"]), Hd))
    feats = ad.concat(parts, axis=1)
    W_out = shared_output_matrix(p["W_emb"][: config.vocab_out], p["W_proj"])
    log_p_gen = ad.log_softmax(ad.matmul(feats, W_out.T) + p["b_out"], axis=1)
    z = ad.matmul(feats, p["W_u"]) + p["b_u"]
    return PathOutputs(
        log_alpha=log_alpha,
        alpha=alpha,
        log_p_gen=log_p_gen,
        switch=ad.sigmoid(z),
        log_switch=ad.log_sigmoid(z),
        log_no_switch=ad.log_sigmoid(-z),
        dec_states=Hd,
        enc_final=enc.final,
    )


@dataclass(frozen=True)
class DecodeState:
    h: np.ndarray
    c: np.ndarray
    temporal: TemporalHistory
    history: DecoderHistory

    @property
    def step(self) -> int:
        return self.temporal.step


class StreamingDecoder:
    """Step-at-a-time decoder for one article.

    Candidate indices are positions in :attr:`tokens` (the extended
    vocabulary); ``step`` returns log-probabilities over them.
    """

    start_index = SOS_ID
    eos_index = EOS_ID

    def __init__(
        self,
        params: ModelParams,
        input_tokens: Sequence[str],
        input_ids: Sequence[int],
        input_stoi: dict[str, int],
        output_itos: Sequence[str],
    ):
        self.params = params
        self.config = params.config
        self.vocab = ExtendedVocab(output_itos, input_tokens, input_stoi)
        self.tokens = self.vocab.tokens
        self.input_tokens = list(input_tokens)
        enc = encode(input_ids, params.constants())
        self.enc_states = enc.states.value
        self.h0 = enc.final.value.copy()
        a = params.arrays
        self.W_out = np.tanh(a["W_emb"][: self.config.vocab_out] @ a["W_proj"])

    def start(self) -> DecodeState:
        return DecodeState(self.h0, np.zeros(self.config.d_dec), TemporalHistory.empty(), DecoderHistory())

    def step_distribution(self, state: DecodeState, prev_index: int) -> tuple[StepDistribution, DecodeState]:
        a = self.params.arrays
        x = a["W_emb"][self.vocab.embed_ids[prev_index]]
        h, c = lstm_cell(x, state.h, state.c, a["dec_Wx"], a["dec_Wh"], a["dec_b"])
        scores = encoder_scores(h, self.enc_states, a["W_e_attn"])
        log_e, temporal = temporal_normalize(scores, state.temporal, log=True)
        alpha, ctx_e = encoder_context(log_e, self.enc_states, log=True)
        parts = [h, ctx_e]
        if self.config.intra_decoder:
            _, ctx_d = decoder_context(h, state.history, a["W_d_attn"])
            parts.append(ctx_d)
        feats = np.concatenate(parts)
        dist = StepDistribution(
            p_gen=generation_distribution(feats, self.W_out, a["b_out"]),
            alpha=alpha,
            p_switch=switch_probability(feats, a["W_u"], a["b_u"]),
            vocab=self.vocab,
        )
        return dist, DecodeState(h, c, temporal, state.history.append(h))

    def step(self, state: DecodeState, prev_index: int) -> tuple[np.ndarray, DecodeState]:
        dist, new = self.step_distribution(state, prev_index)
        with np.errstate(divide="ignore"):
            return np.log(dist.extended()), new


class SummaryModel:
    """Parameters bundled with the vocabularies they were trained against."""

    def __init__(self, params: ModelParams, input_vocab, output_vocab):
        if params.config.vocab_in != len(input_vocab) or params.config.vocab_out != len(output_vocab):
            raise ValueError("parameter shapes do not match the vocabularies")
        if params.vocab_digest and params.vocab_digest != input_vocab.digest():
            raise ValueError("checkpoint was trained with a different vocabulary")
        self.params = params
        self.input_vocab = input_vocab
        self.output_vocab = output_vocab

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    def decoder(self, input_tokens: Sequence[str], input_ids: Sequence[int] | None = None) -> StreamingDecoder:
        if input_ids is None:
            input_ids = self.input_vocab.encode(input_tokens)
        return StreamingDecoder(self.params, input_tokens, input_ids, self.input_vocab.stoi, self.output_vocab.itos)

    def summarize(self, input_tokens: Sequence[str], beam_width: int = 5, max_len: int = 100) -> list[str]:
        dec = self.decoder(input_tokens)
        hyp = greedy_decode(dec, max_len) if beam_width <= 0 else beam_search(dec, beam_width, max_len)
        return hyp.tokens
