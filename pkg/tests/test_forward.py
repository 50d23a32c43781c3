import numpy as np
import pytest

from rlsum.forward import SummaryModel, forced_path
from rlsum.model import ModelConfig, ModelParams
from rlsum.textdata import SOS_ID, UNK_ID, Vocab


def gold_inputs(model, ex):
    return [SOS_ID] + [model.input_vocab.id(t) for t in ex.target_tokens[:-1]]


class TestForcedVersusStreaming:
    def test_step_distributions_identical(self, small_model, small_data):
        for ex in small_data[3][:5]:
            out = forced_path(small_model.params.constants(), small_model.config, ex.input_ids, gold_inputs(small_model, ex))
            dec = small_model.decoder(ex.input_tokens, ex.input_ids)
            state, prev = dec.start(), dec.start_index
            for t, tok in enumerate(ex.target_tokens):
                dist, state = dec.step_distribution(state, prev)
                np.testing.assert_allclose(dist.alpha, out.alpha.value[t], atol=1e-13)
                np.testing.assert_allclose(dist.p_gen, np.exp(out.log_p_gen.value[t]), atol=1e-13)
                assert abs(dist.p_switch - out.switch.value[t]) < 1e-13
                prev = dec.vocab.index.get(tok, UNK_ID)

    def test_no_intra_decoder(self, small_data):
        _, iv, ov, examples = small_data
        cfg = ModelConfig(len(iv), len(ov), 6, 4, 8, intra_decoder=False)
        model = SummaryModel(ModelParams.initialize(cfg, seed=2), iv, ov)
        ex = examples[0]
        out = forced_path(model.params.constants(), cfg, ex.input_ids, gold_inputs(model, ex))
        dec = model.decoder(ex.input_tokens, ex.input_ids)
        dist, _ = dec.step_distribution(dec.start(), dec.start_index)
        np.testing.assert_allclose(dist.p_gen, np.exp(out.log_p_gen.value[0]), atol=1e-13)

    def test_normalization(self, small_model, small_data):
        ex = small_data[3][1]
        dec = small_model.decoder(ex.input_tokens, ex.input_ids)
        state, prev = dec.start(), dec.start_index
        for _ in range(6):
            lp, state = dec.step(state, prev)
            assert abs(np.exp(lp).sum() - 1.0) < 1e-12
            prev = int(np.argmax(lp))


class TestSummaryModel:
    def test_vocab_digest_checked(self, small_model, small_data):
        _, iv, ov, _ = small_data
        other = Vocab(iv.itos[:-1] + ["zzzz-other"])
        with pytest.raises(ValueError):
            SummaryModel(small_model.params, other, ov)

    def test_summarize_deterministic(self, small_model, small_data):
        ex = small_data[3][2]
        a = small_model.summarize(ex.input_tokens, beam_width=3, max_len=12)
        b = small_model.summarize(ex.input_tokens, beam_width=3, max_len=12)
        assert a == b and len(a) <= 12
        assert small_model.summarize(ex.input_tokens, beam_width=0, max_len=5) == small_model.summarize(
            ex.input_tokens, beam_width=0, max_len=5
        )
