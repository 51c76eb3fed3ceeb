"""Calibration data: token files, Markov synthesis, capture, batching."""

import numpy as np
import pytest

from roundfit import calib as C
from roundfit import model as M
from roundfit.errors import DataError, FormatError, StateError
from roundfit.quant import QuantConfig
from roundfit.tuner import TuneConfig, tune_model


def write_tokens(path, ids):
    path.write_text("\n".join(str(i) for i in ids) + "\n")


class TestLoadTokens:
    def test_greedy_chunking(self, tmp_path):
        p = tmp_path / "toks.txt"
        write_tokens(p, [i % 50 for i in range(4096)])
        cs = C.load_tokens(p, seqlen=512, nsamples=8, vocab=64)
        assert cs.sequences.shape == (8, 512)
        assert cs.nsamples == 8 and cs.seqlen == 512

    def test_out_of_vocab_id(self, tmp_path):
        p = tmp_path / "toks.txt"
        write_tokens(p, [1, 2, 99])
        with pytest.raises(DataError, match="99"):
            C.load_tokens(p, seqlen=2, nsamples=1, vocab=64)

    def test_insufficient_tokens(self, tmp_path):
        p = tmp_path / "toks.txt"
        write_tokens(p, range(100))
        with pytest.raises(DataError, match="need"):
            C.load_tokens(p, seqlen=512, nsamples=1, vocab=512)

    def test_non_integer_line_reports_lineno(self, tmp_path):
        p = tmp_path / "toks.txt"
        p.write_text("1\n2\nnotanint\n4\n")
        with pytest.raises(FormatError, match=":3"):
            C.load_tokens(p, seqlen=2, nsamples=1, vocab=64)


class TestSynthTokens:
    def test_deterministic(self):
        a = C.synth_tokens(5, seqlen=16, nsamples=4, vocab=32)
        b = C.synth_tokens(5, seqlen=16, nsamples=4, vocab=32)
        np.testing.assert_array_equal(a.sequences, b.sequences)

    def test_seed_changes_sequences(self):
        a = C.synth_tokens(5, seqlen=16, nsamples=4, vocab=32)
        b = C.synth_tokens(6, seqlen=16, nsamples=4, vocab=32)
        assert not np.array_equal(a.sequences, b.sequences)

    def test_vocab_floor(self):
        with pytest.raises(ValueError):
            C.synth_tokens(0, seqlen=4, nsamples=1, vocab=1)

    def test_bigram_distribution_matches_table(self):
        # chi-square over observed transitions; critical value frozen from
        # chi2.ppf(1 - 1e-6, 240) = 358.88 (df here is at most 16*15 = 240)
        vocab, n = 16, 100_000
        stream = C.markov_stream(42, n, vocab)
        table = C.bigram_table(42, vocab)
        counts = np.zeros((vocab, vocab))
        np.add.at(counts, (stream[:-1], stream[1:]), 1)
        expected = counts.sum(axis=1, keepdims=True) * table
        mask = expected >= 5
        stat = (((counts - expected) ** 2 / expected)[mask]).sum()
        df = int(mask.sum()) - vocab
        assert df <= 240
        assert stat < 358.89

    def test_rows_are_stochastic(self):
        table = C.bigram_table(0, 32)
        np.testing.assert_allclose(table.sum(axis=1), np.ones(32), atol=1e-12)
        assert (table > 0).all()


class TestCapture:
    @pytest.fixture
    def setup(self):
        cfg = M.ModelConfig(vocab_size=32, d_model=8, n_heads=2, n_layers=2,
                            d_ff=16, max_seq_len=12, seed=7)
        m = M.model_init(cfg)
        cs = C.synth_tokens(3, seqlen=8, nsamples=6, vocab=cfg.vocab_size)
        return cfg, m, cs

    def test_block_zero_is_embedding_output(self, setup):
        cfg, m, cs = setup
        cache = C.capture_block_inputs(m, cs, 0)
        np.testing.assert_array_equal(cache.inputs, M.embed(m, cs.sequences))
        cache_q = C.capture_block_inputs(m, cs, 0, quantized_prior=True,
                                         prior_quantized_blocks={})
        np.testing.assert_array_equal(cache_q.inputs, cache.inputs)

    def test_full_precision_capture_matches_forward_chain(self, setup):
        cfg, m, cs = setup
        x = M.embed(m, cs.sequences)
        from roundfit.autodiff import Tensor
        x = M.block_forward(m.blocks[0], Tensor(x), cfg.n_heads).data
        cache = C.capture_block_inputs(m, cs, 1, quantized_prior=False)
        np.testing.assert_array_equal(cache.inputs, x)

    def test_quantized_prior_differs_once_qdq_error_nonzero(self, setup):
        cfg, m, cs = setup
        res = tune_model(m, cs, QuantConfig(2, 4),
                         TuneConfig(steps=1, batch_size=6, seed=0), method="rtn")
        qblocks = {0: res.model.blocks[0]}
        plain = C.capture_block_inputs(m, cs, 1, quantized_prior=False)
        quant = C.capture_block_inputs(m, cs, 1, quantized_prior=True,
                                       prior_quantized_blocks=qblocks)
        assert not np.array_equal(plain.inputs, quant.inputs)

    def test_missing_prior_blocks_is_state_error(self, setup):
        cfg, m, cs = setup
        with pytest.raises(StateError, match=r"\[0\]"):
            C.capture_block_inputs(m, cs, 1, quantized_prior=True,
                                   prior_quantized_blocks={})

    def test_block_index_range(self, setup):
        cfg, m, cs = setup
        with pytest.raises(ValueError):
            C.capture_block_inputs(m, cs, 2)

    def test_capture_is_read_only(self, setup):
        cfg, m, cs = setup
        before = m.blocks[0].wq.copy()
        C.capture_block_inputs(m, cs, 1)
        np.testing.assert_array_equal(m.blocks[0].wq, before)


class TestDrawBatch:
    def _cache(self, n=10):
        return C.BlockInputCache(
            inputs=np.arange(n * 2 * 3, dtype=np.float32).reshape(n, 2, 3),
            block_idx=0, quantized_prior=False)

    def test_full_batch_is_identity_every_step(self):
        cache = self._cache()
        for step in (0, 1, 7):
            x, idx = C.draw_batch(cache, 10, step, seed=3)
            np.testing.assert_array_equal(idx, np.arange(10))
            np.testing.assert_array_equal(x, cache.inputs)

    def test_same_seed_step_is_deterministic(self):
        cache = self._cache()
        _, i1 = C.draw_batch(cache, 4, 5, seed=3)
        _, i2 = C.draw_batch(cache, 4, 5, seed=3)
        np.testing.assert_array_equal(i1, i2)

    def test_steps_differ(self):
        cache = self._cache(100)
        _, i1 = C.draw_batch(cache, 10, 0, seed=3)
        _, i2 = C.draw_batch(cache, 10, 1, seed=3)
        assert not np.array_equal(i1, i2)

    def test_indices_distinct_within_step(self):
        cache = self._cache(20)
        for step in range(5):
            _, idx = C.draw_batch(cache, 15, step, seed=9)
            assert len(set(idx.tolist())) == 15

    def test_oversized_batch_rejected(self):
        with pytest.raises(ValueError):
            C.draw_batch(self._cache(4), 5, 0, seed=0)
