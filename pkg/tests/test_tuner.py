"""Tuning loop: schedule, optimizers, snapshots, bounds, propagation."""

import numpy as np
import pytest

from roundfit import calib as C
from roundfit import model as M
from roundfit.errors import NumericsError
from roundfit.quant import QuantConfig, quantize_with_params
from roundfit.tuner import (AdamState, TuneConfig, adam_step, block_recon_loss,
                            lr_at, signsgd_step, tune_block, tune_linear,
                            tune_model)


class TestLrSchedule:
    def test_first_step(self):
        assert lr_at(0, 200, 5e-3) == 5e-3

    def test_midpoint(self):
        assert lr_at(100, 200, 5e-3) == pytest.approx(2.5e-3)

    def test_budget_matches_half_of_lr_times_steps(self):
        total = sum(lr_at(t, 200, 5e-3) for t in range(200))
        assert total == pytest.approx(0.5025, abs=1e-12)
        assert abs(total - 0.5) / 0.5 <= 0.01

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(200, 200, 5e-3)
        with pytest.raises(ValueError):
            lr_at(-1, 200, 5e-3)


class TestSignSgd:
    def test_moves_against_gradient_sign(self):
        out = signsgd_step(np.array([0.2]), np.array([-3.1]), 5e-3, (-0.5, 0.5))
        np.testing.assert_allclose(out, [0.205])

    def test_zero_gradient_no_move(self):
        out = signsgd_step(np.array([0.0]), np.array([0.0]), 5e-3, (-0.5, 0.5))
        np.testing.assert_array_equal(out, [0.0])

    def test_upper_clamp_binds(self):
        out = signsgd_step(np.array([1.0]), np.array([-0.2]), 5e-3, (1e-3, 1.0))
        np.testing.assert_array_equal(out, [1.0])

    def test_move_magnitude_is_exactly_lr(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(-0.3, 0.3, 50)
        g = rng.normal(size=50)
        out = signsgd_step(p, g, 3e-3, (-0.5, 0.5))
        moved = g != 0
        np.testing.assert_allclose(np.abs(out - p)[moved], 3e-3, atol=1e-12)


class TestAdam:
    def test_first_step_magnitude_is_about_lr(self):
        p, (out, state) = np.array([0.0]), adam_step(
            np.array([0.0]), np.array([2.0]), AdamState.zeros_like(np.array([0.0])),
            5e-3, (-0.5, 0.5))
        assert out[0] == pytest.approx(-5e-3, rel=1e-6)
        assert state.t == 1

    def test_zero_gradient_zero_state_no_move(self):
        out, _ = adam_step(np.array([0.1]), np.array([0.0]),
                           AdamState.zeros_like(np.array([0.1])), 5e-3, (-0.5, 0.5))
        np.testing.assert_array_equal(out, [0.1])

    def test_opposite_gradients_partially_cancel(self):
        p = np.array([0.0])
        state = AdamState.zeros_like(p)
        lr = 5e-3
        p1, state = adam_step(p, np.array([1.7]), state, lr, (-0.5, 0.5))
        p2, state = adam_step(p1, np.array([-1.7]), state, lr, (-0.5, 0.5))
        assert abs(p2[0] - p[0]) < 2 * lr
        assert abs(p2[0] - p[0]) < abs(p1[0] - p[0]) + lr  # second step partly reverses


def small_model(seed=7, n_layers=2):
    cfg = M.ModelConfig(vocab_size=64, d_model=16, n_heads=2, n_layers=n_layers,
                        d_ff=32, max_seq_len=16, seed=seed)
    return cfg, M.model_init(cfg)


def on_grid_block(cfg, bits=4, group=4, seed=0):
    """Block whose linears sit exactly on the quantization grid."""
    rng = np.random.default_rng(seed)
    d, ff = cfg.d_model, cfg.d_ff
    s, zp = np.float32(0.01), 5

    def grid(out_f, in_f):
        codes = rng.integers(0, 16, size=(out_f, in_f))
        g = in_f if group == -1 else group
        for j in range(0, in_f, g):
            hi = min(j + g, in_f)
            codes[:, j] = 0          # pin group min
            codes[:, hi - 1] = 15    # pin group max
        return (s * (codes - zp)).astype(np.float32)

    return M.BlockWeights(
        wq=grid(d, d), wk=grid(d, d), wv=grid(d, d), wo=grid(d, d),
        w_up=grid(ff, d), w_down=grid(d, ff),
        ln1_gamma=np.ones(d, dtype=np.float32), ln1_beta=np.zeros(d, dtype=np.float32),
        ln2_gamma=np.ones(d, dtype=np.float32), ln2_beta=np.zeros(d, dtype=np.float32))


@pytest.fixture(scope="module")
def fixture():
    cfg, m = small_model()
    cs = C.synth_tokens(11, seqlen=16, nsamples=32, vocab=cfg.vocab_size)
    cache = C.capture_block_inputs(m, cs, 0)
    return cfg, m, cache


class TestTuneBlock:
    def test_on_grid_block_has_zero_loss_at_step_zero(self, fixture):
        cfg, m, cache = fixture
        block = on_grid_block(cfg)
        qcfg = QuantConfig(4, 4)
        assert block_recon_loss(block, cache.inputs, cfg.n_heads, qcfg) == 0.0
        snap, hist = tune_block(block, cache, cfg.n_heads, qcfg,
                                TuneConfig(steps=3, batch_size=32, seed=0))
        assert hist[0] == 0.0
        assert snap.best_loss == 0.0
        assert snap.best_step == 0

    def test_full_batch_step_zero_equals_rtn_loss(self, fixture):
        cfg, m, cache = fixture
        qcfg = QuantConfig(2, 8)
        rtn_loss = block_recon_loss(m.blocks[0], cache.inputs, cfg.n_heads, qcfg)
        snap, hist = tune_block(m.blocks[0], cache, cfg.n_heads, qcfg,
                                TuneConfig(steps=5, batch_size=32, seed=0))
        assert hist[0] == rtn_loss  # bit-exact: same kernel, same inputs
        assert snap.best_loss <= rtn_loss

    def test_seeded_w2g8_fixture_beats_rtn(self, fixture):
        cfg, m, cache = fixture
        qcfg = QuantConfig(2, 8)
        tcfg = TuneConfig(steps=200, batch_size=32, seed=1)
        snap, hist = tune_block(m.blocks[0], cache, cfg.n_heads, qcfg, tcfg)
        assert snap.best_loss < hist[0]

    def test_best_snapshot_is_running_minimum(self, fixture):
        cfg, m, cache = fixture
        snap, hist = tune_block(m.blocks[0], cache, cfg.n_heads, QuantConfig(2, 8),
                                TuneConfig(steps=50, batch_size=8, seed=2))
        assert snap.best_loss == min(hist)
        assert hist[snap.best_step] == snap.best_loss

    def test_mode_rounding_leaves_clip_untouched(self, fixture):
        cfg, m, cache = fixture
        snap, _ = tune_block(m.blocks[0], cache, cfg.n_heads, QuantConfig(2, 8),
                             TuneConfig(steps=10, batch_size=32, mode="rounding", seed=0))
        for a in snap.best_alpha.values():
            np.testing.assert_array_equal(a, np.ones_like(a))
        for b in snap.best_beta.values():
            np.testing.assert_array_equal(b, np.ones_like(b))
        assert any(np.abs(v).max() > 0 for v in snap.best_V.values())

    def test_mode_clip_leaves_rounding_untouched(self, fixture):
        cfg, m, cache = fixture
        snap, _ = tune_block(m.blocks[0], cache, cfg.n_heads, QuantConfig(2, 8),
                             TuneConfig(steps=10, batch_size=32, mode="clip", seed=0))
        for v in snap.best_V.values():
            np.testing.assert_array_equal(v, np.zeros_like(v))
        assert any(a.min() < 1.0 for a in snap.best_alpha.values())

    def test_bounds_hold_even_with_huge_lr(self, fixture):
        cfg, m, cache = fixture
        snap, _ = tune_block(m.blocks[0], cache, cfg.n_heads, QuantConfig(2, 8),
                             TuneConfig(steps=8, lr0=0.7, batch_size=32, seed=0))
        for v in snap.best_V.values():
            assert v.min() >= -0.5 and v.max() <= 0.5
        for a in snap.best_alpha.values():
            assert a.min() >= 1e-3 and a.max() <= 1.0

    def test_nan_loss_aborts_with_step_number(self, fixture):
        cfg, m, cache = fixture
        poisoned = C.BlockInputCache(
            inputs=np.where(np.isfinite(cache.inputs), np.nan, 0.0).astype(np.float32),
            block_idx=0, quantized_prior=False)
        with pytest.raises(NumericsError, match="step 0"):
            tune_block(m.blocks[0], poisoned, cfg.n_heads, QuantConfig(2, 8),
                       TuneConfig(steps=3, batch_size=32, seed=0))

    def test_oversized_batch_rejected(self, fixture):
        cfg, m, cache = fixture
        with pytest.raises(ValueError):
            tune_block(m.blocks[0], cache, cfg.n_heads, QuantConfig(2, 8),
                       TuneConfig(steps=2, batch_size=64, seed=0))


class TestTuneLinear:
    def test_full_batch_monotone_vs_rtn(self):
        rng = np.random.default_rng(3)
        W = rng.normal(0, 0.5, (1, 8)).astype(np.float32)
        X = rng.normal(0, 1, (8, 16)).astype(np.float32)
        qcfg = QuantConfig(2, -1)
        snap, hist = tune_linear(W, X, qcfg,
                                 TuneConfig(steps=300, batch_size=16, mode="rounding", seed=3))
        assert snap.best_loss <= hist[0]


class TestTuneModel:
    def test_single_layer_reduces_to_one_block(self):
        cfg, m = small_model(n_layers=1)
        cs = C.synth_tokens(2, seqlen=8, nsamples=8, vocab=cfg.vocab_size)
        res = tune_model(m, cs, QuantConfig(4, 8), TuneConfig(steps=4, batch_size=8, seed=0))
        assert len(res.snapshots) == 1
        assert len(res.reports) == 1
        assert res.reports[0]["block"] == 0

    def test_fp_caches_when_quantized_input_disabled(self):
        cfg, m = small_model()
        cs = C.synth_tokens(2, seqlen=8, nsamples=8, vocab=cfg.vocab_size)
        tcfg = TuneConfig(steps=2, batch_size=8, quantized_input=False, seed=0)
        res = tune_model(m, cs, QuantConfig(2, 8), tcfg)
        plain = C.capture_block_inputs(m, cs, 1, quantized_prior=False)
        rtn_loss_on_fp_cache = block_recon_loss(m.blocks[1], plain.inputs,
                                                cfg.n_heads, QuantConfig(2, 8))
        assert res.rtn_losses[1] == rtn_loss_on_fp_cache

    def test_quantized_input_changes_downstream_cache(self):
        cfg, m = small_model()
        cs = C.synth_tokens(2, seqlen=8, nsamples=8, vocab=cfg.vocab_size)
        res_q = tune_model(m, cs, QuantConfig(2, 8),
                           TuneConfig(steps=2, batch_size=8, quantized_input=True, seed=0))
        res_f = tune_model(m, cs, QuantConfig(2, 8),
                           TuneConfig(steps=2, batch_size=8, quantized_input=False, seed=0))
        assert res_q.rtn_losses[0] == res_f.rtn_losses[0]  # block 0 has no priors
        assert res_q.rtn_losses[1] != res_f.rtn_losses[1]

    def test_same_seed_bit_identical_packed_output(self):
        cfg, m = small_model()
        cs = C.synth_tokens(2, seqlen=8, nsamples=8, vocab=cfg.vocab_size)
        tcfg = TuneConfig(steps=5, batch_size=8, seed=4)
        r1 = tune_model(m, cs, QuantConfig(3, 8), tcfg)
        r2 = tune_model(m, cs, QuantConfig(3, 8), tcfg)
        assert set(r1.model.packed) == set(r2.model.packed)
        for name in r1.model.packed:
            assert r1.model.packed[name].to_bytes() == r2.model.packed[name].to_bytes()

    def test_rtn_method_skips_tuning(self):
        cfg, m = small_model()
        cs = C.synth_tokens(2, seqlen=8, nsamples=8, vocab=cfg.vocab_size)
        res = tune_model(m, cs, QuantConfig(2, 8),
                         TuneConfig(steps=50, batch_size=8, seed=0), method="rtn")
        for row, final, rtn_l in zip(res.reports, res.final_losses, res.rtn_losses):
            assert row["best_loss"] == rtn_l
            assert row["best_step"] == 0
            assert final == rtn_l
        dq = quantize_with_params(m.blocks[0].wq, QuantConfig(2, 8), None, None, None)
        np.testing.assert_array_equal(res.model.blocks[0].wq, dq.w_hat)

    def test_report_schema(self):
        cfg, m = small_model(n_layers=1)
        cs = C.synth_tokens(2, seqlen=8, nsamples=8, vocab=cfg.vocab_size)
        res = tune_model(m, cs, QuantConfig(4, -1), TuneConfig(steps=2, batch_size=8, seed=0))
        row = res.reports[0]
        assert set(row) == {"block", "rtn_loss", "best_loss", "best_step",
                            "steps", "mode", "optimizer", "lr0"}
