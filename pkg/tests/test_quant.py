"""Group-wise asymmetric quantization: scales, zero points, qdq, RTN."""

import numpy as np
import pytest

from roundfit import autodiff as ad
from roundfit.autodiff import Tensor
from roundfit.errors import ShapeError
from roundfit.quant import (QuantConfig, SCALE_FLOOR, TunedParams,
                            compute_scale_zp, group_view, qdq,
                            quantize_with_params, rtn)


def f32(x):
    return np.asarray(x, dtype=np.float32)


class TestQuantConfig:
    @pytest.mark.parametrize("bits", [2, 3, 4, 8])
    def test_valid_bits(self, bits):
        assert QuantConfig(bits).qmax == 2**bits - 1

    @pytest.mark.parametrize("bits", [1, 5, 16])
    def test_invalid_bits(self, bits):
        with pytest.raises(ValueError):
            QuantConfig(bits)

    def test_invalid_group_size(self):
        with pytest.raises(ValueError):
            QuantConfig(4, 0)

    def test_symmetric_rejected(self):
        with pytest.raises(ValueError):
            QuantConfig(4, -1, mode="symmetric")


class TestGroupView:
    def test_even_grouping(self):
        groups = group_view(np.zeros((4, 8), dtype=np.float32), QuantConfig(4, 4))
        assert len(groups) == 8
        assert all(g.values.size == 4 for g in groups)

    def test_per_channel(self):
        groups = group_view(np.zeros((4, 8), dtype=np.float32), QuantConfig(4, -1))
        assert len(groups) == 4
        assert all(g.values.size == 8 for g in groups)

    def test_ragged_final_group(self):
        groups = group_view(np.zeros((4, 10), dtype=np.float32), QuantConfig(4, 4))
        per_row = [g.values.size for g in groups if g.row == 0]
        assert per_row == [4, 4, 2]
        assert len(groups) == 12

    def test_rejects_non_2d(self):
        with pytest.raises(ShapeError):
            group_view(np.zeros(8, dtype=np.float32), QuantConfig(4, 4))


class TestScaleZp:
    def test_alpha_beta_one(self):
        gp = compute_scale_zp(f32([-1.0, 0.5]), QuantConfig(4))
        assert gp.s == pytest.approx(0.1, rel=1e-6)
        assert gp.zp == 10

    def test_alpha_half(self):
        gp = compute_scale_zp(f32([-1.0, 0.5]), QuantConfig(4), alpha=0.5, beta=1.0)
        assert gp.s == pytest.approx(1.25 / 15, rel=1e-6)
        assert gp.zp == 12

    def test_all_zero_group(self):
        gp = compute_scale_zp(f32([0.0, 0.0, 0.0]), QuantConfig(4))
        assert gp.s == pytest.approx(SCALE_FLOOR)
        assert gp.zp == 0

    def test_empty_group_rejected(self):
        with pytest.raises(ValueError):
            compute_scale_zp(f32([]), QuantConfig(4))

    def test_shrinking_alpha_never_grows_scale_on_mixed_sign_groups(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            vals = rng.normal(0, 1, 8).astype(np.float32)
            if vals.max() < 0 or vals.min() > 0:
                continue  # property asserted only when max >= 0 >= min
            cfg = QuantConfig(4)
            s_prev = compute_scale_zp(vals, cfg, alpha=1.0, beta=1.0).s
            for alpha in (0.8, 0.5, 0.2):
                s = compute_scale_zp(vals, cfg, alpha=alpha, beta=1.0).s
                assert s <= s_prev + 1e-12
                s_prev = s


class TestQdq:
    def test_hand_example(self):
        W = f32([[-1.0, -0.47, 0.5]])
        res = rtn(W, QuantConfig(4))
        np.testing.assert_array_equal(res.codes, [[0, 5, 15]])
        np.testing.assert_allclose(res.w_hat, [[-1.0, -0.5, 0.5]], atol=1e-7)

    def test_rounding_offset_shifts_middle_code(self):
        W = f32([[-1.0, -0.47, 0.5]])
        V = f32([[0.0, 0.3, 0.0]])
        res = quantize_with_params(W, QuantConfig(4), V, None, None)
        np.testing.assert_array_equal(res.codes, [[0, 6, 15]])
        assert res.w_hat[0, 1] == pytest.approx(-0.4, abs=1e-7)

    def test_on_grid_weights_reconstruct_exactly(self):
        s, zp = np.float32(0.05), 3
        codes = np.array([[0, 15, 7, 3, 12, 5]], dtype=np.float32)
        W = (s * (codes - zp)).astype(np.float32)
        cfg = QuantConfig(4, -1)
        tuned = TunedParams.initial(W.shape, cfg)
        out = qdq(W, cfg, tuned)
        np.testing.assert_array_equal(out.data, W)

    def test_qdq_equals_rtn_bitwise(self):
        rng = np.random.default_rng(1)
        for bits, group in [(2, 8), (3, -1), (4, 5), (8, 32)]:
            W = rng.normal(0, 0.4, (7, 19)).astype(np.float32)
            cfg = QuantConfig(bits, group)
            out = qdq(W, cfg, TunedParams.initial(W.shape, cfg))
            base = rtn(W, cfg)
            np.testing.assert_array_equal(out.data, base.w_hat)

    def test_gradients_reach_all_trainables(self):
        rng = np.random.default_rng(2)
        W = rng.normal(0, 0.4, (4, 8)).astype(np.float32)
        cfg = QuantConfig(2, 4)
        tuned = TunedParams.initial(W.shape, cfg)
        ad.backward(ad.mse_loss(qdq(W, cfg, tuned), Tensor(W)))
        assert tuned.V.grad is not None and tuned.V.grad.shape == W.shape
        assert tuned.alpha.grad is not None and tuned.alpha.grad.shape == (8,)
        assert tuned.beta.grad is not None

    def test_shape_mismatch_rejected(self):
        W = np.zeros((4, 8), dtype=np.float32)
        cfg = QuantConfig(4, 4)
        bad = TunedParams.initial((4, 6), cfg)
        with pytest.raises(ShapeError):
            qdq(W, cfg, bad)
        bad_groups = TunedParams(
            V=Tensor(np.zeros((4, 8), dtype=np.float32), requires_grad=True),
            alpha=Tensor(np.ones(3, dtype=np.float32), requires_grad=True),
            beta=Tensor(np.ones(3, dtype=np.float32), requires_grad=True))
        with pytest.raises(ShapeError):
            qdq(W, cfg, bad_groups)


class TestRtn:
    def test_two_bit_example(self):
        res = rtn(f32([[0.0, 1.0, 0.4]]), QuantConfig(2))
        assert res.scales[0, 0] == pytest.approx(1 / 3, rel=1e-6)
        assert res.zps[0, 0] == 0
        np.testing.assert_array_equal(res.codes, [[0, 3, 1]])
        np.testing.assert_allclose(res.w_hat, [[0.0, 1.0, 1 / 3]], rtol=1e-6)

    def test_constant_zero_tensor_reconstructs_exactly(self):
        W = np.zeros((3, 6), dtype=np.float32)
        res = rtn(W, QuantConfig(4, 3))
        np.testing.assert_array_equal(res.w_hat, W)
        np.testing.assert_array_equal(res.codes, res.zps.repeat(3).reshape(3, 6))

    @pytest.mark.parametrize("bits,group", [(2, -1), (3, 8), (4, 32), (8, 8)])
    def test_unclipped_error_bound(self, bits, group):
        rng = np.random.default_rng(bits * 100 + max(group, 0))
        W = rng.normal(0, 1.0, (40, 125)).astype(np.float32)
        cfg = QuantConfig(bits, group)
        res = rtn(W, cfg)
        # expand per-group scales to per-element
        g = 125 if group == -1 else group
        n_per_row = -(-125 // g)
        s_elem = np.zeros_like(W)
        for j in range(n_per_row):
            lo, hi = j * g, min((j + 1) * g, 125)
            s_elem[:, lo:hi] = res.scales[:, j:j + 1]
        err = np.abs(W - res.w_hat)
        bound = s_elem / 2 + 4 * np.finfo(np.float32).eps * s_elem
        assert (err[res.unclipped] <= bound[res.unclipped] + 1e-9).all()

    def test_all_codes_in_range(self):
        rng = np.random.default_rng(5)
        W = rng.normal(0, 2.0, (10, 33)).astype(np.float32)
        for bits in (2, 3, 4, 8):
            res = rtn(W, QuantConfig(bits, 8))
            assert res.codes.min() >= 0
            assert res.codes.max() <= 2**bits - 1


class TestMonotoneOffset:
    def test_plus_one_offset_bumps_code_by_one_unless_saturated(self):
        rng = np.random.default_rng(6)
        W = rng.normal(0, 0.4, (5, 12)).astype(np.float32)
        cfg = QuantConfig(3, 4)
        base = quantize_with_params(W, cfg, None, None, None)
        shifted = quantize_with_params(W, cfg, np.ones_like(W), None, None)
        saturated = base.codes == cfg.qmax
        np.testing.assert_array_equal(shifted.codes[~saturated], base.codes[~saturated] + 1)
        np.testing.assert_array_equal(shifted.codes[saturated], base.codes[saturated])
