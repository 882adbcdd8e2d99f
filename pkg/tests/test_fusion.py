import numpy as np
import pytest

from parafuse.attention import cross_attention
from parafuse.fusion import (BASELINES, MECHANISMS, FusionParams, MissingParameterError, align_lengths, fuse,
                             fuse_dfc, fuse_res_bi_caf, fuse_res_gated_bi_caf, fuse_res_gated_bi_caf_dfc,
                             fuse_res_uni_caf, fused_dim, init_fusion)
from parafuse.tensor import GradTape, ShapeError, Tensor

D_W, D_M = 64, 48


def streams(t=5, seed=0, d_w=D_W, d_m=D_M):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(t, d_w))), Tensor(rng.normal(size=(t, d_m)))


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def zero_outputs(p: FusionParams) -> FusionParams:
    for attn in (p.attn_wm, p.attn_mw):
        if attn is not None:
            attn.w_o.data = np.zeros_like(attn.w_o.data)
    return p


class TestDfc:
    def test_hand_case(self):
        assert fuse_dfc(Tensor([[1.0, 2.0]]), Tensor([[3.0]])).data.tolist() == [[1.0, 2.0, 3.0]]

    def test_zero_mhubert_columns(self):
        hw, _ = streams()
        out = fuse_dfc(hw, Tensor(np.zeros((5, D_M)))).data
        assert np.all(out[:, D_W:] == 0)

    def test_time_mismatch(self):
        with pytest.raises(ShapeError, match="T=3.*T=4"):
            fuse_dfc(Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 2))))

    def test_gradient_splits(self):
        hw, hm = streams(3)
        hw.requires_grad = hm.requires_grad = True
        with GradTape() as tape:
            loss = fuse_dfc(hw, hm).sum()
        tape.backward(loss)
        assert np.array_equal(hw.grad, np.ones((3, D_W))) and np.array_equal(hm.grad, np.ones((3, D_M)))


class TestResUniCaf:
    def test_zero_output_projection_is_identity(self):
        hw, hm = streams()
        p = zero_outputs(init_fusion("res-uni-caf", D_W, D_M, seed=1))
        assert np.array_equal(fuse_res_uni_caf(hw, hm, p).data, hw.data)

    def test_single_key_adds_constant_row(self):
        p = init_fusion("res-uni-caf", D_W, D_M, seed=2)
        hw, _ = streams(4)
        hm = Tensor(np.random.default_rng(3).normal(size=(1, D_M)))
        # fuse_* needs equal lengths, so build the residual from the attention block itself
        diff = (cross_attention(hw, hm, p.attn_wm) + hw).data - hw.data
        np.testing.assert_allclose(diff, np.repeat(diff[:1], 4, axis=0), atol=1e-12)

    def test_matches_composition(self):
        hw, hm = streams(6, seed=4)
        p = init_fusion("res-uni-caf", D_W, D_M, seed=5)
        ref = cross_attention(hw, hm, p.attn_wm).data + hw.data
        np.testing.assert_allclose(fuse_res_uni_caf(hw, hm, p).data, ref, rtol=0, atol=1e-12)


class TestResBiCaf:
    def test_zero_outputs_give_dfc(self):
        hw, hm = streams()
        p = zero_outputs(init_fusion("res-bi-caf", D_W, D_M, seed=1))
        assert np.array_equal(fuse_res_bi_caf(hw, hm, p).data, fuse_dfc(hw, hm).data)

    def test_first_block_is_uni_caf(self):
        hw, hm = streams(seed=2)
        bi = init_fusion("res-bi-caf", D_W, D_M, seed=3)
        uni = FusionParams("res-uni-caf", attn_wm=bi.attn_wm)
        np.testing.assert_array_equal(fuse_res_bi_caf(hw, hm, bi).data[:, :D_W], fuse_res_uni_caf(hw, hm, uni).data)


class TestGated:
    def test_zero_gates_halve_attended_path(self):
        hw, hm = streams(seed=3)
        p = init_fusion("res-gated-bi-caf", D_W, D_M, seed=4)
        p.gate_wm.data[:] = 0
        p.gate_mw.data[:] = 0
        a_wm = cross_attention(hw, hm, p.attn_wm).data
        a_mw = cross_attention(hm, hw, p.attn_mw).data
        expected = np.concatenate([0.5 * a_wm + hw.data, 0.5 * a_mw + hm.data], axis=1)
        np.testing.assert_allclose(fuse_res_gated_bi_caf(hw, hm, p).data, expected, atol=1e-12)

    def test_zero_attention_gives_dfc(self):
        hw, hm = streams(seed=5)
        p = zero_outputs(init_fusion("res-gated-bi-caf", D_W, D_M, seed=6))
        assert np.array_equal(fuse_res_gated_bi_caf(hw, hm, p).data, fuse_dfc(hw, hm).data)

    def test_elementwise_reference(self):
        hw, hm = streams(seed=7)
        p = init_fusion("res-gated-bi-caf", D_W, D_M, seed=8)
        a_wm = cross_attention(hw, hm, p.attn_wm).data
        a_mw = cross_attention(hm, hw, p.attn_mw).data
        out = np.empty((5, D_W + D_M))
        for t in range(5):
            gate_w = sig(a_wm[t] @ p.gate_wm.data)
            gate_m = sig(a_mw[t] @ p.gate_mw.data)
            for i in range(D_W):
                out[t, i] = gate_w[i] * a_wm[t, i] + hw.data[t, i]
            for i in range(D_M):
                out[t, D_W + i] = gate_m[i] * a_mw[t, i] + hm.data[t, i]
        np.testing.assert_allclose(fuse_res_gated_bi_caf(hw, hm, p).data, out, rtol=0, atol=1e-12)

    def test_gate_values_in_open_interval(self):
        hw, hm = streams(seed=9)
        p = init_fusion("res-gated-bi-caf", D_W, D_M, seed=10)
        g = sig(cross_attention(hw, hm, p.attn_wm).data @ p.gate_wm.data)
        assert np.all(g > 0) and np.all(g < 1)


class TestGatedDfc:
    def test_blocks(self):
        hw, hm = streams(seed=11)
        p = init_fusion("res-gated-bi-caf-dfc", D_W, D_M, seed=12)
        out = fuse_res_gated_bi_caf_dfc(hw, hm, p).data
        gated = FusionParams("res-gated-bi-caf", p.attn_wm, p.attn_mw, p.gate_wm, p.gate_mw)
        assert np.array_equal(out[:, :D_W + D_M], fuse_dfc(hw, hm).data)
        assert np.array_equal(out[:, D_W + D_M:], fuse_res_gated_bi_caf(hw, hm, gated).data)

    def test_zero_attention_gives_double_dfc(self):
        hw, hm = streams(seed=13)
        p = zero_outputs(init_fusion("res-gated-bi-caf-dfc", D_W, D_M, seed=14))
        dfc = fuse_dfc(hw, hm).data
        assert np.array_equal(fuse_res_gated_bi_caf_dfc(hw, hm, p).data, np.concatenate([dfc, dfc], axis=1))


class TestDims:
    @pytest.mark.parametrize("mech,expected", [("dfc", 112), ("res-uni-caf", 64), ("res-bi-caf", 112),
                                               ("res-gated-bi-caf", 112), ("res-gated-bi-caf-dfc", 224),
                                               ("whisper-only", 64), ("mhubert-only", 48)])
    def test_fused_dim_table(self, mech, expected):
        assert fused_dim(mech, D_W, D_M) == expected

    @pytest.mark.parametrize("mech", MECHANISMS + BASELINES)
    def test_output_shape(self, mech):
        hw, hm = streams(7, seed=15)
        p = init_fusion(mech, D_W, D_M, seed=16) if mech in MECHANISMS else None
        out = fuse(mech, hw, hm, p)
        assert out.shape == (7, fused_dim(mech, D_W, D_M))


class TestParams:
    def test_exact_subset_enforced(self):
        full = init_fusion("res-gated-bi-caf", D_W, D_M, seed=0)
        with pytest.raises(MissingParameterError):
            FusionParams("res-bi-caf", full.attn_wm, full.attn_mw, full.gate_wm, full.gate_mw)
        with pytest.raises(MissingParameterError):
            FusionParams("res-uni-caf")

    def test_wrong_params_for_mechanism(self):
        hw, hm = streams()
        with pytest.raises(MissingParameterError):
            fuse_res_bi_caf(hw, hm, init_fusion("res-uni-caf", D_W, D_M, seed=0))
        with pytest.raises(MissingParameterError):
            fuse_res_uni_caf(hw, hm, None)

    def test_unknown_mechanism(self):
        with pytest.raises(ValueError):
            init_fusion("concat-plus", D_W, D_M)


class TestAlign:
    def test_equal_lengths_unchanged(self):
        hw, hm = streams(4)
        a, b = align_lengths(hw, hm)
        assert a is hw and b is hm

    def test_truncates_longer(self):
        hw, _ = streams(10)
        _, hm = streams(9)
        a, b = align_lengths(hw, hm)
        assert a.shape[0] == b.shape[0] == 9
        assert np.array_equal(a.data, hw.data[:9])

    def test_commutes_with_dfc(self):
        hw, _ = streams(10, seed=1)
        _, hm = streams(8, seed=2)
        a, b = align_lengths(hw, hm)
        full = np.concatenate([hw.data[:8], hm.data], axis=1)
        assert np.array_equal(fuse_dfc(a, b).data, full)
        assert np.array_equal(fuse("dfc", hw, hm, None).data, full)
