import numpy as np
import pytest
import torch

from hfsda.dda import (ConformerBlock, DDABlock, FreqLiteAttention, MultiHeadSelfAttention,
                       count_parameters, fa_apply, fa_weights, make_block, sinusoidal_positions)
from hfsda.errors import ConfigError, DimensionError
from hfsda.testkit import fa_hand


class TestFreqLiteAttention:
    def test_matches_scalar_oracle(self, rng):
        x = rng.standard_normal((7, 5))
        w1, w2 = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
        got = fa_weights(torch.from_numpy(x), torch.from_numpy(w1), torch.from_numpy(w2))
        np.testing.assert_allclose(got.numpy(), fa_hand(x, w1, w2), atol=1e-12)

    def test_batched_matches_per_item(self):
        torch.manual_seed(2)
        fa = FreqLiteAttention(6).double()
        x = torch.randn(3, 9, 6, dtype=torch.float64)
        full = fa(x)
        for i in range(3):
            assert torch.allclose(full[i], fa(x[i]), rtol=0, atol=1e-12)

    def test_zero_weights_give_half(self):
        x = torch.randn(4, 3)
        u = fa_weights(x, torch.zeros(3, 3), torch.zeros(3, 3))
        assert torch.equal(u, torch.full((3,), 0.5))

    def test_output_bounded_by_input(self):
        fa = FreqLiteAttention(16)
        x = torch.randn(2, 30, 16) * 50
        assert (fa(x).abs() <= x.abs()).all()

    def test_time_permutation_exact(self):
        fa = FreqLiteAttention(32).double()
        x = torch.randn(50, 32, dtype=torch.float64)
        u = fa.weights(x)
        for s in range(5):
            perm = torch.randperm(50, generator=torch.Generator().manual_seed(s))
            assert torch.equal(fa.weights(x[perm]), u)

    def test_no_bias_parameters(self):
        assert {n for n, _ in FreqLiteAttention(4).named_parameters()} == {"w1", "w2"}

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            fa_weights(torch.zeros(3, 4), torch.zeros(3, 3), torch.zeros(4, 4))
        with pytest.raises(DimensionError):
            fa_apply(torch.zeros(3, 4), torch.zeros(5))


class TestMhsa:
    def test_rows_sum_to_one(self):
        mhsa = MultiHeadSelfAttention(16, 4)
        _, w = mhsa(torch.randn(2, 11, 16) * 5, return_weights=True)
        assert w.shape == (2, 4, 11, 11)
        assert torch.allclose(w.sum(-1), torch.ones(2, 4, 11), atol=1e-6)

    def test_matches_torch_reference(self):
        torch.manual_seed(0)
        mhsa = MultiHeadSelfAttention(8, 2).double()
        ref = torch.nn.MultiheadAttention(8, 2, batch_first=True).double()
        with torch.no_grad():
            ref.in_proj_weight.copy_(mhsa.qkv.weight)
            ref.in_proj_bias.copy_(mhsa.qkv.bias)
            ref.out_proj.weight.copy_(mhsa.out.weight)
            ref.out_proj.bias.copy_(mhsa.out.bias)
        x = torch.randn(3, 6, 8, dtype=torch.float64)
        want, _ = ref(x, x, x, need_weights=False)
        assert torch.allclose(mhsa(x), want, atol=1e-12)

    def test_unbatched(self):
        mhsa = MultiHeadSelfAttention(8, 2)
        assert mhsa(torch.randn(5, 8)).shape == (5, 8)

    def test_indivisible_heads(self):
        with pytest.raises(ConfigError):
            MultiHeadSelfAttention(10, 4)

    def test_wrong_width(self):
        with pytest.raises(DimensionError):
            MultiHeadSelfAttention(8, 2)(torch.randn(4, 6))


class TestBlocks:
    @pytest.mark.parametrize("kind", ["dda", "conformer", "conformer_fa"])
    def test_shape_preserved(self, kind):
        block = make_block(kind, 32, 4).eval()
        assert block(torch.randn(2, 17, 32)).shape == (2, 17, 32)

    def test_dda_has_no_convolution(self):
        block = DDABlock(32, 4)
        assert not any(isinstance(m, (torch.nn.Conv1d, torch.nn.Conv2d)) for m in block.modules())

    def test_dda_residual_structure(self):
        # with both FF outputs zeroed, MHSA zeroed and FA at 1/2, y = LN(x + 0.5 LN(x))
        block = DDABlock(8, 2, dropout=0.0).double().eval()
        with torch.no_grad():
            for ff in (block.ff1, block.ff2):
                ff.lin2.weight.zero_()
                ff.lin2.bias.zero_()
            block.mhsa.out.weight.zero_()
            block.mhsa.out.bias.zero_()
            block.fa.w1.zero_()
            block.fa.w2.zero_()
        x = torch.randn(5, 8, dtype=torch.float64)
        ln = torch.nn.functional.layer_norm
        want = ln(x + 0.5 * ln(x, (8,), eps=1e-5), (8,), eps=1e-5)
        assert torch.allclose(block(x), want, atol=1e-12)

    @pytest.mark.parametrize("kind", ["dda", "conformer", "conformer_fa"])
    def test_every_parameter_gets_gradient(self, kind):
        torch.manual_seed(1)
        block = make_block(kind, 16, 2, dropout=0.0)
        block(torch.randn(2, 9, 16)).sum().backward()
        for name, p in block.named_parameters():
            assert p.grad is not None and p.grad.abs().sum() > 0, name

    @pytest.mark.parametrize("dim", [64, 256])
    def test_dda_smaller_than_conformer(self, dim):
        assert count_parameters(DDABlock(dim, 4)) < count_parameters(ConformerBlock(dim, 4))

    def test_conformer_fa_is_largest(self):
        sizes = [count_parameters(make_block(k, 64, 4)) for k in ("dda", "conformer", "conformer_fa")]
        assert sizes[0] < sizes[1] < sizes[2]

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_block("transformer", 8, 2)


def test_sinusoidal_positions():
    table = sinusoidal_positions(10, 6, torch.float64)
    assert table.shape == (10, 6)
    assert torch.equal(table[0, 0::2], torch.zeros(3))
    assert torch.equal(table[0, 1::2], torch.ones(3))
    assert abs(table[3, 2].item() - np.sin(3 / 10000 ** (2 / 6))) < 1e-12
