import numpy as np
import pytest

from sewkit import attention as attn
from sewkit import tensor as tt
from sewkit.errors import ConfigError
from sewkit.tensor import Tensor, grad_check


def make_attention(d=8, heads=2, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return attn.init_attention(d, heads, rng, dtype=dtype)


def make_disentangled(d=8, heads=2, k=3, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    content = attn.init_attention(d, heads, rng, dtype=dtype)
    rel = attn.init_rel_pos(d, k, rng, dtype=dtype)
    return attn.DisentangledParams(content, rel)


class TestMultiHeadAttention:
    def test_uniform_softmax_averages_values(self):
        # zero queries make all logits equal: each output row is the value mean
        d, heads = 8, 2
        p = make_attention(d, heads, seed=1)
        p.w_q.data[:] = 0.0
        p.b_q.data[:] = 0.0
        # identity output projection to observe values directly
        p.w_out.data[:] = np.eye(d)
        p.b_out.data[:] = 0.0
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(5, d)))
        out = attn.multi_head_attention(x, p)
        v = x.data @ p.w_v.data + p.b_v.data
        np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (5, 1)), atol=1e-10)

    def test_one_hot_softmax_limit(self):
        # a huge logit at one key makes the output equal that key's value row
        d, heads, t = 4, 1, 3
        p = make_attention(d, heads, seed=3)
        p.w_out.data[:] = np.eye(d)
        p.b_out.data[:] = 0.0
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(t, d)))
        mask = np.zeros((t, t))
        mask[:, 1] = 1e4  # force key 1 for every query
        out = attn.multi_head_attention(x, p, mask=mask)
        v = x.data @ p.w_v.data + p.b_v.data
        np.testing.assert_allclose(out.data, np.tile(v[1], (t, 1)), atol=1e-8)

    @pytest.mark.parametrize("t", [1, 2, 9])
    def test_output_shape_matches_input(self, t):
        p = make_attention()
        x = Tensor(np.random.default_rng(t).normal(size=(t, 8)))
        assert attn.multi_head_attention(x, p).shape == (t, 8)

    def test_batched_matches_loop(self):
        p = make_attention(seed=5)
        rng = np.random.default_rng(6)
        xb = rng.normal(size=(3, 4, 8))
        batched = attn.multi_head_attention(Tensor(xb), p).data
        for i in range(3):
            single = attn.multi_head_attention(Tensor(xb[i]), p).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            attn.init_attention(10, 3, np.random.default_rng(0))


class TestDisentangledAttention:
    def test_zero_positions_reduce_to_content_attention(self):
        d, heads = 8, 2
        p = make_disentangled(d, heads, k=4, seed=7)
        p.rel.table.data[:] = 0.0
        p.rel.w_qp.data[:] = 0.0
        p.rel.w_kp.data[:] = 0.0
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(6, d)))
        got = attn.disentangled_attention(x, p).data
        want = attn.multi_head_attention(x, p.content,
                                         scale=1.0 / np.sqrt(3 * p.head_dim)).data
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_delta_clamps_to_window(self):
        idx = attn.relative_position_index(12, 3)
        assert idx[0, 10] == 0        # raw offset -10 clamps to -k -> bucket 0
        assert idx[10, 0] == 6        # raw offset +10 clamps to +k -> bucket 2k
        assert idx[5, 5] == 3         # offset 0 -> bucket k
        assert idx.min() == 0 and idx.max() == 6

    def test_translation_leaves_logits_unchanged(self):
        # shifting a sequence in time (content translated with it) must not
        # change relative-position logits
        d, heads, t, k, pad = 8, 2, 12, 4, 5
        p = make_disentangled(d, heads, k=k, seed=9)
        rng = np.random.default_rng(10)
        x = rng.normal(size=(t, d))
        padded = np.concatenate([rng.normal(size=(pad, d)), x, rng.normal(size=(pad, d))])
        s_base = attn._disentangled_scores(Tensor(x), p).data
        s_pad = attn._disentangled_scores(Tensor(padded), p).data
        np.testing.assert_allclose(s_pad[:, pad:pad + t, pad:pad + t], s_base, atol=1e-10)

    def test_row_softmax_sums_to_one(self):
        p = make_disentangled(seed=11)
        x = Tensor(np.random.default_rng(12).normal(size=(7, 8)))
        scores = attn._disentangled_scores(x, p)
        probs = tt.softmax(tt.scale(scores, 1.0 / np.sqrt(3 * p.head_dim)), axis=-1)
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_grad_check(self):
        p = make_disentangled(d=4, heads=2, k=2, seed=13)
        x = Tensor(np.random.default_rng(14).normal(size=(4, 4)), requires_grad=True)
        leaves = [x, p.content.w_q, p.rel.table, p.rel.w_qp, p.rel.w_kp]

        def f(x_, wq_, tab_, wqp_, wkp_):
            y = attn.disentangled_attention(x_, p)
            return tt.tsum(tt.mul(y, y))

        assert grad_check(f, leaves) < 1e-4


class TestTransformerLayer:
    def _layer(self, d=8, heads=2, seed=20, rel=None, dtype=np.float64):
        rng = np.random.default_rng(seed)
        return attn.init_transformer_layer(d, heads, 4 * d, rng, rel=rel, dtype=dtype)

    def test_layerdrop_returns_input_bit_equal(self):
        layer = self._layer()
        x = Tensor(np.random.default_rng(21).normal(size=(5, 8)))
        out = attn.transformer_layer(x, layer, train=True, layerdrop_decision=True)
        assert out is x

    def test_eval_never_drops(self):
        layer = self._layer()
        x = Tensor(np.random.default_rng(22).normal(size=(5, 8)))
        out = attn.transformer_layer(x, layer, train=False, layerdrop_decision=True)
        assert out is not x

    def test_eval_deterministic(self):
        layer = self._layer()
        x = Tensor(np.random.default_rng(23).normal(size=(4, 8)))
        a = attn.transformer_layer(x, layer, train=False).data.copy()
        b = attn.transformer_layer(x, layer, train=False).data
        assert np.array_equal(a, b)

    def test_grad_check_full_layer(self):
        layer = self._layer(seed=24)
        x = Tensor(np.random.default_rng(25).normal(size=(4, 8)), requires_grad=True)
        leaves = [x, layer.attn.w_q, layer.attn.w_out, layer.w_ff1, layer.ln1_g]

        def f(*_):
            y = attn.transformer_layer(x, layer, train=False)
            return tt.tsum(tt.mul(y, y))

        assert grad_check(f, leaves) < 1e-4

    def test_grad_check_disentangled_layer(self):
        rng = np.random.default_rng(26)
        rel = attn.init_rel_pos(8, 3, rng, dtype=np.float64)
        layer = self._layer(seed=27, rel=rel)
        x = Tensor(np.random.default_rng(28).normal(size=(4, 8)), requires_grad=True)
        leaves = [x, rel.table, layer.attn.w_v]

        def f(*_):
            y = attn.transformer_layer(x, layer, train=False)
            return tt.tsum(tt.mul(y, y))

        assert grad_check(f, leaves) < 1e-4
