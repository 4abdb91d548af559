import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sewkit import context as ctx
from sewkit import tensor as tt
from sewkit.errors import ConfigError, ShapeError
from sewkit.tensor import Tensor, grad_check


def tiny_context(squeeze=1, width=64, depth=2, d_in=32, conv_kernel=8, seed=0,
                 dtype=np.float64, **kw):
    spec = ctx.ContextSpec(width=width, depth=depth, conv_kernel=conv_kernel,
                           squeeze=squeeze, dropout=0.0, layerdrop=0.0, **kw)
    return ctx.build_context(spec, d_in, np.random.default_rng(seed), dtype=dtype)


class TestSpec:
    def test_width_must_fit_head_dim(self):
        with pytest.raises(ConfigError, match="divisible"):
            ctx.ContextSpec(width=100, depth=2)

    def test_heads_derived(self):
        assert ctx.ContextSpec(width=512, depth=12).heads == 8

    def test_ffn_is_4x(self):
        assert ctx.ContextSpec(width=512, depth=12).ffn_dim == 2048


class TestForwardShapes:
    def test_no_squeeze_identity_shortcut(self):
        net = tiny_context(squeeze=1)
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(9, 64)))
        net.pos_conv_w.data[:] = 0.0
        net.pos_conv_b.data[:] = 0.0
        mixed = net.mix(x)
        np.testing.assert_array_equal(mixed.data, x.data)

    def test_squeeze_halves_internal_length(self):
        net = tiny_context(squeeze=2)
        x = Tensor(np.random.default_rng(2).normal(size=(100, 64)))
        assert net.mix(x).shape == (50, 64)

    def test_forward_restores_length_and_rate(self):
        net = tiny_context(squeeze=2, d_in=32)
        net.expected_rate_hz = 50.0
        z = ctx.FrameSequence(Tensor(np.random.default_rng(3).normal(size=(100, 32))), 50.0)
        out = ctx.context_forward(z, net)
        assert out.length == 100
        assert out.frame_rate_hz == 50.0

    def test_single_frame_no_squeeze(self):
        net = tiny_context(squeeze=1)
        out = net.forward(Tensor(np.random.default_rng(4).normal(size=(1, 32))))
        assert out.shape == (1, 64)

    def test_empty_sequence_rejected(self):
        net = tiny_context()
        with pytest.raises(ShapeError, match="non-empty"):
            net.encode(Tensor(np.zeros((0, 64))))

    def test_rate_mismatch_rejected(self):
        net = tiny_context(squeeze=2)
        net.expected_rate_hz = 50.0
        z = ctx.FrameSequence(Tensor(np.zeros((4, 32))), 25.0)
        with pytest.raises(ShapeError, match="frame rate"):
            ctx.context_forward(z, net)

    def test_eval_deterministic(self):
        net = tiny_context(squeeze=2)
        x = Tensor(np.random.default_rng(5).normal(size=(21, 32)))
        a = net.forward(x).data.copy()
        b = net.forward(x).data
        assert np.array_equal(a, b)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=1, max_value=120))
    def test_roundtrip_length_any_parity(self, t):
        net = tiny_context(squeeze=2, conv_kernel=7, dtype=np.float32)
        x = Tensor(np.random.default_rng(t).normal(size=(t, 32)).astype(np.float32))
        zc = net.project(x)
        padded, _ = net._pad_to_multiple(zc)
        assert net.mix(padded).shape[0] == (t + 1) // 2  # internal length ceil(T/2)
        assert net.forward(x).shape[0] == t

    def test_even_conv_kernel_same_padding(self):
        net = tiny_context(squeeze=2, conv_kernel=8)
        x = Tensor(np.random.default_rng(6).normal(size=(10, 64)))
        assert net.mix(x).shape == (5, 64)


class TestShortcut:
    def test_zero_conv_equals_avg_pool_exactly(self):
        net = tiny_context(squeeze=2)
        net.pos_conv_w.data[:] = 0.0
        net.pos_conv_b.data[:] = 0.0
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(12, 64)))
        mixed = net.mix(x).data
        pooled = x.data.reshape(6, 2, 64).mean(axis=1)
        np.testing.assert_array_equal(mixed, pooled)


class TestUpsample:
    def test_length_doubles(self):
        rng = np.random.default_rng(8)
        w = Tensor(rng.normal(size=(4, 8)))
        b = Tensor(rng.normal(size=8))
        y = ctx.upsample(Tensor(rng.normal(size=(1, 4))), 2, w, b)
        assert y.shape == (2, 4)

    def test_s1_is_affine(self):
        rng = np.random.default_rng(9)
        w = Tensor(rng.normal(size=(4, 4)))
        b = Tensor(rng.normal(size=4))
        x = rng.normal(size=(5, 4))
        y = ctx.upsample(Tensor(x), 1, w, b)
        np.testing.assert_allclose(y.data, x @ w.data + b.data, atol=1e-12)

    def test_equivalent_to_conv_transpose(self):
        # kernel-s/stride-s transposed conv with weight [E, E, s] equals the
        # linear form with weight transpose(0, 2, 1).reshape(E, s*E)
        rng = np.random.default_rng(10)
        e, s, t = 4, 2, 7
        w_ct = rng.normal(size=(e, e, s))
        x = rng.normal(size=(t, e))
        ref = tt.conv_transpose1d(Tensor(x.T[None, :, :]), Tensor(w_ct), stride=s).data
        ref = ref[0].T  # [s*T, E]
        w_lin = Tensor(w_ct.transpose(0, 2, 1).reshape(e, s * e))
        got = ctx.upsample(Tensor(x), s, w_lin, Tensor(np.zeros(s * e))).data
        np.testing.assert_allclose(got, ref, atol=1e-6)

    def test_upsample_frames_rate(self):
        rng = np.random.default_rng(11)
        w = Tensor(rng.normal(size=(4, 8)))
        b = Tensor(np.zeros(8))
        z = ctx.FrameSequence(Tensor(rng.normal(size=(3, 4))), 25.0)
        out = ctx.upsample_frames(z, 2, w, b)
        assert out.frame_rate_hz == 50.0
        assert out.length == 6


class TestTraining:
    def test_layerdrop_eval_never_drops(self):
        net = tiny_context(squeeze=1)
        x = Tensor(np.random.default_rng(12).normal(size=(6, 32)))
        a = net.forward(x, train=False, rng=np.random.default_rng(0)).data
        b = net.forward(x, train=False, rng=np.random.default_rng(99)).data
        assert np.array_equal(a, b)

    def test_grad_check_full_tiny_model(self):
        # gradient flows through every stage: projection, strided pos conv,
        # both transformer layers, and the upsample head
        net = tiny_context(squeeze=2, width=64, depth=2, d_in=8, conv_kernel=4, seed=13)
        x = Tensor(np.random.default_rng(14).normal(size=(8, 8)), requires_grad=True)
        leaves = [x, net.proj_b, net.pos_conv_b, net.layers[0].attn.b_q,
                  net.layers[1].b_ff2, net.up_b, net.enc_ln_g]

        def f(*_):
            y = net.forward(x)
            return tt.tsum(tt.mul(y, y))

        assert grad_check(f, leaves) < 1e-4

    def test_disentangled_context_builds_and_runs(self):
        net = tiny_context(squeeze=2, attention="disentangled", max_rel_offset=5)
        x = Tensor(np.random.default_rng(15).normal(size=(11, 32)))
        assert net.forward(x).shape == (11, 64)

    def test_rel_params_shared_across_layers(self):
        net = tiny_context(attention="disentangled", depth=3, max_rel_offset=4)
        assert all(layer.rel is net.rel for layer in net.layers)
        names = [n for n, _ in net.named_params()]
        assert sum(1 for n in names if "rel." in n) == 5  # table + 2 weights + 2 biases
