import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sewkit import tensor as T
from sewkit.errors import GradientError, ShapeError
from sewkit.tensor import Graph, Tensor, backward, grad_check


def t64(data, rg=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


class TestConv1d:
    def test_hand_cross_correlation(self):
        # [1,2,3,4] correlated with [1,0,-1]: 1-3=-2, 2-4=-2
        x = t64([[[1.0, 2.0, 3.0, 4.0]]])
        w = t64([[[1.0, 0.0, -1.0]]])
        y = T.conv1d(x, w, stride=1, padding=0)
        np.testing.assert_allclose(y.data, [[[-2.0, -2.0]]])

    def test_identity_kernel(self):
        x = t64(np.random.default_rng(0).normal(size=(2, 3, 7)))
        w = Tensor(np.eye(3, dtype=np.float64).reshape(3, 3, 1), requires_grad=True)
        y = T.conv1d(x, w)
        np.testing.assert_allclose(y.data, x.data)

    def test_output_length_formula(self):
        x = t64(np.zeros((1, 1, 10)))
        w = t64(np.zeros((4, 1, 2)))
        assert T.conv1d(x, w, stride=2).shape == (1, 4, 5)
        assert T.conv1d_out_length(10, 2, 2) == 5

    def test_too_short_input_raises(self):
        x = t64(np.zeros((1, 1, 3)))
        w = t64(np.zeros((1, 1, 5)))
        with pytest.raises(ShapeError, match="too short"):
            T.conv1d(x, w)

    def test_group_mismatch_names_dimension(self):
        x = t64(np.zeros((1, 6, 10)))
        w = t64(np.zeros((4, 2, 3)))
        with pytest.raises(ShapeError, match="Cin"):
            T.conv1d(x, w, groups=2)

    def test_matches_direct_convolution_with_groups(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 4, 11))
        w = rng.normal(size=(6, 2, 3))
        b = rng.normal(size=6)
        y = T.conv1d(t64(x), t64(w), t64(b), stride=2, padding=1, groups=2)
        # brute-force reference
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        tout = (11 + 2 - 3) // 2 + 1
        ref = np.zeros((2, 6, tout))
        for bi in range(2):
            for o in range(6):
                g = o // 3
                for t in range(tout):
                    acc = 0.0
                    for c in range(2):
                        for j in range(3):
                            acc += xp[bi, g * 2 + c, t * 2 + j] * w[o, c, j]
                    ref[bi, o, t] = acc + b[o]
        np.testing.assert_allclose(y.data, ref, atol=1e-12)


class TestConvTranspose1d:
    def test_hand_transposed_conv(self):
        a, b = 2.0, -3.0
        x = t64([[[a, b]]])
        w = t64(np.ones((1, 1, 2)))
        y = T.conv_transpose1d(x, w, stride=2)
        np.testing.assert_allclose(y.data, [[[a, a, b, b]]])

    def test_zero_input_zero_output(self):
        x = t64(np.zeros((1, 3, 4)))
        w = t64(np.random.default_rng(1).normal(size=(3, 2, 3)))
        y = T.conv_transpose1d(x, w, stride=2)
        assert np.all(y.data == 0.0)

    def test_output_length(self):
        x = t64(np.zeros((1, 1, 5)))
        w = t64(np.zeros((1, 1, 2)))
        assert T.conv_transpose1d(x, w, stride=2).shape[-1] == 10

    @pytest.mark.parametrize("seed", range(6))
    def test_exact_adjoint_of_conv1d(self, seed):
        # <conv(x), y> == <x, conv_T(y)> for matching weights
        rng = np.random.default_rng(seed)
        k, s = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        cin, cout, tlen = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(6, 14))
        x = rng.normal(size=(2, cin, tlen))
        w = rng.normal(size=(cout, cin, k))
        tout = (tlen - k) // s + 1
        if tout < 1:
            return
        y = rng.normal(size=(2, cout, tout))
        fx = T.conv1d(t64(x, rg=False), t64(w, rg=False), stride=s).data
        # same array reinterpreted as [Cin_t=cout, Cout_t=cin, k]
        bty = T.conv_transpose1d(t64(y, rg=False), t64(w, rg=False), stride=s).data
        bty = bty[:, :, :tlen]
        lhs = float((fx * y).sum())
        rhs = float((x[:, :, :bty.shape[-1]] * bty).sum())
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


class TestNormalize:
    def test_layer_norm_constant_vector_is_zero(self):
        x = t64(np.full((3, 5), 2.5))
        g = t64(np.ones(5))
        b = t64(np.zeros(5))
        y = T.normalize(x, "layer", g, b)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-6)

    def test_layer_norm_two_point(self):
        x = t64([[1.0, -1.0]])
        y = T.layer_norm(x, t64(np.ones(2)), t64(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(y.data, [[1.0, -1.0]], atol=1e-6)

    def test_instance_norm_zero_time_mean(self):
        rng = np.random.default_rng(3)
        x = t64(rng.normal(size=(2, 4, 50)))
        y = T.instance_norm(x, t64(np.ones(4)), t64(np.zeros(4)))
        np.testing.assert_array_less(np.abs(y.data.mean(axis=2)), 1e-6)

    def test_batch_eval_without_stats_raises(self):
        x = t64(np.zeros((4, 3)))
        with pytest.raises(ShapeError, match="running stats"):
            T.batch_norm(x, t64(np.ones(3)), t64(np.zeros(3)), train=False)

    def test_batch_running_stats_roundtrip(self):
        rng = np.random.default_rng(4)
        g, b = t64(np.ones(3)), t64(np.zeros(3))
        stats = {"mean": np.zeros(3), "var": np.ones(3), "count": 0}
        x = t64(rng.normal(size=(64, 3)))
        T.batch_norm(x, g, b, running_stats=stats, train=True)
        assert stats["count"] == 1
        y = T.batch_norm(x, g, b, running_stats=stats, train=False)
        assert y.shape == (64, 3)


class TestActivation:
    def test_relu_values(self):
        y = T.activation(t64([-1.0, 2.0]), "relu")
        np.testing.assert_allclose(y.data, [0.0, 2.0])

    def test_gelu_zero(self):
        assert T.gelu(t64([0.0])).data[0] == 0.0

    def test_gelu_saturates(self):
        assert abs(T.gelu(t64([10.0])).data[0] - 10.0) < 1e-4


class TestBackward:
    def test_quadratic(self):
        x = t64([1.0, -2.0, 3.0])
        loss = T.tsum(T.mul(x, x))
        backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_leaf_off_path_has_zero_grad(self):
        x = t64([1.0, 2.0])
        other = t64([5.0])
        loss = T.tsum(x)
        backward(loss)
        np.testing.assert_allclose(other.ensure_grad(), 0.0)

    def test_non_scalar_loss_raises(self):
        x = t64([1.0, 2.0])
        with pytest.raises(ShapeError, match="scalar"):
            backward(x)

    def test_accumulation_across_uses(self):
        x = t64([3.0])
        loss = T.tsum(T.add(x, x))
        backward(loss)
        np.testing.assert_allclose(x.grad, [2.0])

    def test_conv1d_grad_vs_finite_differences(self):
        rng = np.random.default_rng(11)
        x = t64(rng.normal(size=(1, 2, 9)))
        w = t64(rng.normal(size=(3, 2, 3)))
        b = t64(rng.normal(size=3))
        tgt = rng.normal(size=(1, 3, 4))

        def f(x_, w_, b_):
            y = T.conv1d(x_, w_, b_, stride=2)
            d = T.sub(y, Tensor(tgt))
            return T.tsum(T.mul(d, d))

        assert grad_check(f, [x, w, b]) < 1e-4


class TestGradCheck:
    def test_matmul_quadratic_tight(self):
        rng = np.random.default_rng(5)
        a = t64(rng.normal(size=(3, 4)))
        w = t64(rng.normal(size=(4, 2)))

        def f(a_, w_):
            y = T.matmul(a_, w_)
            return T.tsum(T.mul(y, y))

        assert grad_check(f, [a, w]) <= 1e-6

    def test_detects_corrupted_gradient(self):
        x = t64([1.0, 2.0, 3.0])

        def bad_square(v):
            def fwd():
                return v.data * v.data
            def bwd(g, accum):
                accum(v, 1.01 * 2.0 * v.data * g)  # deliberately wrong by 1%
            return T._node(fwd(), (v,), bwd, fwd, "bad_square")

        def f(x_):
            return T.tsum(bad_square(x_))

        assert grad_check(f, [x]) >= 5e-3

    def test_constant_function_zero_error(self):
        x = t64([1.0, 2.0])

        def f(x_):
            return T.tsum(T.scale(x_, 0.0))

        assert grad_check(f, [x]) == 0.0

    def test_rejects_float32(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(GradientError):
            grad_check(lambda v: T.tsum(v), [x])


def _rand_tensors(rng, *shapes):
    return [t64(rng.normal(size=s)) for s in shapes]


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_core_ops_random_shapes(seed):
    rng = np.random.default_rng(100 + seed)
    b = int(rng.integers(1, 3))
    cin = int(rng.integers(1, 4))
    cout = int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    tlen = int(rng.integers(k + 2, k + 8))
    s = int(rng.integers(1, 3))

    x, w = _rand_tensors(rng, (b, cin, tlen), (cout, cin, k))
    assert grad_check(lambda x_, w_: T.tsum(T.mul(y := T.conv1d(x_, w_, stride=s), y)), [x, w]) < 1e-4

    xt, wt = _rand_tensors(rng, (b, cin, tlen), (cin, cout, k))
    assert grad_check(lambda x_, w_: T.tsum(T.mul(y := T.conv_transpose1d(x_, w_, stride=s), y)), [xt, wt]) < 1e-4

    d = int(rng.integers(2, 6))
    xn, g, be = _rand_tensors(rng, (b, d), (d,), (d,))
    assert grad_check(lambda a_, g_, b_: T.tsum(T.mul(y := T.layer_norm(a_, g_, b_), y)), [xn, g, be]) < 1e-4

    xg = _rand_tensors(rng, (b, d))[0]
    assert grad_check(lambda a_: T.tsum(T.mul(y := T.gelu(a_), y)), [xg]) < 1e-4

    xs = _rand_tensors(rng, (b, d))[0]
    tgt = rng.normal(size=(b, d))
    assert grad_check(lambda a_: T.tsum(T.mul(y := T.sub(T.softmax(a_), Tensor(tgt)), y)), [xs]) < 1e-4

    m = int(rng.integers(1, 4))
    a2, b2 = _rand_tensors(rng, (m, d), (d, m))
    assert grad_check(lambda a_, b_: T.tsum(T.mul(y := T.matmul(a_, b_), y)), [a2, b2]) < 1e-4


@pytest.mark.parametrize("kind,shape", [("instance", (2, 3, 6)), ("batch", (5, 3))])
def test_grad_check_other_norms(kind, shape):
    rng = np.random.default_rng(42)
    feat = shape[1]
    x, g, b = _rand_tensors(rng, shape, (feat,), (feat,))

    def f(x_, g_, b_):
        y = T.normalize(x_, kind, g_, b_)
        return T.tsum(T.mul(y, y))

    assert grad_check(f, [x, g, b]) < 1e-4


class TestGraphAndDeterminism:
    def test_forward_deterministic(self):
        rng = np.random.default_rng(8)
        x = t64(rng.normal(size=(1, 3, 20)))
        w = t64(rng.normal(size=(4, 3, 3)))
        y1 = T.conv1d(x, w, stride=2).data.copy()
        y2 = T.conv1d(x, w, stride=2).data
        assert np.array_equal(y1, y2)

    def test_replay_bit_identical(self):
        rng = np.random.default_rng(9)
        x = t64(rng.normal(size=(4, 5)))
        w = t64(rng.normal(size=(5, 3)))
        y = T.softmax(T.matmul(x, w))
        loss = T.tsum(T.gelu(y))
        before = loss.data.copy()
        g = Graph.trace(loss)
        replayed = g.replay()
        assert np.array_equal(before, replayed)

    def test_index_select_accumulates_repeats(self):
        x = t64(np.arange(4.0).reshape(4, 1))
        y = T.index_select(x, [1, 1, 2], axis=0)
        backward(T.tsum(y))
        np.testing.assert_allclose(x.grad[:, 0], [0.0, 2.0, 1.0, 0.0])

    def test_take_along_grad(self):
        rng = np.random.default_rng(12)
        x = t64(rng.normal(size=(2, 4, 3)))
        idx = rng.integers(0, 4, size=(2, 5, 3))

        def f(x_):
            return T.tsum(T.mul(y := T.take_along(x_, idx, axis=1), y))

        assert grad_check(f, [x]) < 1e-6


@settings(max_examples=30, deadline=None)
@given(
    tlen=st.integers(min_value=1, max_value=40),
    k=st.integers(min_value=1, max_value=10),
    s=st.integers(min_value=1, max_value=5),
    p=st.integers(min_value=0, max_value=5),
)
def test_conv1d_length_property(tlen, k, s, p):
    if tlen + 2 * p < k:
        return
    x = Tensor(np.zeros((1, 1, tlen)))
    w = Tensor(np.zeros((1, 1, k)))
    expected = (tlen + 2 * p - k) // s + 1
    if expected < 1:
        with pytest.raises(ShapeError):
            T.conv1d(x, w, stride=s, padding=p)
    else:
        assert T.conv1d(x, w, stride=s, padding=p).shape[-1] == expected


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=20), st.integers(min_value=1, max_value=6),
       st.integers(min_value=1, max_value=6))
def test_conv_transpose_length_property(tlen, k, s):
    x = Tensor(np.zeros((1, 2, tlen)))
    w = Tensor(np.zeros((2, 3, k)))
    assert T.conv_transpose1d(x, w, stride=s).shape[-1] == (tlen - 1) * s + k
