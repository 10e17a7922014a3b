import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icnt import ops
from icnt.gradcheck import grad_check
from icnt.tensor import Tape, Tensor


def naive_conv(x, w, b, stride, pad, groups):
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    opg = cout // groups
    for b_ in range(n):
        for o in range(cout):
            g = o // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cpg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b_, g * cpg + c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b_, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def test_conv_sum_of_ones():
    y = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert y.shape == (1, 1, 1, 1)
    assert y.item() == 9.0


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 6)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1
    y = ops.conv2d(Tensor(x), Tensor(k), padding=1)
    np.testing.assert_array_equal(y.data, x)


def test_conv_depthwise_matches_loop(rng):
    x = rng.standard_normal((2, 4, 5, 5))
    w = rng.standard_normal((4, 1, 3, 3))
    b = rng.standard_normal(4)
    y = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1, groups=4)
    np.testing.assert_allclose(y.data, naive_conv(x, w, b, 1, 1, 4), rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 4),
    c=st.integers(1, 8),
    hw=st.integers(1, 16),
    k=st.sampled_from([1, 3, 7]),
    seed=st.integers(0, 2**32 - 1),
)
def test_depthwise_f32_vs_oracle(n, c, hw, k, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, hw, hw)).astype(np.float32)
    w = r.standard_normal((c, 1, k, k)).astype(np.float32)
    y = ops.conv2d(Tensor(x), Tensor(w), None, 1, k // 2, groups=c)
    ref = naive_conv(x.astype(np.float64), w.astype(np.float64), None, 1, k // 2, c)
    scale = np.abs(x).max() * np.abs(w).sum(axis=(1, 2, 3)).max()
    np.testing.assert_allclose(y.data, ref, rtol=1e-6, atol=1e-6 * scale)


@settings(max_examples=20, deadline=None)
@given(
    groups=st.sampled_from([1, 2]),
    stride=st.integers(1, 3),
    pad=st.integers(0, 2),
    k=st.integers(1, 4),
    seed=st.integers(0, 2**32 - 1),
)
def test_dense_and_grouped_vs_oracle(groups, stride, pad, k, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 4, 7, 6))
    w = r.standard_normal((6, 4 // groups, k, k))
    b = r.standard_normal(6)
    y = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, groups)
    np.testing.assert_allclose(y.data, naive_conv(x, w, b, stride, pad, groups), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize(
    "xs, ws, kw, msg",
    [
        ((1, 3, 4, 4), (2, 2, 3, 3), {}, "input channels"),
        ((1, 4, 4, 4), (3, 2, 3, 3), {"groups": 2}, "output channels 3"),
        ((1, 3, 4, 4), (2, 3, 3, 3), {"groups": 2}, "divisible by groups"),
        ((1, 1, 2, 2), (1, 1, 3, 3), {}, "kernel"),
        ((3, 4, 4), (1, 1, 3, 3), {}, "N x C x H x W"),
    ],
)
def test_conv_shape_errors(xs, ws, kw, msg):
    with pytest.raises(ValueError, match=msg):
        ops.conv2d(Tensor(np.zeros(xs)), Tensor(np.zeros(ws)), **kw)


def test_linear_examples():
    x = Tensor([[1.0, 2.0]])
    np.testing.assert_array_equal(ops.linear(x, Tensor([[3.0, 4.0], [5.0, 6.0]]), Tensor([0.0, 0.0])).data, [[11, 17]])
    y = Tensor(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(ops.linear(y, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, y.data)
    z = ops.linear(y, Tensor(np.zeros((2, 2))), Tensor([1.0, 2.0]))
    np.testing.assert_array_equal(z.data, [[1, 2]] * 3)
    with pytest.raises(ValueError, match="Din"):
        ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_layer_norm_examples(rng):
    out = ops.layer_norm(Tensor(np.full((3, 4), 5.0)), Tensor(np.ones(4)), Tensor(np.full(4, 0.7)))
    np.testing.assert_allclose(out.data, 0.7, atol=1e-7)
    out = ops.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)
    x = rng.standard_normal((5, 16)) * 3 + 2
    out = ops.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-6
    assert np.abs(out.var(axis=-1) - 1).max() <= 1e-4
    with pytest.raises(ValueError):
        ops.layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError, match="eps"):
        ops.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=0)


def test_activation_values():
    assert ops.relu(Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]
    assert ops.sigmoid(Tensor([0.0])).item() == 0.5
    # sign-split form stays finite at extremes
    s = ops.sigmoid(Tensor([-800.0, 800.0], dtype=np.float64)).data
    assert s.tolist() == [0.0, 1.0]
    # x * Phi(x) at 1: Phi(1) = 0.841344746...
    assert ops.gelu(Tensor([1.0], dtype=np.float64)).item() == pytest.approx(0.8413447460685429, abs=1e-15)
    with pytest.raises(ValueError, match="unknown activation"):
        ops.activation(Tensor([1.0]), "tanh")


@pytest.mark.parametrize("x0", [-1.0, 0.0, 1.0])
def test_gelu_grad(x0):
    assert grad_check(ops.gelu, [Tensor(np.array([x0]))]) <= 1e-6


def test_pool_examples():
    m = Tensor(np.arange(1.0, 5.0).reshape(1, 1, 2, 2))
    assert ops.global_avg_pool(m).item() == 2.5
    assert ops.global_max_pool(m).item() == 4.0
    c = Tensor(np.full((2, 3, 4, 4), 1.5))
    np.testing.assert_array_equal(ops.global_avg_pool(c).data, ops.global_max_pool(c).data)
    with pytest.raises(ValueError, match="empty spatial"):
        ops.global_avg_pool(Tensor(np.zeros((1, 1, 0, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gap_le_gmp(seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((2, 3, 4, 5)))
    assert (ops.global_avg_pool(x).data <= ops.global_max_pool(x).data).all()


def test_gmp_tie_routes_to_first_argmax():
    x = Tensor(np.array([[[[1.0, 5.0], [5.0, 0.0]]]]), requires_grad=True)
    with Tape() as tape:
        y = ops.global_max_pool(x)
        tape.backward(y, np.array([[2.0]], dtype=np.float32))
    assert x.grad.tolist() == [[[[0.0, 2.0], [0.0, 0.0]]]]
    assert x.grad.sum() == 2.0


def test_concat():
    out = ops.concat_channels(Tensor([[1.0, 2.0]]), Tensor([[3.0]]))
    assert out.data.tolist() == [[1.0, 2.0, 3.0]]
    x = Tensor(np.ones((2, 3)))
    np.testing.assert_array_equal(ops.concat_channels(x, Tensor(np.zeros((2, 0)))).data, x.data)
    with pytest.raises(ValueError, match="batch sizes"):
        ops.concat_channels(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1))))


def test_concat_backward_splits_exactly(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    g = rng.standard_normal((2, 5)).astype(np.float32)
    with Tape() as tape:
        tape.backward(ops.concat_channels(a, b), g)
    np.testing.assert_array_equal(np.concatenate([a.grad, b.grad], axis=1), g)


def test_dropout():
    x = Tensor(np.ones(100_000))
    np.testing.assert_array_equal(ops.dropout(x, 0.3, False, None).data, x.data)
    for training in (True, False):
        np.testing.assert_array_equal(ops.dropout(x, 0.0, training, np.random.default_rng(0)).data, x.data)
    y1 = ops.dropout(x, 0.3, True, np.random.default_rng(9)).data
    y2 = ops.dropout(x, 0.3, True, np.random.default_rng(9)).data
    np.testing.assert_array_equal(y1, y2)
    # survivors are 1/0.7, mean 1, per-element sd sqrt(0.3/0.7)
    se = np.sqrt(0.3 / 0.7) / np.sqrt(x.data.size)
    assert abs(y1.mean() - 1.0) <= 3 * se
    assert set(np.unique(y1).round(6)) == {0.0, round(1 / 0.7, 6)}
    with pytest.raises(ValueError):
        ops.dropout(x, 1.0, True, np.random.default_rng(0))


def test_max_pool2d(rng):
    x = rng.standard_normal((1, 2, 4, 6))
    y = ops.max_pool2d(Tensor(x)).data
    np.testing.assert_array_equal(y, x.reshape(1, 2, 2, 2, 3, 2).max(axis=(3, 5)))
    with pytest.raises(ValueError, match="divisible"):
        ops.max_pool2d(Tensor(np.zeros((1, 1, 3, 3))))


def test_tensor_invariants():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32 and t.data.flags.c_contiguous
    with pytest.raises(ValueError):
        t.accumulate_grad(np.zeros(4))
    t.accumulate_grad(np.ones(3, dtype=np.float64))
    assert t.grad.dtype == np.float32


def test_tape_requires_seed_for_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape, pytest.raises(ValueError):
        tape.backward(ops.relu(x))


def test_tape_accumulates_shared_input():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward(ops.sum_all(ops.mul(x, x)))
    assert x.grad.tolist() == [6.0]


def test_ops_outside_tape_record_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ops.scale(x, 2.0)
    assert x.grad is None and y.data.tolist() == [2.0, 2.0, 2.0]
