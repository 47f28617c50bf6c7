import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multialign import tensor as T
from multialign.tensor import (
    ContractError,
    DimensionError,
    DomainError,
    NumericError,
    SingularityError,
    Tensor,
)

floats = st.floats(-1, 1, allow_nan=False, width=64)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    m = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(m)).data, m)


def test_matmul_permutation():
    out = Tensor(np.array([[1.0, 2], [3, 4]])) @ Tensor(np.array([[0.0, 1], [1, 0]]))
    np.testing.assert_array_equal(out.data, [[2, 1], [4, 3]])


def test_matmul_gradcheck_4x4():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((4, 4))
    err = T.gradcheck(lambda L: ((L[0] @ L[1]) * Tensor(w)).sum(), [rng.standard_normal((4, 4)), rng.standard_normal((4, 4))])
    assert err < 1e-6


def test_matmul_gradient_rule():
    rng = np.random.default_rng(2)
    a, b, g = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
    la, lb = leaf(a), leaf(b)
    grads = T.backward(((la @ lb) * Tensor(g)).sum())
    np.testing.assert_allclose(grads[la], g @ b.T, rtol=1e-12)
    np.testing.assert_allclose(grads[lb], a.T @ g, rtol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_dtype_mismatch():
    with pytest.raises(Exception):
        Tensor(np.ones((2, 2), np.float32)) @ Tensor(np.ones((2, 2), np.float64))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=floats))
def test_matmul_identity_associativity(m):
    left = (Tensor(np.eye(3)) @ Tensor(m)) @ Tensor(np.eye(4))
    right = Tensor(np.eye(3)) @ (Tensor(m) @ Tensor(np.eye(4)))
    np.testing.assert_array_equal(left.data, m)
    np.testing.assert_array_equal(right.data, m)


# ---------------------------------------------------------------------------
# elementwise


def test_add_zero():
    x = np.random.default_rng(3).standard_normal((2, 3))
    np.testing.assert_array_equal(T.elementwise(Tensor(x), Tensor(np.zeros_like(x)), "add").data, x)


def test_div_self_is_one():
    x = np.random.default_rng(4).uniform(0.1, 2, (5, 3))
    np.testing.assert_array_equal(T.elementwise(Tensor(x), Tensor(x), "div").data, np.ones_like(x))


def test_broadcast_matches_scalar_loop():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal(3)
    out = T.elementwise(Tensor(a), Tensor(b), "add").data
    for i in range(2):
        for j in range(3):
            assert out[i, j] == a[i, j] + b[j]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=floats), arrays(np.float64, (3,), elements=floats))
def test_broadcast_equals_tiling(a, b):
    for op in ("add", "sub", "mul"):
        np.testing.assert_array_equal(
            T.elementwise(Tensor(a), Tensor(b), op).data,
            T.elementwise(Tensor(a), Tensor(np.tile(b, (4, 1))), op).data,
        )


def test_broadcast_gradient_sums_over_leading_axes():
    a, b = leaf(np.ones((4, 3))), leaf(np.arange(3.0))
    grads = T.backward((a * b).sum())
    np.testing.assert_array_equal(grads[b], [4.0, 4.0, 4.0])


def test_div_by_zero_is_singular():
    with pytest.raises(SingularityError):
        T.elementwise(Tensor(np.ones(3)), Tensor(np.array([1.0, 0.0, 2.0])), "div")


def test_div_subnormal_is_singular():
    with pytest.raises(SingularityError):
        T.div(Tensor(np.ones(1)), Tensor(np.array([1e-310])))


def test_unknown_elementwise_op():
    with pytest.raises(ValueError):
        T.elementwise(Tensor(np.ones(2)), Tensor(np.ones(2)), "pow")


# ---------------------------------------------------------------------------
# reductions and activations


def test_softmax_uniform():
    np.testing.assert_array_equal(T.activation(Tensor(np.full(4, 0.7)), "softmax").data, [0.25] * 4)


def test_silu_zero():
    assert T.activation(Tensor(np.zeros(1)), "silu").item() == 0.0


def test_layernorm_moments():
    x = np.random.default_rng(6).standard_normal((5, 16)) * 3 + 2
    y = T.activation(Tensor(x), "layernorm").data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-5)
    # eps = 1e-5 is added to the variance, so the output variance is v / (v + eps)
    v = x.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), v / (v + 1e-5), rtol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-5)


def test_log_domain():
    with pytest.raises(DomainError):
        T.activation(Tensor(np.array([1.0, 0.0])), "log")
    with pytest.raises(DomainError):
        T.log(Tensor(np.array([-1.0])))


def test_gelu_tanh_formula():
    x = np.linspace(-3, 3, 13)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-14, atol=1e-15)


def test_sigmoid_and_softplus_stable_at_extremes():
    x = np.array([-800.0, 0.0, 800.0])
    np.testing.assert_array_equal(T.sigmoid(Tensor(x)).data, [0.0, 0.5, 1.0])
    sp = T.softplus(Tensor(x)).data
    assert np.all(np.isfinite(sp)) and sp[0] == 0.0 and sp[2] == 800.0


def test_reductions():
    x = np.arange(6.0).reshape(2, 3)
    assert T.reduce(Tensor(x), "sum").item() == 15
    np.testing.assert_array_equal(T.reduce(Tensor(x), "mean", axis=0).data, [1.5, 2.5, 3.5])
    np.testing.assert_array_equal(T.reduce(Tensor(x), "max", axis=1).data, [2, 5])
    with pytest.raises(ValueError):
        T.reduce(Tensor(x), "median")


def test_activation_unknown():
    with pytest.raises(ValueError):
        T.activation(Tensor(np.ones(2)), "relu6")


# ---------------------------------------------------------------------------
# conv2d


def _conv_loop(x, k, stride, pad):
    b, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for n in range(b):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, ic, i * stride + u, j * stride + v] * k[oc, ic, u, v]
                    out[n, oc, i, j] = acc
    return out


def test_conv_1x1_identity():
    x = np.random.default_rng(7).standard_normal((2, 1, 4, 4))
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)


def test_conv_average_constant_interior():
    x = np.full((1, 1, 5, 5), 2.5)
    out = T.conv2d(Tensor(x), Tensor(np.full((1, 1, 3, 3), 1 / 9)), padding=1).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 2.5, rtol=1e-15)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(8)
    x, k = rng.standard_normal((1, 1, 5, 5)), rng.standard_normal((1, 1, 3, 3))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k)).data, _conv_loop(x, k, 1, 0), rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv_multichannel_loop_oracle(stride, pad):
    rng = np.random.default_rng(9)
    x, k = rng.standard_normal((2, 3, 6, 5)), rng.standard_normal((4, 3, 3, 3))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data, _conv_loop(x, k, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# ---------------------------------------------------------------------------
# svd_values


def test_svd_diag():
    np.testing.assert_allclose(T.svd_values(np.diag([3.0, 1.0])), [3, 1], rtol=1e-14)


def test_svd_rank_one():
    u, v = np.array([1.0, 2, 3, 4]), np.array([0.5, -1, 2])
    s = T.svd_values(np.outer(u, v))
    assert abs(s[0] - np.linalg.norm(u) * np.linalg.norm(v)) < 1e-10
    assert np.all(s[1:] < 1e-10)


def test_svd_frobenius_8x6():
    a = np.random.default_rng(10).standard_normal((8, 6))
    s = T.svd_values(a)
    assert abs((s**2).sum() - (a**2).sum()) / (a**2).sum() < 1e-8


def test_svd_matches_lapack():
    a = np.random.default_rng(11).standard_normal((20, 7))
    np.testing.assert_allclose(T.svd_values(a), np.linalg.svd(a, compute_uv=False), rtol=1e-10)


def test_svd_size_contract():
    with pytest.raises(ContractError):
        T.svd_values(np.zeros((1001, 1000)))


def test_svd_nonconvergence():
    a = np.random.default_rng(12).standard_normal((6, 6))
    with pytest.raises(NumericError):
        T.svd_values(a, max_sweeps=1)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=floats))
def test_svd_properties(a):
    s = T.svd_values(a)
    assert len(s) == min(a.shape)
    assert np.all(s >= 0)
    assert np.all(np.diff(s) <= 0)
    fro = (a**2).sum()
    assert abs((s**2).sum() - fro) <= 1e-8 * max(fro, 1e-300)


# ---------------------------------------------------------------------------
# backward and tape


def test_backward_sum_is_ones():
    x = leaf(np.random.default_rng(13).standard_normal((3, 2)))
    np.testing.assert_array_equal(T.backward(x.sum())[x], np.ones((3, 2)))


def test_backward_half_squared_norm():
    a = np.random.default_rng(14).standard_normal(5)
    x = leaf(a)
    np.testing.assert_allclose(T.backward((x * x).sum() * 0.5)[x], a, rtol=1e-15)


def test_backward_nonscalar():
    x = leaf(np.ones(3))
    with pytest.raises(ContractError):
        T.backward(x * 2.0)


def test_backward_clears_tape():
    x = leaf(np.ones(3))
    loss = (x * x).sum()
    assert len(T.current_tape()) > 0
    T.backward(loss)
    assert len(T.current_tape()) == 0


def test_tape_topological_order():
    T.current_tape().clear()
    x = leaf(np.ones(3))
    y = T.exp(x * 2.0)
    z = (y + x).sum()
    nodes = T.current_tape().nodes
    produced = {}
    for i, node in enumerate(nodes):
        for inp in node.inputs:
            if inp._node is not None:
                assert inp._node < i
        produced[id(node.out)] = i
    T.backward(z)


def test_backward_reused_subexpression_visited_once():
    a = np.array([0.3, -0.7])
    x = leaf(a)
    y = x * x
    loss = (y + y).sum()
    np.testing.assert_allclose(T.backward(loss)[x], 4 * a, rtol=1e-15)


def test_no_grad_records_nothing():
    T.current_tape().clear()
    x = leaf(np.ones(3))
    with T.no_grad():
        y = (x * x).sum()
    assert len(T.current_tape()) == 0
    assert y._node is None


def test_tape_is_thread_local():
    T.current_tape().clear()
    x = leaf(np.ones(2))
    _ = (x * x).sum()
    sizes = []
    t = threading.Thread(target=lambda: sizes.append(len(T.current_tape())))
    t.start()
    t.join()
    assert sizes == [0]
    T.current_tape().clear()


def test_tensor_invariants():
    t = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3).T)
    assert t.data.flags.c_contiguous
    assert t.data.size == np.prod(t.shape)
    assert Tensor(np.arange(3)).dtype == np.float64


def test_determinism_same_ops():
    def run():
        rng = np.random.default_rng(15)
        x = leaf(rng.standard_normal((4, 4)))
        w = Tensor(rng.standard_normal((4, 4)))
        loss = T.gelu(x @ w).sum()
        return loss.item(), T.backward(loss)[x]

    (a, ga), (b, gb) = run(), run()
    assert a == b
    np.testing.assert_array_equal(ga, gb)
