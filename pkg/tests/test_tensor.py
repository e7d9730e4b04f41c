import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import special

from clops import tensor as T
from clops.nn import FeedForward, MultiHeadAttention, attention
from clops.tensor import NumericError, Tensor

finite = st.floats(-50, 50, allow_nan=False, width=64)


def t64(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# -- forward examples ---------------------------------------------------------

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(b)).data, b)


def test_matmul_row_by_column():
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_zero():
    out = Tensor(np.zeros((3, 2))) @ Tensor(np.random.default_rng(0).normal(size=(2, 5)))
    assert not out.data.any()


def test_matmul_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("x, expected", [([0.0, 0.0], [0.5, 0.5]), ([1000.0, 1000.0], [0.5, 0.5]),
                                         ([0.0, math.log(3.0)], [0.25, 0.75])])
def test_softmax_examples(x, expected):
    np.testing.assert_allclose(T.softmax(t64(x)).data, expected, atol=1e-12)


def test_layer_norm_examples():
    gain, bias = t64(np.ones(2)), t64(np.zeros(2))
    assert np.allclose(T.layer_norm(t64([[4.0, 4.0]]), gain, bias).data, 0.0)
    np.testing.assert_allclose(T.layer_norm(t64([[1.0, -1.0]]), gain, bias, eps=1e-12).data, [[1.0, -1.0]], atol=1e-10)
    out = T.layer_norm(t64([[3.0, -7.0]]), t64(np.zeros(2)), t64([0.3, -2.0]))
    np.testing.assert_array_equal(out.data, [[0.3, -2.0]])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_gelu_examples(dtype):
    x = Tensor(np.array([0.0, 1.0, -10.0]), dtype=dtype)
    out = T.gelu(x).data
    assert out[0] == 0
    assert abs(out[1] - 0.841345) < 1e-5
    assert abs(out[2]) < 1e-8


def test_gelu_float32_tracks_exact_erf():
    x = np.linspace(-8, 8, 20001)
    exact = x * 0.5 * (1 + special.erf(x / math.sqrt(2)))
    approx = T.gelu(Tensor(x, dtype=np.float32)).data.astype(np.float64)
    assert np.max(np.abs(approx - exact)) < 2e-6


# -- backward ---------------------------------------------------------------------

def test_backward_square():
    x = t64([3.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_sum_is_ones():
    x = t64(np.random.default_rng(1).normal(size=(3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_detached_has_no_grad():
    x = t64([1.0, 2.0])
    d = x.detach()
    (d * 2.0 + x).sum().backward()
    assert d.grad is None
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_rejects_non_scalar_and_nan():
    x = t64([1.0, 2.0])
    with pytest.raises(ValueError):
        (x * 2.0).backward()
    with pytest.raises(NumericError):
        with np.errstate(invalid="ignore"):
            loss = T.log(x - 5.0).sum()
        loss.backward()


def test_no_grad_builds_no_graph():
    x = t64([1.0])
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_precision_context_restores():
    before = T.get_default_dtype()
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert T.get_default_dtype() is before


# -- finite-difference harness ---------------------------------------------------

def test_fd_square():
    x = t64([1.0, 2.0, 3.0])
    assert T.finite_diff_check(lambda: (x * x).sum(), x) < 1e-6


def test_fd_linear():
    x = t64([1.0, -2.0, 0.5])
    w = np.array([2.0, 3.0, -1.0])
    assert T.finite_diff_check(lambda: (x * w).sum(), x) < 1e-10


@pytest.mark.parametrize("op", ["softmax", "gelu", "layer_norm", "linear", "lgamma", "softplus",
                                "cumsum", "concat", "stack", "getitem", "log1p", "tanh", "where"])
def test_fd_ops(op):
    rng = np.random.default_rng(3)
    with T.precision(np.float64):
        x = t64(rng.normal(size=(3, 4)))
        w = t64(rng.normal(size=(4, 5)))
        b = t64(rng.normal(size=5))
        gain, bias = t64(rng.normal(size=4)), t64(rng.normal(size=4))
        r = rng.normal(size=(3, 4))
        fns = {
            "softmax": lambda: (T.softmax(x, bias=np.where(r > 1, -1e9, 0.0)) * r).sum(),
            "gelu": lambda: (T.gelu(x) * r).sum(),
            "layer_norm": lambda: (T.layer_norm(x, gain, bias) * r).sum(),
            "linear": lambda: (T.linear(x, w, b) ** 2).sum(),
            "lgamma": lambda: (T.lgamma(T.softplus(x) + 1.0) * r).sum(),
            "softplus": lambda: (T.softplus(x) * r).sum(),
            "cumsum": lambda: (T.cumsum(x, axis=-1) * r).sum(),
            "concat": lambda: (T.concat([x, x * 2.0], axis=0) ** 2).sum(),
            "stack": lambda: (T.stack([x, x * x], axis=1) ** 2).sum(),
            "getitem": lambda: (x[1:, ::2] ** 3).sum(),
            "log1p": lambda: (T.log1p(x * x) * r).sum(),
            "tanh": lambda: (T.tanh(x) * r).sum(),
            "where": lambda: (T.where(r > 0, x, x * x) * r).sum(),
        }
        params = [x, w, b] if op == "linear" else [x, gain, bias] if op == "layer_norm" else [x]
        assert T.finite_diff_check(fns[op], params) < 1e-6


def test_fd_attention_and_feedforward_blocks():
    rng = np.random.default_rng(5)
    with T.precision(np.float64):
        mha = MultiHeadAttention(8, 2, 4, rng, rope=True)
        ff = FeedForward(8, 16, rng)
        for p in mha.parameters() + ff.parameters():
            p.data += rng.normal(0, 0.3, p.shape)
        x = t64(rng.normal(size=(2, 5, 8)))
        mask = np.tril(np.ones((5, 5), bool))
        f = lambda: (ff(mha(x, mask=mask, q_pos=np.arange(5))) ** 2).sum()  # noqa: E731
        assert T.finite_diff_check(f, [x] + mha.parameters() + ff.parameters()) < 1e-4


# -- properties ----------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=finite))
def test_layer_norm_zero_mean(x):
    d = x.shape[-1]
    out = T.layer_norm(Tensor(x, dtype=np.float64), t64(np.ones(d)), t64(np.zeros(d))).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite),
       arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite))
def test_add_mul_broadcast_grads(a, b):
    if a.shape != b.shape:
        b = np.resize(b, a.shape)
    x, y = t64(a), t64(b)
    (x * y + x).sum().backward()
    np.testing.assert_allclose(x.grad, b + 1.0)
    np.testing.assert_allclose(y.grad, a)


def test_deterministic_repeat():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 6, 8)).astype(np.float32)
    mha = MultiHeadAttention(8, 2, 4, np.random.default_rng(0))
    a = mha(Tensor(x)).data
    b = mha(Tensor(x)).data
    assert a.tobytes() == b.tobytes()


def test_attention_examples():
    rng = np.random.default_rng(2)
    v = t64(rng.normal(size=(1, 1, 3)))
    out = attention(t64(rng.normal(size=(1, 1, 3))), t64(rng.normal(size=(1, 1, 3))), v)
    np.testing.assert_allclose(out.data, v.data)
    v = t64(rng.normal(size=(1, 4, 3)))
    q = t64(np.zeros((1, 4, 3)))
    out = attention(q, t64(rng.normal(size=(1, 4, 3))), v)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.data.mean(1, keepdims=True), (1, 4, 3)))
    mask = np.tril(np.ones((4, 4), bool))
    out = attention(t64(rng.normal(size=(1, 4, 3))), t64(rng.normal(size=(1, 4, 3))), v, mask)
    np.testing.assert_allclose(out.data[0, 0], v.data[0, 0])
