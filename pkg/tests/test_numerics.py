import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from explicitlm import numerics as nm
from explicitlm.errors import ContractError, DegenerateEntryError, DimensionError, NumericError

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


def rand(rng, *shape):
    return nm.Tensor(rng.uniform(-2, 2, size=shape))


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 4.0]])
    out = nm.matmul(nm.Tensor(np.eye(2)), nm.Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_case():
    out = nm.matmul(nm.Tensor([[1, 2], [3, 4]]), nm.Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_grad_of_sum_is_b_transpose_broadcast():
    rng = np.random.default_rng(0)
    a = nm.parameter(rng.normal(size=(3, 4)))
    b = nm.Tensor(rng.normal(size=(4, 5)))
    nm.matmul(a, b).sum().backward()
    expected = np.ones((3, 5)) @ b.data.T
    np.testing.assert_allclose(a.grad, expected)
    err = nm.finite_difference_check(lambda x: nm.matmul(x, b).sum(), nm.Tensor(a.data.copy()))
    assert err < 1e-6


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nm.matmul(nm.Tensor(np.ones((2, 3))), nm.Tensor(np.ones((2, 3))))


# ----------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(nm.softmax(nm.Tensor([0.0, 0, 0])).data, [1 / 3] * 3)


def test_softmax_log_closed_form():
    out = nm.softmax(nm.Tensor(np.log([1.0, 2.0, 3.0]))).data
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalised(x, c):
    p = nm.softmax(nm.Tensor(x)).data
    q = nm.softmax(nm.Tensor(x + c)).data
    assert abs(p.sum() - 1) < 1e-9
    assert (p > 0).all()
    np.testing.assert_allclose(p, q, atol=1e-12)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        nm.softmax(nm.Tensor([0.0, math.nan]))


def test_softmax_rows_sum_to_one_large_logits():
    x = nm.Tensor(np.array([[1000.0, 999.0, -1000.0], [0.1, 0.2, 0.3]]))
    np.testing.assert_allclose(nm.softmax(x, axis=-1).data.sum(-1), 1.0, atol=1e-12)


# ------------------------------------------------------------------ cosine


def test_cosine_cases():
    v = nm.Tensor([0.3, -1.2, 2.0])
    assert nm.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-12)
    assert nm.cosine_similarity(v, -v).item() == pytest.approx(-1.0, abs=1e-12)
    assert nm.cosine_similarity(nm.Tensor([1.0, 0]), nm.Tensor([1.0, 1])).item() == pytest.approx(
        1 / math.sqrt(2), abs=1e-12
    )


def test_cosine_zero_norm_is_degenerate():
    with pytest.raises(DegenerateEntryError):
        nm.cosine_similarity(nm.Tensor([0.0, 0.0]), nm.Tensor([1.0, 0.0]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_cosine_bounded(a, b):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    c = nm.cosine_similarity(nm.Tensor(a), nm.Tensor(b)).item()
    assert -1 - 1e-12 <= c <= 1 + 1e-12


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = nm.parameter(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_dot_product():
    x = nm.parameter([1.0, 2.0, 3.0])
    y = nm.parameter([-1.0, 0.5, 4.0])
    (x * y).sum().backward()
    np.testing.assert_array_equal(x.grad, y.data)
    np.testing.assert_array_equal(y.grad, x.data)


def test_backward_requires_scalar_root():
    x = nm.parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_backward_twice_accumulates():
    x = nm.parameter([1.0, -2.0])
    out = (x * x).sum()
    out.backward()
    out.backward()
    np.testing.assert_array_equal(x.grad, 2 * (2 * x.data))
    x.zero_grad()
    out.backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_shared_subexpression_visits_once():
    x = nm.parameter([2.0])
    y = x * x
    z = (y + y).sum()
    z.backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_builds_no_graph():
    x = nm.parameter([1.0])
    with nm.no_grad():
        y = x * 3
    assert not y.requires_grad


# ------------------------------------------------------ finite differences


def test_fd_sum_of_squares():
    x = nm.Tensor([1.0, 2.0])
    assert nm.finite_difference_check(lambda t: (t * t).sum(), x) < 1e-6
    x.requires_grad = True
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_fd_constant_function():
    x = nm.Tensor([1.0, 2.0])
    assert nm.finite_difference_check(lambda t: nm.Tensor(3.0) + t.sum() * 0.0, x) == 0.0


UNARY = {
    "exp": nm.exp,
    "tanh": nm.tanh,
    "sigmoid": nm.sigmoid,
    "gelu": nm.gelu,
    "square": lambda t: t * t,
    "softmax": lambda t: nm.softmax(t, axis=-1) * nm.Tensor(np.arange(1.0, 5.0)),
    "log_softmax": lambda t: nm.log_softmax(t, axis=-1) * nm.Tensor(np.arange(1.0, 5.0)),
    "l2_normalize": lambda t: nm.l2_normalize(t) * nm.Tensor(np.arange(1.0, 5.0)),
    "transpose": lambda t: nm.transpose(t) @ nm.Tensor(np.ones((3, 2))),
    "getitem": lambda t: t[1:, ::2] * 3.0,
    "fancy_index": lambda t: t[np.array([0, 2, 2])] * nm.Tensor(np.arange(4.0)),
    "take_rows": lambda t: nm.take_rows(t, np.array([[0, 1], [2, 0]])),
    "mean_axis": lambda t: t.mean(axis=0) * nm.Tensor([1.0, -2.0, 3.0, 0.5]),
    "concat": lambda t: nm.concat([t, t * 2.0], axis=-1) ** 2,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    op = UNARY[name]
    weights = nm.Tensor(rng.uniform(-1, 1, size=op(rand(rng, 3, 4)).shape))
    x = rand(rng, 3, 4)
    assert nm.finite_difference_check(lambda t: (op(t) * weights).sum(), x) < 1e-4


BINARY = {
    "add_broadcast": lambda a, b: a + b[0],
    "sub": lambda a, b: a - b,
    "mul_broadcast": lambda a, b: a * b[:, :1],
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ nm.transpose(b),
    "cosine": lambda a, b: nm.cosine_similarity(a, b, axis=-1),
    "layer_norm": lambda a, b: nm.layer_norm(a, b[0], b[1]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    op = BINARY[name]
    a, b = rand(rng, 3, 4), rand(rng, 3, 4)
    weights = nm.Tensor(rng.uniform(-1, 1, size=op(a, b).shape))
    assert nm.finite_difference_check(lambda t: (op(t, b) * weights).sum(), a) < 1e-4
    assert nm.finite_difference_check(lambda t: (op(a, t) * weights).sum(), b) < 1e-4


def test_batched_matmul_grad():
    rng = np.random.default_rng(3)
    a, b = rand(rng, 2, 3, 4), rand(rng, 2, 4, 2)
    assert nm.finite_difference_check(lambda t: (t @ b).sum(), a) < 1e-4
    assert nm.finite_difference_check(lambda t: ((a @ t) ** 2).sum(), b) < 1e-4


def test_composed_graph():
    rng = np.random.default_rng(11)
    w1, w2 = rand(rng, 4, 5), rand(rng, 5, 3)
    x = rand(rng, 2, 4)

    def f(t):
        h = nm.gelu(x @ t)
        return nm.log_softmax(h @ w2, axis=-1)[:, 1].sum() + (nm.sigmoid(h) * h).mean()

    assert nm.finite_difference_check(f, w1) < 1e-4
