import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from explicitlm import losses as L
from explicitlm import numerics as nm
from explicitlm.errors import ContractError, DegenerateEntryError, DivergenceError


def ce_oracle(logits, targets):
    """Per-position softmax cross-entropy with plain Python floats."""
    total = 0.0
    for row, t in zip(logits, targets):
        m = max(row)
        z = sum(math.exp(v - m) for v in row)
        total += -(row[t] - m - math.log(z))
    return total / len(targets)


# ---------------------------------------------------------------- lm loss


def test_lm_loss_perfect_prediction_is_zero():
    logits = np.full((3, 4), -1e4)
    logits[[0, 1, 2], [2, 0, 3]] = 1e4
    assert L.lm_loss(nm.Tensor(logits), [2, 0, 3]).item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("v", [2, 7, 50])
def test_lm_loss_uniform_is_log_vocab(v):
    assert L.lm_loss(nm.Tensor(np.zeros((5, v))), np.arange(5) % v).item() == pytest.approx(math.log(v), abs=1e-9)


def test_lm_loss_hand_case():
    logits = [[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]]
    assert L.lm_loss(nm.Tensor(logits), [0, 2]).item() == pytest.approx(ce_oracle(logits, [0, 2]), abs=1e-12)


def test_lm_loss_batch_masks_and_normalises_per_sequence():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 3, 5))
    targets = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1, 1, 1], [1, 0, 0]], bool)
    expected = 0.5 * (ce_oracle(logits[0].tolist(), targets[0]) + ce_oracle(logits[1, :1].tolist(), targets[1, :1]))
    assert L.lm_loss(nm.Tensor(logits), targets, mask).item() == pytest.approx(expected, abs=1e-12)


def test_lm_loss_empty_sequence_rejected():
    with pytest.raises(ContractError):
        L.lm_loss(nm.Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.integers(1, 6), v=st.integers(2, 9))
def test_property_lm_loss_matches_oracle(seed, t, v):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3, size=(t, v))
    targets = rng.integers(0, v, size=t)
    got = L.lm_loss(nm.Tensor(logits), targets).item()
    assert got == pytest.approx(ce_oracle(logits.tolist(), targets), abs=1e-9)
    assert got >= 0


# --------------------------------------------------------- relevance loss


def test_relevance_parallel_single_candidate():
    q = nm.Tensor([1.0, 2.0, -1.0])
    assert L.relevance_loss(q, nm.Tensor([[2.0, 4.0, -2.0]]), nm.Tensor([1.0])).item() == pytest.approx(-1, abs=1e-9)


def test_relevance_orthogonal_is_zero():
    q = nm.Tensor([1.0, 0.0, 0.0])
    cand = nm.Tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 3.0]])
    assert L.relevance_loss(q, cand, nm.Tensor([0.4, 0.6])).item() == pytest.approx(0.0, abs=1e-12)


def test_relevance_hand_case():
    q = nm.Tensor([1.0, 0.0])
    cand = nm.Tensor([[2.0, 0.0], [-1.0, 0.0]])
    assert L.relevance_loss(q, cand, nm.Tensor([0.75, 0.25])).item() == pytest.approx(-0.5, abs=1e-12)


def test_relevance_zero_query_degenerate():
    with pytest.raises(DegenerateEntryError):
        L.relevance_loss(nm.Tensor([0.0, 0.0]), nm.Tensor([[1.0, 0.0]]), nm.Tensor([1.0]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 100))
def test_property_relevance_query_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    q, cand = rng.normal(size=(2, 4)), rng.normal(size=(2, 3, 4))
    p = nm.softmax(nm.Tensor(rng.normal(size=(2, 3))))
    a = L.relevance_loss(nm.Tensor(q), nm.Tensor(cand), p).item()
    b = L.relevance_loss(nm.Tensor(q * scale), nm.Tensor(cand), p).item()
    assert a == pytest.approx(b, abs=1e-12)
    assert -1 - 1e-12 <= a <= 1 + 1e-12


# --------------------------------------------------------- diversity loss


def test_diversity_identical_candidates():
    assert L.diversity_loss(nm.Tensor(np.tile([[1.0, -2.0, 0.5]], (4, 1)))).item() == pytest.approx(1, abs=1e-9)


def test_diversity_orthogonal_candidates():
    assert L.diversity_loss(nm.Tensor(np.eye(3) * [1.0, 2.0, 5.0])).item() == pytest.approx(0.0, abs=1e-12)


def test_diversity_pair_cosine_half():
    cand = nm.Tensor([[1.0, 0.0], [0.5, math.sqrt(3) / 2]])
    assert L.diversity_loss(cand).item() == pytest.approx(0.5, abs=1e-12)


def test_diversity_needs_two():
    with pytest.raises(ContractError):
        L.diversity_loss(nm.Tensor([[1.0, 2.0]]))


def test_diversity_ordered_pair_formula():
    rng = np.random.default_rng(1)
    e = rng.normal(size=(5, 3))
    u = e / np.linalg.norm(e, axis=1, keepdims=True)
    k = len(e)
    ordered = sum(u[i] @ u[j] for i in range(k) for j in range(k) if i != j)
    assert L.diversity_loss(nm.Tensor(e)).item() == pytest.approx(ordered / (k * (k - 1)), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 100))
def test_property_diversity_rescale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(4, 3))
    e2 = e.copy()
    e2[int(rng.integers(4))] *= scale
    a, b = L.diversity_loss(nm.Tensor(e)).item(), L.diversity_loss(nm.Tensor(e2)).item()
    assert a == pytest.approx(b, abs=1e-12)
    assert -1 - 1e-12 <= a <= 1 + 1e-12


# ------------------------------------------------------------------ total


def test_total_worked_example():
    assert L.total_loss(1.0, -0.5, 0.2, 0.1, 0.01) == pytest.approx(0.952, abs=1e-15)


def test_total_zero_weights():
    assert L.total_loss(2.5, 7.0, -3.0, 0.0, 0.0) == 2.5


def test_total_nonfinite_raises_with_step():
    with pytest.raises(DivergenceError, match="step 12") as info:
        L.total_loss(float("nan"), 0.0, 0.0, 0.1, 0.01, step=12)
    assert info.value.step == 12


def test_report_matches_formula():
    rep = L.report(1.0, -0.5, 0.2, L.total_loss(1.0, -0.5, 0.2, 0.1, 0.01), 0.1, 0.01)
    assert rep.l_total == rep.l_ce + rep.lambda_sim * rep.l_sim + rep.lambda_div * rep.l_div
    assert set(rep.as_row()) == {"l_ce", "l_sim", "l_div", "l_total"}


def test_sim_gradient_linear_in_lambda():
    rng = np.random.default_rng(2)
    q0, cand = rng.normal(size=(3, 4)), nm.Tensor(rng.normal(size=(3, 5, 4)))
    p = nm.Tensor(np.full((3, 5), 0.2))

    def grad_at(lam):
        q = nm.parameter(q0.copy())
        L.total_loss(nm.Tensor(0.0), L.relevance_loss(q, cand, p), nm.Tensor(0.0), lam, 0.0).backward()
        return q.grad

    g1, g3 = grad_at(0.1), grad_at(0.3)
    np.testing.assert_allclose(g3, 3 * g1, rtol=1e-12)
    numeric = nm.numeric_grad(lambda q: L.relevance_loss(q, cand, p) * 0.1, nm.Tensor(q0.copy()))
    np.testing.assert_allclose(g1, numeric, atol=1e-8)


@pytest.mark.parametrize("which", ["lm", "sim", "div"])
def test_finite_difference_checks(which):
    rng = np.random.default_rng(3)
    if which == "lm":
        targets = rng.integers(0, 6, size=4)
        f, x = (lambda z: L.lm_loss(z, targets)), rng.normal(size=(4, 6))
    elif which == "sim":
        cand, p = nm.Tensor(rng.normal(size=(2, 3, 4))), nm.softmax(nm.Tensor(rng.normal(size=(2, 3))))
        f, x = (lambda z: L.relevance_loss(z, cand, p)), rng.normal(size=(2, 4))
    else:
        f, x = L.diversity_loss, rng.normal(size=(2, 3, 4))
    assert nm.finite_difference_check(f, nm.Tensor(x)) < 1e-4
