import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tppgen.autodiff import ParamStore, Value, finite_diff_check
from tppgen.marks import MarkHead, cross_entropy, mark_probs, total_loss


def test_probability_examples():
    np.testing.assert_allclose(mark_probs([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(mark_probs([math.log(3), 0.0]), [0.75, 0.25], rtol=1e-15)
    np.testing.assert_array_equal(mark_probs([[4.2]]), [[1.0]])


def test_total_loss_examples():
    assert total_loss(0.0, np.full(3, 1 / 3), 1).data == pytest.approx(math.log(3))
    assert total_loss(2.5, np.array([0.0, 1.0]), 1).data == pytest.approx(2.5)


finite = st.floats(-30, 30, allow_nan=False)


@given(arrays(np.float64, (4, 5), elements=finite), st.floats(-100, 100))
def test_softmax_shift_invariance(logits, c):
    np.testing.assert_allclose(mark_probs(logits + c), mark_probs(logits), atol=1e-12)


@given(arrays(np.float64, (6, 4), elements=finite), arrays(np.int64, 6, elements=st.integers(0, 3)))
def test_cross_entropy_nonnegative(logits, marks):
    ce = cross_entropy(Value(logits), marks).data
    assert np.all(ce >= 0)
    p = mark_probs(logits)[np.arange(6), marks]
    np.testing.assert_allclose(ce, -np.log(p), rtol=1e-9, atol=1e-12)


def test_cross_entropy_zero_only_for_certain_class():
    ce = cross_entropy(Value(np.array([[800.0, 0.0, 0.0], [0.0, 0.1, 0.0]])), np.array([0, 1])).data
    assert ce[0] == 0.0 and ce[1] > 0


def test_head_shapes_and_gradients(rng):
    params = ParamStore()
    head = MarkHead(params, 6, 4, rng)
    h = rng.normal(size=(5, 6))
    p = head.probs(h)
    assert p.shape == (5, 4)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    marks = rng.integers(0, 4, size=5)
    rep = finite_diff_check(lambda: cross_entropy(head.logits(h), marks).sum(), params)
    assert all(v["passed"] for v in rep.values()), rep
