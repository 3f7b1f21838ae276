import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from osfi.errors import NumericalError
from osfi.optim import AdamState, adam_step, cosine_lr


def test_schedule_endpoints():
    assert cosine_lr(1e-3, 0, 100) == 1e-3
    assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)


@given(st.integers(1, 1000), st.data())
def test_schedule_monotone_and_bounded(T, data):
    a = data.draw(st.integers(0, T))
    b = data.draw(st.integers(a, T))
    assert 0.0 <= cosine_lr(1.0, b, T) <= cosine_lr(1.0, a, T) <= 1.0


def test_first_step_closed_form():
    params = {"w": np.zeros(1)}
    adam_step(params, {"w": np.ones(1)}, AdamState(), 0.01, 0, 10)
    # m_hat = 1, v_hat = 1: the step is lr / (1 + eps)
    assert params["w"][0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)


def test_two_steps_match_hand_recursion():
    params = {"w": np.array([0.5])}
    state = AdamState()
    g1, g2, lr, T = 2.0, -1.0, 0.1, 4
    adam_step(params, {"w": np.array([g1])}, state, lr, 0, T)
    adam_step(params, {"w": np.array([g2])}, state, lr, 1, T)
    m1, v1 = 0.1 * g1, 0.001 * g1 ** 2
    w = 0.5 - lr * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + 1e-8)
    m2, v2 = 0.9 * m1 + 0.1 * g2, 0.999 * v1 + 0.001 * g2 ** 2
    lr2 = lr * 0.5 * (1 + math.cos(math.pi / T))
    w -= lr2 * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert params["w"][0] == pytest.approx(w, rel=1e-12)


def test_final_step_leaves_parameters():
    params = {"w": np.array([1.0, 2.0])}
    adam_step(params, {"w": np.array([3.0, 4.0])}, AdamState(), 0.1, 5, 5)
    np.testing.assert_array_equal(params["w"], [1.0, 2.0])


def test_only_trainable_names_change():
    params = {"a": np.zeros(2), "b": np.zeros(2)}
    adam_step(params, {"a": np.ones(2), "b": np.ones(2)}, AdamState(), 0.1, 0, 3, trainable={"a"})
    assert np.all(params["a"] != 0) and np.all(params["b"] == 0)


def test_non_finite_gradient_names_parameter():
    params = {"layer3": np.zeros(2)}
    with pytest.raises(NumericalError, match="layer3"):
        adam_step(params, {"layer3": np.array([np.nan, 0.0])}, AdamState(), 0.1, 0, 3)
    with pytest.raises(ValueError):
        adam_step(params, {"layer3": np.zeros(2)}, AdamState(), 0.1, 4, 3)
