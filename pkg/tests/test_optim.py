import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ceapg.optim import AdamState, LrSchedule, adam_step, lr_at, sanitize_gradient


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Straight-line Adam, one coordinate at a time."""
    theta = [float(x) for x in theta]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    out = []
    for t, g in enumerate(grads, start=1):
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1.0 - b1) * g[i]
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
            mh = m[i] / (1.0 - b1 ** t)
            vh = v[i] / (1.0 - b2 ** t)
            theta[i] = theta[i] + lr * mh / (math.sqrt(vh) + eps)
        out.append(list(theta))
    return out


def test_zero_gradient_fresh_state():
    theta = np.array([1.0, -2.0, 3.0])
    nxt, st_ = adam_step(AdamState.zeros(3), theta, np.zeros(3), 1e-3)
    assert np.array_equal(nxt, theta)
    assert st_.t == 1


def test_first_step_moves_by_lr():
    g = np.array([5.0, -0.01, 1e4])
    nxt, _ = adam_step(AdamState.zeros(3), np.zeros(3), g, 1e-3)
    assert np.allclose(nxt, 1e-3 * np.sign(g), rtol=1e-5)


def test_matches_reference_bit_exact():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=7)
    grads = rng.normal(size=(10, 7)) * rng.uniform(0.01, 100, size=(10, 7))
    ref = reference_adam(theta, grads, 3e-3)
    state = AdamState.zeros(7)
    for k, g in enumerate(grads):
        theta, state = adam_step(state, theta, g, 3e-3)
        assert theta.tolist() == ref[k]


def test_inputs_not_modified():
    theta, g = np.ones(3), np.ones(3)
    state = AdamState.zeros(3)
    adam_step(state, theta, g, 0.1)
    assert np.all(theta == 1) and state.t == 0 and np.all(state.m == 0)


def test_length_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(3), np.zeros(3), np.zeros(4), 1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_update_bounded_and_v_nonnegative(seed):
    rng = np.random.default_rng(seed)
    state = AdamState.zeros(5)
    theta = np.zeros(5)
    lr = 1e-2
    for _ in range(30):
        g = rng.normal(size=5) * 10 ** rng.uniform(-3, 3)
        nxt, state = adam_step(state, theta, g, lr)
        assert np.all(state.v >= 0)
        # |m_hat| / sqrt(v_hat) <= (1 - b1) / sqrt(1 - b2) for Adam
        assert np.all(np.abs(nxt - theta) <= lr * 0.1 / math.sqrt(0.001) * 1.01)
        theta = nxt


def test_sanitize_gradient():
    g, bad = sanitize_gradient(np.array([np.nan, 3.0, np.inf, 4.0]), 10.0)
    assert bad == 2 and g.tolist() == [0.0, 3.0, 0.0, 4.0]
    g, _ = sanitize_gradient(np.array([30.0, 40.0]), 10.0)
    assert np.allclose(g, [6.0, 8.0]) and np.linalg.norm(g) == pytest.approx(10.0)
    g, _ = sanitize_gradient(np.array([3.0, 4.0]), 10.0)
    assert g.tolist() == [3.0, 4.0]


def test_lr_examples():
    s = LrSchedule(1e-3, 1e-6, 201)
    assert lr_at(s, 0) == 1e-3
    assert lr_at(s, 200) == 1e-6
    assert lr_at(s, 100) == pytest.approx(math.sqrt(1e-3 * 1e-6), rel=1e-12)
    assert lr_at(s, 100) == pytest.approx(3.162e-5, rel=1e-3)
    assert lr_at(LrSchedule(1e-3, 1e-6, 200), 199) == 1e-6


def test_lr_monotone_and_range():
    s = LrSchedule(1e-2, 1e-5, 37)
    lrs = [lr_at(s, g) for g in range(37)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(s, 37)
    with pytest.raises(ValueError):
        lr_at(s, -1)
    assert lr_at(LrSchedule(1e-3, 1e-6, 1), 0) == 1e-3


def test_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule(1e-6, 1e-3, 10)
    with pytest.raises(ValueError):
        LrSchedule(1e-3, 0.0, 10)
