import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpmi.rprop import RpropConfig, rprop_maximize


def quad(c):
    c = np.asarray(c, float)
    return lambda x: (-np.sum((x - c) ** 2), -2 * (x - c))


def test_converges_on_quadratic():
    res = rprop_maximize(quad([1.0, -2.0, 0.5]), np.zeros(3), RpropConfig(iterations=500))
    assert np.allclose(res.x, [1.0, -2.0, 0.5], atol=1e-6)


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=4), st.integers(0, 1000))
def test_history_never_decreases(c, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(len(c), len(c)))

    def f(x):
        z = A @ (x - c)
        return -np.sum(np.abs(z) ** 1.5) + np.sin(x).sum(), -1.5 * A.T @ (np.sign(z) * np.abs(z) ** 0.5) + np.cos(x)
    res = rprop_maximize(f, rng.normal(size=len(c)), RpropConfig(iterations=60))
    assert np.all(np.diff(res.history) >= 0)


def test_respects_bounds():
    res = rprop_maximize(quad([5.0]), np.zeros(1), RpropConfig(iterations=200), lower=-1, upper=2)
    assert res.x[0] == pytest.approx(2.0)


def test_nonfinite_start_returned_unchanged():
    res = rprop_maximize(lambda x: (-np.inf, np.zeros_like(x)), np.ones(2))
    assert np.array_equal(res.x, np.ones(2)) and res.value == -np.inf


def test_nonfinite_steps_are_rejected():
    def f(x):
        if x[0] > 0.5:
            return -np.inf, np.zeros(1)
        return float(x[0]), np.ones(1)
    res = rprop_maximize(f, np.zeros(1), RpropConfig(iterations=200))
    assert res.value <= 0.5 and np.isfinite(res.value)
    assert np.all(np.diff(res.history) >= 0)
