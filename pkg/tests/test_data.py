import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gpmi.data import TransitionDataset


def test_from_trajectory_targets_are_differences():
    states = np.array([[0, 0], [1, 2], [3, 3.5]], float)
    d = TransitionDataset.from_trajectory(states, [[0.1], [0.2]])
    assert len(d) == 2
    assert np.array_equal(d.targets, [[1, 2], [2, 1.5]])
    assert np.array_equal(d.inputs, [[0, 0, 0.1], [1, 2, 0.2]])


def test_validation():
    with pytest.raises(ValueError):
        TransitionDataset(np.zeros((3, 5)), np.zeros((2, 4)), 4, 1)
    with pytest.raises(ValueError):
        TransitionDataset(np.full((1, 5), np.nan), np.zeros((1, 4)), 4, 1)
    assert len(TransitionDataset.empty(4, 1)) == 0


def test_extend_checks_dims():
    a = TransitionDataset.empty(4, 1)
    with pytest.raises(ValueError):
        a.extend(TransitionDataset.empty(3, 1))


@given(arrays(float, st.tuples(st.integers(0, 8), st.just(7)),
              elements=st.floats(-1e6, 1e6, allow_subnormal=False)))
def test_csv_round_trip_is_exact(tmp_path_factory, rows):
    d = TransitionDataset(rows[:, :5], rows[:, 5:7].repeat(2, axis=1), 4, 1)
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    d.to_csv(path)
    back = TransitionDataset.from_csv(path)
    assert np.array_equal(back.inputs, d.inputs) and np.array_equal(back.targets, d.targets)
    assert path.read_text().splitlines()[0] == "x0,x1,x2,x3,u0,dx0,dx1,dx2,dx3"


def test_csv_append_with_extra_columns(tmp_path):
    d = TransitionDataset(np.ones((2, 5)), np.zeros((2, 4)), 4, 1)
    p = tmp_path / "t.csv"
    d.to_csv(p, extra={"episode": 0})
    d.to_csv(p, extra={"episode": 1}, append=True)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("episode,x0") and len(lines) == 5
    assert len(TransitionDataset.from_csv(p)) == 4


def test_csv_requires_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("")
    with pytest.raises(ValueError):
        TransitionDataset.from_csv(p)
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        TransitionDataset.from_csv(p)
