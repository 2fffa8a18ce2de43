import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ranks_by_sorting, spearman_sorting
from rpe.stats import average_ranks, spearman


def test_ranks_with_ties():
    np.testing.assert_array_equal(average_ranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])


def test_perfect_and_reversed_orders():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_degenerate_inputs_are_nan():
    assert np.isnan(spearman([1.0], [2.0]))
    assert np.isnan(spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2, 3])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.floats(-10, 10)), min_size=2, max_size=30))
def test_matches_sorting_oracle(pairs):
    x = [float(a) for a, _ in pairs]
    y = [b for _, b in pairs]
    assert average_ranks(x).tolist() == ranks_by_sorting(x)
    got = spearman(x, y)
    if len(set(x)) == 1 or len(set(y)) == 1:
        assert np.isnan(got)
    else:
        assert got == pytest.approx(spearman_sorting(x, y), abs=1e-12)
