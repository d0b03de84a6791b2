import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ternkb.errors import MetricError
from ternkb.metrics import auc, auc_pairwise, logloss


def test_auc_examples():
    assert auc([0.9, 0.8, 0.3], [1, 0, 0]) == 1.0
    assert auc([0.4] * 5, [1, 0, 1, 0, 0]) == 0.5
    assert auc([0.9, 0.8, 0.3], [0, 1, 0]) == 0.5
    assert auc_pairwise([0.9, 0.8, 0.3], [0, 1, 0]) == 0.5
    assert auc([0.1, 0.2], [1, 0]) == 0.0


def test_auc_single_class():
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [0, 0])
    with pytest.raises(MetricError):
        auc([0.1], [0, 1])


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=200))
def test_auc_matches_pairwise_with_ties(pairs):
    s = np.array([p[0] for p in pairs]) / 6.0
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    assert abs(auc(s, y) - auc_pairwise(s, y)) < 1e-12


def test_auc_invariant_to_monotone_transform(rng):
    s = rng.normal(size=300)
    y = rng.integers(0, 2, size=300)
    assert auc(s, y) == pytest.approx(auc(np.exp(3 * s), y), abs=1e-15)


def test_logloss_examples():
    assert logloss([0.5], [1]) == pytest.approx(math.log(2))
    assert logloss([1 - 1e-12, 1e-12], [1, 0]) < 1e-6
    want = -(math.log(0.8) + math.log(1 - 0.3)) / 2
    assert logloss([0.8, 0.3], [1, 0]) == pytest.approx(want, rel=1e-14)
    # clamped rather than infinite
    assert math.isfinite(logloss([0.0], [1]))


def test_logloss_errors():
    with pytest.raises(MetricError):
        logloss([], [])
    with pytest.raises(MetricError):
        logloss([0.5, 0.5], [1])
