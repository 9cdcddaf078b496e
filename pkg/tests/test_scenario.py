import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odlab.core import ModelError
from odlab.scenario import _apportion, make_truth, peak_profile


def test_profile_two_peaks():
    w = peak_profile(12)
    assert w.sum() == pytest.approx(1.0)
    assert w[1] > w[5] and w[10] > w[5]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.floats(0.01, 10), min_size=1, max_size=20))
def test_apportion_exact(total, weights):
    out = _apportion(total, np.array(weights))
    assert out.sum() == total
    assert np.all(np.abs(out - total * np.array(weights) / sum(weights)) < 1)


def test_truth_totals_and_determinism():
    a = make_truth(5, 4, 8000, 0)
    assert a.sum() == 8000
    assert not np.einsum("tii->ti", a).any()
    np.testing.assert_array_equal(a, make_truth(5, 4, 8000, 0))
    assert not np.array_equal(a, make_truth(5, 4, 8000, 1))
    totals = a.sum(axis=(1, 2))
    assert totals[0] > totals[1] and totals[3] > totals[2]


def test_truth_rejects_bad_parameters():
    with pytest.raises(ModelError):
        make_truth(1, 4, 100, 0)
    with pytest.raises(ModelError):
        peak_profile(4, width=0)
