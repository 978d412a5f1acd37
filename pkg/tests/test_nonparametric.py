from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from lapselab.survival import (
    Degenerate,
    Empty,
    NoComparablePairs,
    cause_specific_cif,
    concordance_index,
    kaplan_meier,
    logrank_statistic,
    nelson_aalen,
)


def test_kaplan_meier_hand_values():
    S = kaplan_meier([1, 2, 3], [1, 1, 0])
    assert_allclose(S([0, 1, 2, 3, 10]), [1, 2 / 3, 1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_kaplan_meier_trivial_cases():
    assert_allclose(kaplan_meier([1, 2, 3], [0, 0, 0])([0, 5]), [1, 1])
    assert kaplan_meier([1, 1, 1], [1, 1, 1])(1.0) == 0.0
    with pytest.raises(Empty):
        kaplan_meier([], [])


def test_nelson_aalen_hand_values():
    L = nelson_aalen([1, 2, 3], [1, 1, 0])
    assert_allclose(L([0, 1, 2, 3]), [0, 1 / 3, 1 / 3 + 1 / 2, 1 / 3 + 1 / 2], rtol=0, atol=1e-15)
    assert_allclose(nelson_aalen([1, 2], [0, 0])([0, 3]), [0, 0])


samples = st.lists(
    st.tuples(st.integers(1, 20), st.integers(0, 2)), min_size=1, max_size=60
)


@settings(max_examples=100, deadline=None)
@given(samples)
def test_exp_minus_cumhaz_bounds_km(data):
    t = np.array([d for d, _ in data], float)
    e = np.array([c > 0 for _, c in data])
    grid = np.arange(0, 22)
    assert np.all(np.exp(-nelson_aalen(t, e)(grid)) >= kaplan_meier(t, e)(grid) - 1e-15)


@settings(max_examples=100, deadline=None)
@given(samples)
def test_cifs_sum_to_one_minus_km(data):
    t = np.array([d for d, _ in data], float)
    codes = np.array([c for _, c in data])
    grid = np.unique(np.concatenate([t, [0.0, 0.5, 25.0]]))
    total = cause_specific_cif(t, codes, 1)(grid) + cause_specific_cif(t, codes, 2)(grid)
    assert_allclose(total, 1 - kaplan_meier(t, codes > 0)(grid), rtol=0, atol=1e-12)


def test_cif_single_cause_is_one_minus_km():
    t = np.array([1, 2, 2, 3, 5, 8.0])
    codes = np.array([1, 0, 1, 1, 0, 1])
    grid = np.linspace(0, 10, 41)
    assert_allclose(cause_specific_cif(t, codes, 1)(grid), 1 - kaplan_meier(t, codes > 0)(grid), atol=1e-15)


def test_cif_hand_example():
    # all-cause KM: 4/5 at 1, 3/5 at 2, 3/10 at 3, 0 at 4
    t = [1, 2, 2, 3, 4]
    codes = [1, 2, 0, 1, 2]
    F1 = cause_specific_cif(t, codes, 1)
    F2 = cause_specific_cif(t, codes, 2)
    assert_allclose(F1([0.5, 1, 2, 3, 4]), [0, 0.2, 0.2, 0.5, 0.5], atol=1e-15)
    assert_allclose(F2([0.5, 1, 2, 3, 4]), [0, 0, 0.2, 0.2, 0.5], atol=1e-15)


def test_logrank_hand_example():
    ta, ea = [1, 3, 5], [1, 1, 0]
    tb, eb = [2, 4, 6], [1, 1, 1]
    # (observed - expected) and variance for group a, summed over event times 1,2,3,4,6
    o_minus_e = Fraction(2) - (Fraction(3, 6) + Fraction(2, 5) + Fraction(2, 4) + Fraction(1, 3))
    var = Fraction(1, 4) + Fraction(6, 25) + Fraction(1, 4) + Fraction(2, 9)
    assert logrank_statistic(ta, ea, tb, eb) == pytest.approx(float(o_minus_e**2 / var), rel=1e-12)


def test_logrank_symmetric_and_zero_on_copy(rng):
    t = rng.exponential(1, 50)
    e = rng.random(50) < 0.7
    t2 = rng.exponential(2, 40)
    e2 = rng.random(40) < 0.7
    assert logrank_statistic(t, e, t, e) == pytest.approx(0.0, abs=1e-12)
    assert logrank_statistic(t, e, t2, e2) == pytest.approx(logrank_statistic(t2, e2, t, e), rel=1e-12)


def test_logrank_separated_groups(rng):
    a = rng.exponential(1 / 1.0, 200)
    b = rng.exponential(1 / 3.0, 200)
    assert logrank_statistic(a, np.ones(200), b, np.ones(200)) > 3.84


def test_logrank_no_events():
    with pytest.raises(Degenerate):
        logrank_statistic([1, 2], [0, 0], [3], [0])


def test_concordance_examples():
    assert concordance_index([1, 2, 3], [1, 1, 1], [1, 3, 2]) == pytest.approx(1 / 3)
    assert concordance_index([1, 2, 3], [1, 1, 1], [3, 2, 1]) == 1.0
    assert concordance_index([1, 2, 3], [1, 1, 1], [1, 2, 3]) == 0.0
    assert concordance_index([1, 2, 3], [1, 1, 1], [5, 5, 5]) == 0.5
    with pytest.raises(NoComparablePairs):
        concordance_index([1, 2, 3], [0, 0, 0], [1, 2, 3])


def _brute_cindex(t, e, s):
    num = den = 0.0
    for i in range(len(t)):
        for j in range(len(t)):
            if e[i] and t[i] < t[j]:
                den += 1
                num += 1.0 if s[i] > s[j] else 0.5 if s[i] == s[j] else 0.0
    return num / den


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 8), st.booleans(), st.integers(0, 5)), min_size=2, max_size=30))
def test_concordance_matches_pairwise_enumeration(data):
    t = np.array([a for a, _, _ in data], float)
    e = np.array([b for _, b, _ in data])
    s = np.array([c for _, _, c in data], float)
    try:
        expected = _brute_cindex(t, e, s)
    except ZeroDivisionError:
        with pytest.raises(NoComparablePairs):
            concordance_index(t, e, s)
        return
    assert concordance_index(t, e, s, chunk=3) == pytest.approx(expected, abs=1e-12)
