import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cofrgenet.cfcore import (
    ContinuantTable,
    DivisionCounter,
    PoleGuard,
    cf_eval,
    cf_grad,
    cf_literal,
    check_continuant_identity,
    continuant,
    continuant_partial,
    continuants_forward,
    guard_denominator,
    literal_backward,
    literal_forward,
    tridiagonal_determinant,
)

from oracles import central_diff, cf_exact, cf_recursive, laplace_det, tridiag_rows


@pytest.mark.parametrize("a, expected", [
    ((2, 3), [1, 3, 7]),
    ((1, 1, 1, 1), [1, 1, 2, 3, 5]),
    ((4,), [1, 4]),
])
def test_continuants_forward_examples(a, expected):
    table = continuants_forward(np.array(a, dtype=float))
    np.testing.assert_array_equal(table.k, expected)
    assert table.divisions_used == 1
    assert table.inv_kd * table.kd_guarded == pytest.approx(1.0, rel=1e-15)


def test_continuants_reject_nonfinite_naming_index():
    with pytest.raises(ValueError, match=r"index \(2,\)"):
        continuants_forward([1.0, 2.0, np.nan])
    with pytest.raises(ValueError):
        continuants_forward(np.zeros(0))


def test_continuants_overflow_assertion():
    with pytest.raises(OverflowError):
        continuants_forward(np.full(6, 1e30))


@pytest.mark.parametrize("a, a0, expected", [
    ((1, 1), 0.0, 0.5),
    ((2, 3), 0.0, float(cf_exact([2, 3]))),
    ((1, 1, 1, 1), 2.0, 2.6),
])
def test_cf_eval_examples(a, a0, expected):
    assert cf_eval(continuants_forward(np.array(a, float)), a0) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("a, expected", [
    # frozen from oracles.central_diff(cf_recursive, a)
    ((2, 3), [-9 / 49, 1 / 49]),
    ((1, 1, 1, 1), [-0.36, 0.16, -0.04, 0.04]),
    ((4,), [-1 / 16]),
])
def test_cf_grad_examples(a, expected):
    g = cf_grad(continuants_forward(np.array(a, float)))
    np.testing.assert_allclose(g, expected, rtol=1e-12)
    fd = central_diff(cf_recursive, [float(x) for x in a])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_cf_grad_performs_no_division(monkeypatch):
    table = continuants_forward(np.array([2.0, 3.0, 5.0]))

    def boom(*args, **kwargs):
        raise AssertionError("division in gradient path")

    monkeypatch.setattr(np, "divide", boom)
    monkeypatch.setattr(np, "reciprocal", boom)
    cf_grad(table)
    cf_eval(table, 1.0)


@pytest.mark.parametrize("a, a0, expected", [
    ((1, 1), 0.0, 0.5),
    ((2, 3), 0.0, 3 / 7),
])
def test_cf_literal_examples(a, a0, expected):
    counter = DivisionCounter()
    assert cf_literal(np.array(a, float), a0, counter=counter) == pytest.approx(expected, rel=1e-15)
    assert counter.count == len(a)


def test_literal_matches_continuants_all_ones():
    a = np.ones(4)
    assert abs(cf_literal(a) - cf_eval(continuants_forward(a))) <= 1e-12


@pytest.mark.parametrize("a, l, expected", [
    ((2, 3), 1, 3.0),
    ((2, 3), 2, 2.0),
    ((1, 1, 1), 2, 1.0),
])
def test_continuant_partial_examples(a, l, expected):
    assert continuant_partial(a, l) == expected


def test_continuant_partial_matches_determinant_differences():
    rng = np.random.default_rng(3)
    a = list(rng.uniform(0.5, 2.0, size=5))
    fd = central_diff(lambda v: laplace_det(tridiag_rows(v)), a)
    got = [continuant_partial(a, l) for l in range(1, 6)]
    np.testing.assert_allclose(got, fd, rtol=1e-7)


def test_continuant_partial_rejects_bad_index():
    with pytest.raises(IndexError):
        continuant_partial([1.0, 2.0], 0)
    with pytest.raises(IndexError):
        continuant_partial([1.0, 2.0], 3)


@pytest.mark.parametrize("kd, expected", [(0.001, 0.01), (-0.005, -0.01), (5.0, 5.0), (0.0, 0.01)])
def test_guard_denominator(kd, expected):
    assert guard_denominator(kd, 0.01) == expected


def test_pole_guard_rejects_nonpositive():
    with pytest.raises(ValueError):
        PoleGuard(0.0)


def test_guard_active_in_forward():
    table = continuants_forward(np.array([1.0, -1.0]))  # K_2 = -1 + 1 = 0
    assert table.kd == 0.0
    assert table.kd_guarded == 0.01
    assert cf_eval(table) == pytest.approx(-1.0 / 0.01)


def test_identity_examples():
    a = np.random.default_rng(0).uniform(-3, 3, size=6)
    assert check_continuant_identity(a, 0) == 0.0
    assert check_continuant_identity([1.0, 2.0, 3.0], 1) == 0.0


def test_identity_exact_in_rationals():
    from fractions import Fraction

    def K(seq):
        prev, cur = Fraction(0), Fraction(1)
        for x in seq:
            prev, cur = cur, x * cur + prev
        return cur

    a = [Fraction(n, 7) for n in (3, -5, 11, 2, 9, -4)]
    d = len(a) - 1
    for k in range(d + 1):
        lhs = K(a[:k]) * K(a[1:]) - (K(a[1:k]) if k else 0) * K(a)
        assert lhs == (-1) ** k * K(a[k + 1:])


@pytest.mark.parametrize("a, expected", [((2, 3), 7.0), ((4,), 4.0), ((1, 1, 1, 1, 1), 8.0)])
def test_tridiagonal_determinant_examples(a, expected):
    assert laplace_det(tridiag_rows(list(a))) == expected
    assert tridiagonal_determinant(a) == pytest.approx(expected, rel=1e-12)


def test_table_is_read_only():
    table = continuants_forward(np.ones((3, 4)))
    with pytest.raises(ValueError):
        table.k[0, 0] = 2.0


def test_batched_matches_scalar_loop():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.5, 3, size=(6, 5, 4))
    table = continuants_forward(a)
    assert table.divisions_used == 30
    vals = cf_eval(table)
    grads = cf_grad(table)
    for idx in np.ndindex(6, 5):
        t = continuants_forward(a[idx])
        assert vals[idx] == cf_eval(t)
        np.testing.assert_array_equal(grads[idx], cf_grad(t))


def test_literal_backward_matches_analytic():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.5, 3, size=(50, 6))
    counter = DivisionCounter()
    _, tails = literal_forward(a, counter=counter)
    g = literal_backward(tails, np.ones(50), counter=counter)
    assert counter.count == 2 * 6 * 50
    np.testing.assert_allclose(g, cf_grad(continuants_forward(a)), rtol=1e-12)


# --- properties -------------------------------------------------------------

magnitudes = st.floats(0.5, 3.0)
signed = st.tuples(magnitudes, st.booleans()).map(lambda t: -t[0] if t[1] else t[0])


@settings(max_examples=200, deadline=None)
@given(st.lists(signed, min_size=1, max_size=8))
def test_recursion_consistency(a):
    a = np.array(a)
    k = continuants_forward(a).k
    d = len(a)
    assert k[0] == 1 and k[1] == a[-1]
    for j in range(2, d + 1):
        assert k[j] == pytest.approx(a[d - j] * k[j - 1] + k[j - 2], rel=1e-12, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(signed, min_size=1, max_size=8), st.floats(-2, 2))
def test_ratio_literal_equivalence(a, a0):
    a = np.array(a)
    _, tails = literal_forward(a)
    if np.abs(tails).min() <= 0.1:
        return  # near a pole, the two arms guard differently by design
    fe = cf_eval(continuants_forward(a), a0)
    assert abs(fe - cf_literal(a, a0)) <= 1e-10 * (1 + abs(fe))
    assert fe == pytest.approx(float(cf_exact(list(a), a0)), rel=1e-10, abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.lists(signed, min_size=1, max_size=8))
def test_sign_alternation(a):
    table = continuants_forward(np.array(a))
    g = cf_grad(table)
    d = len(a)
    for k in range(1, d + 1):
        if table.k[d - k] != 0:
            assert np.sign(g[k - 1]) == (-1) ** k


@settings(max_examples=100, deadline=None)
@given(st.lists(signed, min_size=1, max_size=8))
def test_determinant_equals_continuant(a):
    kd = continuants_forward(np.array(a)).kd
    assert tridiagonal_determinant(a) == pytest.approx(kd, rel=1e-10, abs=1e-12)
    assert continuant(a) == pytest.approx(kd, rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(signed, min_size=2, max_size=9))
def test_identity_residual_small(a):
    a = np.array(a)
    scale = max(abs(continuant(a)), abs(continuant(a[1:])), 1.0)
    for k in range(len(a)):
        assert abs(check_continuant_identity(a, k)) <= 1e-9 * scale


def test_default_epsilon():
    assert PoleGuard().epsilon == 0.01
    assert isinstance(continuants_forward([1.0]), ContinuantTable)
    assert math.isclose(cf_eval(continuants_forward([0.0])), 100.0)
