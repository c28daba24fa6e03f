"""Quadrature rules against exact monomial integrals on the unit simplex.

The closed form int_simplex x^a y^b z^c dx = a! b! c! / (a+b+c+dim)! serves
as the oracle.
"""

import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slodgpe import fem


def simplex_monomial_integral(exponents):
    dim = len(exponents)
    num = 1
    for a in exponents:
        num *= math.factorial(a)
    return num / math.factorial(sum(exponents) + dim)


@pytest.mark.parametrize("dim", [1, 2, 3])
@pytest.mark.parametrize("degree", [1, 2, 3, 4, 5, 6, 8, 9, 12])
def test_rule_exact_on_monomials(dim, degree):
    pts, wts = fem.quadrature_rule(dim, degree)
    assert pts.shape[1] == dim
    assert wts.sum() == pytest.approx(1.0 / math.factorial(dim), rel=1e-14)
    for exps in product(range(degree + 1), repeat=dim):
        if sum(exps) > degree:
            continue
        vals = np.prod(pts ** np.array(exps), axis=1)
        exact = simplex_monomial_integral(exps)
        assert wts @ vals == pytest.approx(exact, rel=1e-13, abs=1e-16)


def test_weights_positive():
    for dim in (1, 2, 3):
        for degree in range(1, 13):
            _, wts = fem.quadrature_rule(dim, degree)
            assert np.all(wts > 0)


@given(coef=st.lists(st.floats(-10, 10), min_size=10, max_size=10))
@settings(max_examples=25, deadline=None)
def test_random_cubic_polynomials_2d(coef):
    """Degree-3 rule integrates arbitrary 2d cubics exactly."""
    exps = [(a, b) for a in range(4) for b in range(4 - a)]
    pts, wts = fem.quadrature_rule(2, 3)
    approx = sum(
        c * (wts @ (pts[:, 0] ** a * pts[:, 1] ** b))
        for c, (a, b) in zip(coef, exps)
    )
    exact = sum(
        c * simplex_monomial_integral((a, b)) for c, (a, b) in zip(coef, exps)
    )
    assert approx == pytest.approx(exact, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("dim", [2, 3])
def test_face_rule_exact_on_reference_face(dim):
    # the face rule integrates over the unit simplex of dimension dim-1
    pts, wts = fem.face_quadrature(dim, 4)
    assert pts.shape[1] == dim - 1
    for exps in product(range(5), repeat=dim - 1):
        if sum(exps) > 4:
            continue
        vals = np.prod(pts ** np.array(exps), axis=1) if dim > 1 else 1.0
        assert wts @ vals == pytest.approx(
            simplex_monomial_integral(exps), rel=1e-13, abs=1e-16)


def test_degree_cap():
    with pytest.raises(ValueError):
        fem.quadrature_rule(2, 13)
