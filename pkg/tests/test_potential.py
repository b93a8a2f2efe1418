"""Potential grammar, builtin catalog, and mass matrix checks."""

import numpy as np
import pytest

from gaussres import MassMatrix, ValidationError, builtin, evaluate
from gaussres.potential import (evaluate_many, format_potential, parse_potential,
                                parse_term)


def test_builtin_single_well_values():
    U = builtin("single_well_1d")
    # 0.5 x^2 + 0.1 x^4 at x = 1.5
    assert evaluate(U, [1.5]) == pytest.approx(1.63125, rel=1e-14)
    assert evaluate(U, [0.0]) == 0.0


def test_builtin_double_well_values():
    U = builtin("double_well_1d")
    assert evaluate(U, [1.0]) == pytest.approx(1.0, rel=1e-14)
    assert evaluate(U, [0.5]) == pytest.approx(3.0625, rel=1e-14)
    # minima at x = +-sqrt(2), depth 0
    assert evaluate(U, [np.sqrt(2.0)]) == pytest.approx(0.0, abs=1e-13)


def test_builtin_asym_2d_matches_product_form():
    """The expanded monomial table must agree with the factored expression
    (x^2-2)^2 + 0.1 x + 0.5 (y - x/2)^2 + 0.1 y^4 everywhere."""
    U = builtin("asym_double_well_2d")
    assert evaluate(U, [1.0, -1.0]) == pytest.approx(2.325, rel=1e-13)
    rng = np.random.default_rng(20240817)
    pts = rng.uniform(-3, 3, size=(50, 2))
    direct = (pts[:, 0] ** 2 - 2) ** 2 + 0.1 * pts[:, 0] \
        + 0.5 * (pts[:, 1] - 0.5 * pts[:, 0]) ** 2 + 0.1 * pts[:, 1] ** 4
    np.testing.assert_allclose(evaluate_many(U, pts), direct, rtol=1e-12, atol=1e-12)


def test_builtin_harmonic_params():
    U = builtin("harmonic", omega=2.0, m=0.5, dim=2)
    # 1/2 m w^2 |x|^2 = x1^2 + x2^2
    assert evaluate(U, [1.0, 2.0]) == pytest.approx(5.0, rel=1e-14)
    with pytest.raises(ValidationError):
        builtin("single_well_1d", omega=1.0)
    with pytest.raises(ValidationError):
        builtin("no_such_potential")


def test_parse_polynomial_terms():
    U = parse_potential("0.5 * x1^2\n0.1 * x1^4", 1)
    ref = builtin("single_well_1d")
    xs = np.linspace(-2, 2, 11)[:, None]
    np.testing.assert_allclose(evaluate_many(U, xs), evaluate_many(ref, xs),
                               rtol=1e-15)


def test_parse_cross_terms_and_constants():
    U = parse_potential("2.0\n-1.5 * x1 * x2\n0.25 * x1^2 * x2^2", 2)
    x = [1.2, -0.8]
    expect = 2.0 - 1.5 * 1.2 * (-0.8) + 0.25 * 1.2 ** 2 * 0.8 ** 2
    assert evaluate(U, x) == pytest.approx(expect, rel=1e-14)


def test_parse_gauss_factor():
    U = parse_potential("2 * x1 * gauss(0.5; 1.25)", 1)
    x = 0.7
    expect = 2.0 * x * np.exp(-0.5 * 1.25 * (x - 0.5) ** 2)
    assert evaluate(U, [x]) == pytest.approx(expect, rel=1e-14)


def test_parse_gauss_factor_2d():
    U = parse_potential("1.5 * gauss(0.2 -0.3; 2.0 0.4; 0.4 1.0)", 2)
    x = np.array([0.9, 0.1])
    d = x - np.array([0.2, -0.3])
    A = np.array([[2.0, 0.4], [0.4, 1.0]])
    expect = 1.5 * np.exp(-0.5 * d @ A @ d)
    assert evaluate(U, x) == pytest.approx(expect, rel=1e-13)


def test_grammar_rejects_parentheses_and_sums():
    with pytest.raises(ValidationError):
        parse_potential("0.5*(x1-x2)^2", 2)
    with pytest.raises(ValidationError):
        parse_potential("0.5*x1^2 + 0.5*x2^2", 2)


def test_grammar_rejects_out_of_range_variable():
    with pytest.raises(ValidationError):
        parse_potential("1.0 * x3^2", 2)


def test_grammar_rejects_misc():
    with pytest.raises(ValidationError):
        parse_potential("", 1)
    with pytest.raises(ValidationError):
        parse_potential("x1^2 * 0.5 * gauss(0; 1) * x1", 1)  # gauss not last
    with pytest.raises(ValidationError):
        parse_term("1.0 * x1^-2", 1)
    with pytest.raises(ValidationError):
        parse_potential("1.0 * gauss(0; -1)", 1)  # width not PSD


def test_format_round_trip():
    text = "0.5 * x1^2\n-0.25 * x1 * x2\n1.5 * x2^2 * gauss(0.1 -0.2; 1.0 0.0; 0.0 2.0)"
    U = parse_potential(text, 2)
    U2 = parse_potential(format_potential(U), 2)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-2, 2, size=(40, 2))
    np.testing.assert_allclose(evaluate_many(U2, pts), evaluate_many(U, pts),
                               rtol=1e-13, atol=1e-15)


def test_evaluate_many_matches_scalar():
    U = builtin("asym_double_well_2d")
    rng = np.random.default_rng(11)
    pts = rng.uniform(-2.5, 2.5, size=(20, 2))
    vec = evaluate_many(U, pts)
    for p, v in zip(pts, vec):
        assert evaluate(U, p) == pytest.approx(v, rel=1e-14)


def test_mass_matrix_validation():
    M = MassMatrix(np.diag([1.0, 2.0]))
    np.testing.assert_allclose(M.inverse @ M.matrix, np.eye(2), atol=1e-14)
    assert M.dim == 2
    with pytest.raises(ValidationError):
        MassMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]))  # indefinite
    with pytest.raises(ValidationError):
        MassMatrix(np.array([[0.0]]))
