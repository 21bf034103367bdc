import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from codazzi_lab.errors import DomainError, ExprSyntaxError, UnknownVariable
from codazzi_lab.exprlang import eval_jet2, evaluate, parse, substitute, to_text

from exprgen import COORDS, fd_gradient, fd_hessian, random_expression, rel_err

seeds = st.integers(0, 2**32 - 1)
points = st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3)


def P(text):
    return parse(text, COORDS)


@pytest.mark.parametrize("text, value", [
    ("1 + 2 * 3", 7.0),
    ("2 ^ 3 ^ 2", 512.0),
    ("-2^2", -4.0),
    ("(1 + 2) * 3", 9.0),
    ("2 ** -1", 0.5),
    ("8 / 4 / 2", 1.0),
    ("2 * pi", 2 * math.pi),
    ("sqrt(16) + ln(exp(2))", 6.0),
])
def test_precedence_and_constants(text, value):
    assert float(evaluate(P(text), (0, 0, 0))) == pytest.approx(value, rel=1e-15)


def test_gradient_and_hessian_examples():
    j = eval_jet2(P("0.5*sin(x)*cos(y)"), (0.0, 0.0, 0.0))
    assert j.value == 0.0
    np.testing.assert_allclose(j.grad, [0.0, 0.5, 0.0], atol=1e-15)
    j = eval_jet2(P("x*y"), (0.0, 1.0, 2.0))
    assert j.value == 2.0
    np.testing.assert_allclose(j.grad, [0.0, 2.0, 1.0])
    np.testing.assert_allclose(j.hess, [[0, 0, 0], [0, 0, 1], [0, 1, 0]])


def test_domain_error_reports_subexpression():
    with pytest.raises(DomainError) as exc:
        evaluate(P("1 + y/x^2"), (0.0, 0.0, 1.0))
    assert "x^2" in exc.value.subexpression


@pytest.mark.parametrize("text", ["ln(x - 2)", "sqrt(x - 2)", "(x - 2)^0.5", "1/(x - x)"])
def test_domain_violations(text):
    with pytest.raises(DomainError):
        eval_jet2(P(text), (0.0, 0.0, 0.0))


def test_mask_mode_flags_points():
    pts = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    jet, bad = eval_jet2(P("1/x"), pts, errors="mask")
    assert bad.tolist() == [False, True]
    assert jet.value[0] == 1.0


@pytest.mark.parametrize("text, pos", [("1 + ", 4), ("sin x", 4), ("(x", 2), ("x $ y", 2)])
def test_syntax_errors_carry_position(text, pos):
    with pytest.raises(ExprSyntaxError) as exc:
        P(text)
    assert exc.value.position == pos


def test_unknown_variable():
    with pytest.raises(UnknownVariable) as exc:
        P("z + 1")
    assert exc.value.name == "z"


def test_power_with_coordinate_exponent_rejected():
    with pytest.raises(ExprSyntaxError):
        P("x ^ y")


def test_pi_prints_back():
    e = P("2*pi*x")
    assert "pi" in str(e)
    assert parse(str(e), COORDS).root == e.root


def test_substitute_composes():
    G = parse("s^2 + sin(s)", ("s",))
    e = substitute(G, {"s": P("x - 2*y")}, COORDS)
    p = (0.3, 0.2, -0.4)
    s = p[1] - 2 * p[2]
    assert float(evaluate(e, p)) == pytest.approx(s * s + math.sin(s), rel=1e-14)


def test_batched_shapes():
    pts = np.random.default_rng(0).uniform(-1, 1, (4, 5, 3))
    j = eval_jet2(P("x*y + exp(t)"), pts)
    assert j.value.shape == (4, 5)
    assert j.grad.shape == (4, 5, 3)
    assert j.hess.shape == (4, 5, 3, 3)


def test_constant_jet_is_zero():
    j = eval_jet2(P("3.5"), (0.1, 0.2, 0.3))
    assert P("3.5").is_constant
    assert np.all(j.grad == 0) and np.all(j.hess == 0)


@given(seeds, points)
def test_ad_matches_finite_differences(seed, p):
    e = P(random_expression(random.Random(seed)))
    p = np.array(p)
    j = eval_jet2(e, p)
    f = lambda q: float(evaluate(e, q))
    assert rel_err(j.grad, fd_gradient(f, p)) < 1e-6
    assert rel_err(j.hess, fd_hessian(f, p)) < 1e-6


@given(seeds)
def test_print_parse_round_trip(seed):
    e = P(random_expression(random.Random(seed)))
    again = parse(to_text(e.root), COORDS)
    assert again.root == e.root


@given(seeds, seeds, points, st.floats(-3, 3))
def test_jets_are_linear(s1, s2, p, c):
    a = P(random_expression(random.Random(s1)))
    b = P(random_expression(random.Random(s2)))
    combo = parse(f"({a}) + ({c!r}) * ({b})", COORDS)
    ja, jb, jc = eval_jet2(a, p), eval_jet2(b, p), eval_jet2(combo, p)
    scale = 1 + abs(c)
    np.testing.assert_allclose(jc.grad, ja.grad + c * jb.grad, atol=1e-12 * scale * (
        1 + np.abs(ja.grad).max() + np.abs(jb.grad).max()))
    np.testing.assert_allclose(jc.hess, ja.hess + c * jb.hess, atol=1e-12 * scale * (
        1 + np.abs(ja.hess).max() + np.abs(jb.hess).max()))


@given(seeds, points)
def test_hessian_symmetric(seed, p):
    j = eval_jet2(P(random_expression(random.Random(seed))), p)
    assert np.array_equal(j.hess, j.hess.T)


@given(seeds, seeds, points)
def test_product_rule(s1, s2, p):
    a = P(random_expression(random.Random(s1), 2))
    b = P(random_expression(random.Random(s2), 2))
    ja, jb = eval_jet2(a, p), eval_jet2(b, p)
    jab = eval_jet2(parse(f"({a})*({b})", COORDS), p)
    expect = ja.grad * jb.value + ja.value * jb.grad
    np.testing.assert_allclose(jab.grad, expect, atol=1e-12 * (1 + np.abs(expect).max()))
