import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codazzi_lab.codazzi import codazzi_residual
from codazzi_lab.errors import BadParams, EigenvalueCollision
from codazzi_lab.exprlang import evaluate, parse
from codazzi_lab.gallery import (NAMED, build_family, characteristics_residual, mu_form,
                                 named_example, parameter_sweep, polar_pullback_residual)
from codazzi_lab.geometry import Chart, GridSpec

from formgen import draw_form

COORDS = ("t", "x", "y")
BOX = Chart(COORDS, [(0, 1), (-0.5, 0.5), (-0.5, 0.5)])
GRID = GridSpec.uniform(7)
seeds = st.integers(0, 2**32 - 1)


def test_constant_mu_family():
    ex = build_family(1.0, "0", [(0, 1)] * 3)
    np.testing.assert_allclose(ex.g.values((0.2, 0.3, 0.4)), np.eye(3))
    np.testing.assert_allclose(ex.A.values((0.2, 0.3, 0.4)), np.diag([0.0, 1.0, 1.0]))


def test_inconsistent_warp_metric_entry():
    ex = named_example("inconsistent_warp")
    p = (0.3, 0.8, 1.2)
    assert ex.g.values(p)[0, 0] == pytest.approx(0.8**4 / 1.2**2, rel=1e-14)
    assert ex.probe == (0.0, 1.0, 1.0)


def test_torus_instance():
    ex = named_example("torus")
    assert ex.chart.periodic == (True, True, True)
    assert ex.lam == 1.0 and str(ex.mu) == str(parse("0.5*sin(x)*cos(y)", COORDS))


def test_torus_entries_are_periodic(rng):
    ex = named_example("torus")
    pts = rng.uniform(0, 2 * math.pi, (20, 3))
    for i in range(3):
        shift = np.zeros(3)
        shift[i] = 2 * math.pi
        np.testing.assert_allclose(ex.g.values(pts + shift), ex.g.values(pts), atol=1e-12)
        np.testing.assert_allclose(ex.A.values(pts + shift), ex.A.values(pts), atol=1e-12)


def test_collision_detected():
    with pytest.raises(EigenvalueCollision):
        build_family(1.0, "x", [(0, 1), (0, 2), (0, 1)], grid=GridSpec.uniform(5))


def test_lambda_must_be_positive():
    with pytest.raises(BadParams):
        build_family(-1.0, "x", [(0, 1)] * 3)


@pytest.mark.parametrize("name", sorted(NAMED))
def test_named_examples_are_codazzi(name):
    ex = named_example(name)
    assert codazzi_residual(ex.A, ex.g, ex.grid).max < 1e-8


def test_unknown_example():
    with pytest.raises(KeyError):
        named_example("sphere")


@settings(max_examples=15)
@given(seeds, st.floats(2.0, 5.0))
def test_family_constructor_always_codazzi(seed, lam):
    rnd = random.Random(seed)
    mu = f"{rnd.uniform(-1, 1)!r}*sin(x + {rnd.uniform(-1, 1)!r}*y) + {rnd.uniform(-1, 1)!r}*t*y"
    ex = build_family(lam, mu, [(-1, 1)] * 3, grid=GridSpec.uniform(5))
    assert codazzi_residual(ex.A, ex.g, ex.grid).max < 1e-8


def test_polar_pullback_identity():
    assert polar_pullback_residual().max < 1e-10


# --------------------------------------------------------------------------
# mu forms

def test_form1_degenerate_is_constant():
    mu = mu_form(1, {"c1": 1})
    assert float(evaluate(mu, (0.1, 0.3, -0.2))) == 2.0


def test_form4_identity():
    mu = mu_form(4, {"b": 1, "c": 2}, G=parse("s", ("s",)))
    p = (0.0, 0.3, 0.7)
    assert float(evaluate(mu, p)) == pytest.approx(0.7 - 2 * 0.3, abs=1e-15)
    assert characteristics_residual(mu, 0, 1, 2, GRID, BOX).max < 1e-12


def test_form5_pass_through():
    G = parse("sin(s)", ("s",))
    mu = mu_form(5, G=G)
    assert float(evaluate(mu, (0.0, 0.4, 9.0))) == pytest.approx(math.sin(0.4))


@pytest.mark.parametrize("k, params", [(2, {"a": 0, "b": 1}), (2, {"a": 1, "b": 0}),
                                       (3, {"a": 1, "b": 1}), (4, {"a": 1, "b": 1}),
                                       (7, {})])
def test_form_case_conditions(k, params):
    with pytest.raises(BadParams):
        mu_form(k, params, G=parse("s", ("s",)))


def test_forms_need_G():
    with pytest.raises(BadParams):
        mu_form(2, {"a": 1, "b": 1})


def test_constant_one_solves_every_characteristics_equation():
    mu = parse("1", COORDS)
    for a, b, c in parameter_sweep():
        assert characteristics_residual(mu, a, b, c, GRID, BOX).max == 0.0


def test_sweep_excludes_origin():
    sweep = parameter_sweep()
    assert len(sweep) == 26 and (0, 0, 0) not in sweep


def test_torus_mu_fails_every_sweep_triple():
    mu = parse("0.5*sin(x)*cos(y)", COORDS)
    for a, b, c in parameter_sweep():
        assert characteristics_residual(mu, a, b, c, GRID, BOX).max > 1e-2


@pytest.mark.parametrize("k", range(1, 7))
@given(seed=seeds)
@settings(max_examples=10)
def test_forms_solve_characteristics(k, seed):
    mu, (a, b, c) = draw_form(k, random.Random(seed))
    assert characteristics_residual(mu, a, b, c, GRID, BOX).max < 1e-10


@settings(max_examples=10)
@given(seeds)
def test_form1_general_constants_build_codazzi_family(seed):
    rnd = random.Random(seed)
    params = {f"c{i}": rnd.uniform(-0.3, 0.3) for i in range(1, 5)}
    mu = mu_form(1, params)
    ex = build_family(3.0, mu, BOX.domain, grid=GridSpec.uniform(5))
    assert codazzi_residual(ex.A, ex.g, ex.grid).max < 1e-8
