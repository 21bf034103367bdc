import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codazzi_lab.codazzi import (CONDITIONS, LEMMAS, ResidualReport, char_conditions,
                                 codazzi_residual, eigen_at, eigen_structure, eta_and_warp_extract,
                                 lemma_residual, local_frame)
from codazzi_lab.errors import ClusterAmbiguity, MisalignedFrame, NotWarpedEvidence
from codazzi_lab.gallery import BATTERY, build_family, named_example
from codazzi_lab.geometry import Chart, GridSpec, MetricField, SymTensorField, euclidean

from exprgen import random_expression

seeds = st.integers(0, 2**32 - 1)
UNIT = Chart(("t", "x", "y"), [(0, 1)] * 3)


def shifted(A, g, c):
    """A + c g as a new tensor field."""
    texts = {k: f"({a}) + ({c!r})*({g.component_texts()[k]})" for k, a in A.component_texts().items()}
    return SymTensorField.from_spec(A.chart, texts)


@pytest.mark.parametrize("name", BATTERY + ("flat",))
def test_metric_itself_is_codazzi(name):
    ex = named_example(name)
    A = SymTensorField.from_spec(ex.chart, ex.g.component_texts())
    assert codazzi_residual(A, ex.g, ex.grid).max < 1e-10


def test_torus_tensor_is_codazzi_and_broken_one_is_not():
    ex = named_example("torus")
    assert codazzi_residual(ex.A, ex.g, GridSpec.uniform(11)).max < 1e-8
    broken = ex.A.component_texts()
    broken["x,x"] = "1 + 0.1*x"
    rep = codazzi_residual(SymTensorField.from_spec(ex.chart, broken), ex.g, GridSpec.uniform(11))
    assert rep.max > 1e-3 and not rep.passed


def test_eigen_example_xy_family():
    ex = build_family(1.0, "x*y", [(0, 1), (0.75, 1.25), (1.75, 2.25)])
    mu, lam, v = eigen_at(ex.A, ex.g, (0.0, 1.0, 2.0))
    assert mu == pytest.approx(2.0) and lam == pytest.approx(1.0)
    assert abs(v[1]) < 1e-12 and abs(v[2]) < 1e-12


def test_scalar_multiple_of_metric_is_single_cluster():
    g = euclidean(UNIT)
    A = SymTensorField.diagonal(UNIT, ["3", "3", "3"])
    eig = eigen_structure(A, g, GridSpec.uniform(5))
    assert not eig.is_two_eigenvalue
    assert not eig.ambiguous.any()
    np.testing.assert_allclose(eig.values, 3.0)


def test_collision_is_ambiguous():
    g = euclidean(UNIT)
    A = SymTensorField.diagonal(UNIT, ["1 + x - 0.5", "1", "1"])
    with pytest.raises(ClusterAmbiguity):
        eigen_at(A, g, (0.0, 0.5, 0.0))
    eig = eigen_structure(A, g, GridSpec.uniform(5))
    assert eig.ambiguous.sum() == 25
    assert not eig.included[:, 2, :].any()


def random_pair(seed):
    rnd = random.Random(seed)
    chart = Chart(("t", "x", "y"), [(-1, 1)] * 3)
    g = MetricField.from_spec(chart, {
        **{(i, i): f"2 + sin({random_expression(rnd, 2)})" for i in range(3)},
        **{(i, j): f"0.2*sin({random_expression(rnd, 2)})" for i in range(3) for j in range(i + 1, 3)},
    })
    A = SymTensorField.from_spec(chart, {(i, j): random_expression(rnd, 2)
                                         for i in range(3) for j in range(i, 3)})
    return g, A


@given(seeds)
def test_eigen_invariants(seed):
    g, A = random_pair(seed)
    eig = eigen_structure(A, g, GridSpec.uniform(4))
    GV = eig.G @ eig.vectors
    scale = 1 + np.abs(eig.values).max()
    pair = np.abs(eig.A @ eig.vectors - GV * eig.values[..., None, :]).max()
    assert pair < 1e-9 * scale
    ortho = np.swapaxes(eig.vectors, -1, -2) @ GV
    assert np.abs(ortho - np.eye(3)).max() < 1e-9
    assert np.abs(eig.reconstruct() - eig.A).max() < 1e-9 * scale
    assert np.all(np.diff(eig.values, axis=-1) >= 0)


def test_sign_alignment_is_continuous():
    ex = named_example("torus")
    eig = eigen_structure(ex.A, ex.g, ex.grid)
    v = eig.mu_vector
    for ax in range(3):
        dots = np.einsum("...i,...i->...", np.take(v, range(1, v.shape[ax]), axis=ax),
                         np.take(v, range(0, v.shape[ax] - 1), axis=ax))
        assert dots.min() > 0


@pytest.mark.parametrize("name", [n for n in BATTERY if named_example(n).is_family])
def test_family_recovers_mu_lambda(name):
    ex = named_example(name)
    eig = eigen_structure(ex.A, ex.g, ex.grid)
    mu = ex.mu(eig.points)
    np.testing.assert_allclose(eig.mu, mu, atol=1e-9)
    np.testing.assert_allclose(eig.lam, ex.lam, atol=1e-9)
    v = eig.mu_vector
    assert np.abs(v[..., 1:]).max() < 1e-9


@pytest.mark.parametrize("name", BATTERY)
def test_lemmas_hold_on_battery(name):
    ex = named_example(name)
    eig = eigen_structure(ex.A, ex.g, ex.grid)
    frame = local_frame(ex.A, ex.g, eig)
    for lem in LEMMAS:
        rep = lemma_residual(lem, ex.A, ex.g, eig, frame=frame)
        assert rep.passed, (lem, rep)


def test_constant_lambda_lemma_is_exact():
    ex = named_example("torus")
    eig = eigen_structure(ex.A, ex.g, ex.grid)
    assert lemma_residual("constant", ex.A, ex.g, eig).max < 1e-10
    assert lemma_residual("integrable", ex.A, ex.g, eig).max == 0.0


@settings(max_examples=10)
@given(seeds)
def test_codazzi_implies_lemmas(seed):
    mu = f"0.5*sin({random_expression(random.Random(seed), 2)})"
    ex = build_family(2.0, mu, [(-1, 1)] * 3, grid=GridSpec.uniform(5))
    assert codazzi_residual(ex.A, ex.g, ex.grid).max < 1e-8
    eig = eigen_structure(ex.A, ex.g, ex.grid)
    frame = local_frame(ex.A, ex.g, eig)
    for lem in LEMMAS:
        assert lemma_residual(lem, ex.A, ex.g, eig, frame=frame).max < 1e-6


EXPECTED_CONDITIONS = {
    "flat_split": True, "warped_consistent": True, "time_family": True,
    "torus": False, "inconsistent_warp": False, "xy_family": False,
}


@pytest.mark.parametrize("name", BATTERY)
def test_condition_booleans_agree(name):
    ex = named_example(name)
    eig = eigen_structure(ex.A, ex.g, ex.grid)
    cond = char_conditions(ex.A, ex.g, eig)
    assert cond.agree
    assert set(cond.booleans.values()) == {EXPECTED_CONDITIONS[name]}


@pytest.mark.parametrize("name", ["time_family", "torus"])
@pytest.mark.parametrize("c", [-0.5, 3.0])
def test_condition_booleans_shift_invariant(name, c):
    ex = named_example(name)
    A2 = shifted(ex.A, ex.g, c)
    grid = GridSpec.uniform(5)
    b1 = char_conditions(ex.A, ex.g, eigen_structure(ex.A, ex.g, grid)).booleans
    b2 = char_conditions(A2, ex.g, eigen_structure(A2, ex.g, grid)).booleans
    assert b1 == b2


def test_warp_extraction_warped_consistent():
    ex = named_example("warped_consistent")
    assert codazzi_residual(ex.A, ex.g, ex.grid).max < 1e-8
    eig = eigen_structure(ex.A, ex.g, ex.grid)
    w = eta_and_warp_extract(ex.A, ex.g, eig)
    assert w.axis == 0
    assert np.abs(w.eta - 1).max() < 1e-5
    t = ex.grid.axes(ex.chart)[0]
    np.testing.assert_allclose(w.q_profile(), 2 * t, atol=1e-8)
    np.testing.assert_allclose(w.h, np.broadcast_to(np.eye(2), w.h.shape), atol=1e-8)
    assert w.warp.max < 1e-5 and w.leaf_constancy.max < 1e-5
    # independent oracle: finite differences of the sampled h along t
    dh = np.gradient(w.h, t, axis=0, edge_order=2)
    assert np.abs(dh).max() < 1e-6


def test_constant_lambda_gives_trivial_warp():
    ex = named_example("time_family")
    eig = eigen_structure(ex.A, ex.g, ex.grid)
    w = eta_and_warp_extract(ex.A, ex.g, eig)
    assert np.abs(w.eta).max() < 1e-9
    assert np.abs(w.q).max() < 1e-9


def test_torus_is_not_warped():
    ex = named_example("torus")
    eig = eigen_structure(ex.A, ex.g, GridSpec.uniform(7))
    with pytest.raises(NotWarpedEvidence):
        eta_and_warp_extract(ex.A, ex.g, eig)


def test_misaligned_frame_reported():
    g = euclidean(UNIT)
    A = SymTensorField.from_spec(UNIT, {"tt": "1.5", "tx": "0.5", "xx": "1.5", "yy": "1"})
    eig = eigen_structure(A, g, GridSpec.uniform(5))
    assert char_conditions(A, g, eig).all_true
    with pytest.raises(MisalignedFrame):
        eta_and_warp_extract(A, g, eig)


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=50), st.floats(1e-6, 1e3))
def test_residual_report_invariants(vals, tol):
    v = np.array(vals)
    rep = ResidualReport.from_values("x", v, np.zeros((len(v), 3)), tol)
    assert rep.max >= rep.mean >= 0
    assert rep.passed == (rep.max < tol)


def test_condition_names_cover_all():
    ex = named_example("flat_split")
    cond = char_conditions(ex.A, ex.g, eigen_structure(ex.A, ex.g, ex.grid))
    assert tuple(cond.reports) == CONDITIONS
