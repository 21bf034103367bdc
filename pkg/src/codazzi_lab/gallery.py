"""Named metrics and tensors: the two-eigenvalue family, its counterexamples,
and the admissible ``mu`` forms with their characteristics residual."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .codazzi import ResidualReport, grid_points
from .errors import BadParams, EigenvalueCollision
from .exprlang import ScalarExpr, eval_jet2, parse, substitute, to_text
from .geometry import (TOL_COLLISION, Chart, GridSpec, MetricField, SymTensorField, euclidean,
                       pullback_metric)

TWO_PI = 2.0 * math.pi
FAMILY_COORDS = ("t", "x", "y")


@dataclass(frozen=True)
class Example:
    """A metric, a symmetric tensor, and the sampling defaults that go with them."""

    name: str
    g: MetricField
    A: SymTensorField
    grid: GridSpec
    probe: tuple
    lam: float | None = None
    mu: ScalarExpr | None = None
    description: str = ""
    tags: tuple = field(default_factory=tuple)

    @property
    def chart(self) -> Chart:
        return self.g.chart

    @property
    def is_family(self) -> bool:
        return self.mu is not None


FamilyInstance = Example


def _mu_expr(mu, chart: Chart) -> ScalarExpr:
    if isinstance(mu, ScalarExpr):
        if mu.chart_vars != chart.coords:
            mu = substitute(mu, {}, chart.coords)
        return mu
    return parse(str(mu), chart.coords)


def build_family(lam: float, mu, domain: Sequence[tuple[float, float]],
                 periodic: Sequence[bool] | None = None, coords: Sequence[str] = FAMILY_COORDS,
                 grid: GridSpec | None = None, probe=None, name: str = "family",
                 tol_collision: float = TOL_COLLISION, description: str = "") -> Example:
    """``g = (lam - mu)^-2 dt^2 + lam sum dx_i^2`` with ``A = mu dt (x) dt`` on
    the first axis and ``lam`` on the rest, stored in (0,2) form.

    The collision check runs on ``grid`` (default 11 nodes per axis).
    """
    lam = float(lam)
    if lam <= 0:
        raise BadParams("lambda must be a positive constant")
    chart = Chart(tuple(coords), tuple(domain), periodic)
    mu = _mu_expr(mu, chart)
    grid = grid or GridSpec.uniform(11, chart.dim)
    pts = grid.points(chart)
    gap = lam - eval_jet2(mu, pts).value
    if np.any(np.abs(gap) < tol_collision):
        k = np.unravel_index(int(np.argmin(np.abs(gap))), gap.shape)
        raise EigenvalueCollision(tuple(float(c) for c in pts[k]), float(abs(gap[k])))
    m = to_text(mu.root)
    lam_s = repr(lam)
    gtt = f"({lam_s} - ({m}))^(-2)"
    g = MetricField.diagonal(chart, [gtt] + [lam_s] * (chart.dim - 1))
    A = SymTensorField.diagonal(chart, [f"({m}) * {gtt}"] + [repr(lam * lam)] * (chart.dim - 1))
    if probe is None:
        probe = tuple(float(np.mean(ax)) for ax in grid.axes(chart))
    return Example(name, g, A, grid, tuple(float(c) for c in probe), lam, mu, description,
                   ("family",))


def torus() -> Example:
    return build_family(1.0, "0.5*sin(x)*cos(y)", [(0.0, TWO_PI)] * 3, (True, True, True),
                        grid=GridSpec.uniform(11), probe=(0.0, 0.0, 0.0), name="torus",
                        description="lam = 1, mu = sin(x)cos(y)/2 on the 3-torus")


def inconsistent_warp() -> Example:
    return build_family(1.0, "1 + y/x^2", [(0.0, 1.0), (0.5, 1.5), (0.5, 1.5)],
                        grid=GridSpec.uniform(9), probe=(0.0, 1.0, 1.0),
                        name="inconsistent_warp",
                        description="lam = 1, mu = 1 + y/x^2: g = x^4/y^2 dt^2 + dx^2 + dy^2")


def flat() -> Example:
    chart = Chart(FAMILY_COORDS, [(0.0, 1.0)] * 3)
    g = euclidean(chart)
    A = SymTensorField.from_spec(chart, g.component_texts())
    return Example("flat", g, A, GridSpec.uniform(7), (0.5, 0.5, 0.5),
                   description="Euclidean metric with A = g")


def flat_split() -> Example:
    chart = Chart(FAMILY_COORDS, [(0.0, 1.0)] * 3)
    g = euclidean(chart)
    A = SymTensorField.diagonal(chart, ["2", "1", "1"])
    return Example("flat_split", g, A, GridSpec.uniform(7), (0.5, 0.5, 0.5),
                   description="Euclidean metric with A = g + dt^2 (mu = 2, lam = 1)")


def warped_consistent() -> Example:
    # w = e^t, lam = e^t, mu = lam + lam' w / w' = 2 e^t
    chart = Chart(FAMILY_COORDS, [(0.0, 1.0)] * 3)
    g = MetricField.diagonal(chart, ["1", "exp(2*t)", "exp(2*t)"])
    A = SymTensorField.diagonal(chart, ["2*exp(t)", "exp(3*t)", "exp(3*t)"])
    return Example("warped_consistent", g, A, GridSpec.uniform(9), (0.5, 0.5, 0.5),
                   description="g = dt^2 + e^(2t)(dx^2 + dy^2), lam = e^t, mu = 2 e^t")


def time_family() -> Example:
    return build_family(1.0, "1 + t", [(0.5, 1.5), (0.0, 1.0), (0.0, 1.0)],
                        grid=GridSpec.uniform(7), name="time_family",
                        description="lam = 1, mu = 1 + t (mu independent of x, y)")


def xy_family() -> Example:
    return build_family(1.0, "x*y", [(0.0, 1.0), (-0.75, 0.75), (-0.75, 0.75)],
                        grid=GridSpec.uniform(7), probe=(0.5, 0.0, 0.0), name="xy_family",
                        description="lam = 1, mu = x y")


NAMED = {
    "torus": torus,
    "inconsistent_warp": inconsistent_warp,
    "flat": flat,
    "warped_consistent": warped_consistent,
    "flat_split": flat_split,
    "time_family": time_family,
    "xy_family": xy_family,
}

# instances used for the lemma and condition battery; all carry two clusters
BATTERY = ("flat_split", "torus", "inconsistent_warp", "warped_consistent",
           "time_family", "xy_family")


def named_example(name: str) -> Example:
    try:
        return NAMED[name]()
    except KeyError:
        raise KeyError(f"unknown example {name!r}; choose from {sorted(NAMED)}") from None


def polar_map(source: Chart | None = None):
    """``(t, r, theta) -> (t, r cos theta, r sin theta)``."""
    source = source or Chart(("t", "r", "theta"), [(0.0, 1.0), (0.1, 3.0), (-math.pi, math.pi)])
    return source, [parse(s, source.coords) for s in ("t", "r*cos(theta)", "r*sin(theta)")]


def polar_form_of_inconsistent_warp(source: Chart) -> MetricField:
    """The displayed polar expression ``dr^2 + r^2 (cos^4/sin^2 dt^2 + dtheta^2)``."""
    return MetricField.diagonal(source, ["r^2*cos(theta)^4/sin(theta)^2", "1", "r^2"])


def polar_pullback_residual(n: int = 11, tol: float = 1e-10, r_range=(0.5, 2.0),
                            theta_range=(0.2, 1.4)) -> ResidualReport:
    """Componentwise gap between the pulled-back inconsistent_warp metric and
    its displayed polar form on an ``(r, theta)`` grid (three ``t`` slices)."""
    target = Chart(FAMILY_COORDS, [(0.0, 1.0), (-3.0, 3.0), (-3.0, 3.0)])
    g = MetricField.from_spec(target, inconsistent_warp().g.component_texts())
    source, phi = polar_map(Chart(("t", "r", "theta"), [(0.0, 1.0), r_range, theta_range]))
    grid = GridSpec((3, n, n))
    pts = grid.points(source)
    pulled = pullback_metric(phi, g, pts, source)
    shown = polar_form_of_inconsistent_warp(source).values(pts)
    res = np.abs(pulled - shown).max(axis=(-1, -2))
    return ResidualReport.from_values("polar_pullback", res, pts, tol, grid=grid.counts)


# --------------------------------------------------------------------------
# mu forms

def _num(v: float) -> str:
    v = float(v)
    return f"({v!r})" if v < 0 else repr(v)


def _compose(G: ScalarExpr, arg_text: str, coords) -> ScalarExpr:
    if len(G.chart_vars) != 1:
        raise BadParams("G must be an expression in exactly one variable")
    return substitute(G, {G.chart_vars[0]: parse(arg_text, coords)}, coords)


def mu_form(k: int, params: Mapping[str, float] | None = None, G: ScalarExpr | None = None,
            coords: Sequence[str] = FAMILY_COORDS) -> ScalarExpr:
    """The ``k``-th admissible form of ``mu(x, y)``.

    ``params`` holds ``c1..c4`` for form 1 and ``a, b, c`` for forms 2-4.
    Forms 5 and 6 take ``G`` as a function of ``x`` or ``y`` respectively.
    """
    params = dict(params or {})
    coords = tuple(coords)
    if "x" not in coords or "y" not in coords:
        raise BadParams("mu forms need coordinates named x and y")
    if k == 1:
        c1, c2, c3, c4 = (float(params.get(f"c{i}", 0.0)) for i in range(1, 5))
        text = f"1 + {_num(c1)}/(1 - {_num(c3)}*x - {_num(c4)}*y - {_num(c2)}*(x^2 + y^2))"
        return parse(text, coords)
    if k in (5, 6):
        if G is None:
            raise BadParams(f"form {k} needs G")
        return _compose(G, "x" if k == 5 else "y", coords)
    if G is None:
        raise BadParams(f"form {k} needs G")
    a, b, c = (float(params.get(n, 0.0)) for n in ("a", "b", "c"))
    if k == 2:
        if a == 0 or b == 0:
            raise BadParams("form 2 needs a != 0 and b != 0")
        inner = _compose(G, f"({_num(c)} + {_num(a)}*y)/({_num(a)}*({_num(b)} + {_num(a)}*x))", coords)
        return parse(f"({_num(a)}*x + ({inner}))/({_num(a)}*x + {_num(b)})", coords)
    if k == 3:
        if a == 0 or b != 0:
            raise BadParams("form 3 needs a != 0 and b = 0")
        inner = _compose(G, f"x/({_num(c)} + {_num(a)}*y)", coords)
        return parse(f"({_num(a)}*y + ({inner}))/({_num(c)} + {_num(a)}*y)", coords)
    if k == 4:
        if a != 0 or b == 0:
            raise BadParams("form 4 needs a = 0 and b != 0")
        return _compose(G, f"({_num(b)}*y - {_num(c)}*x)/{_num(b)}", coords)
    raise BadParams(f"form index must be 1..6, got {k}")


def characteristics_defect(mu: ScalarExpr, a: float, b: float, c: float, points):
    """``(ax + b) mu_x + (ay + c) mu_y - a (1 - mu)`` pointwise."""
    ix, iy = mu.chart_vars.index("x"), mu.chart_vars.index("y")
    pts = np.asarray(points, dtype=float)
    jet = eval_jet2(mu, pts)
    x, y = pts[..., ix], pts[..., iy]
    return ((a * x + b) * jet.grad[..., ix] + (a * y + c) * jet.grad[..., iy]
            - a * (1.0 - jet.value))


def characteristics_residual(mu: ScalarExpr, a: float, b: float, c: float, grid,
                             chart: Chart | None = None, tol: float = 1e-10) -> ResidualReport:
    if isinstance(grid, GridSpec):
        if chart is None:
            raise ValueError("a GridSpec needs a chart")
        pts, counts = grid.points(chart), grid.counts
    else:
        pts, counts = np.asarray(grid, dtype=float), None
    res = np.abs(characteristics_defect(mu, a, b, c, pts))
    return ResidualReport.from_values(f"characteristics(a={a}, b={b}, c={c})", res, pts, tol,
                                      grid=counts)


def parameter_sweep(values=(-1.0, 0.0, 1.0)):
    """All ``(a, b, c)`` from ``values``^3 except the origin."""
    return [(a, b, c) for a in values for b in values for c in values if (a, b, c) != (0, 0, 0)]


__all__ = [
    "Example", "FamilyInstance", "build_family", "named_example", "NAMED", "BATTERY",
    "mu_form", "characteristics_residual", "characteristics_defect", "parameter_sweep",
    "polar_map", "polar_form_of_inconsistent_warp", "polar_pullback_residual",
]
