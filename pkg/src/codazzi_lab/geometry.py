"""Charts, metric and tensor fields, the Levi-Civita connection and friends.

Index conventions used throughout (batch axes come first):

* ``Gamma[..., k, i, j]`` is the Christoffel symbol with upper index ``k``.
* ``dT[..., m, i, j]`` is the coordinate partial ``d_m T_ij``.
* ``nablaT[..., m, i, j]`` is ``(nabla_{d_m} T)(d_i, d_j)``.
* ``nablaV[..., m, k]`` is the ``k``-th component of ``nabla_{d_m} V``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (DegenerateMetric, DomainError, EigenvalueCollision, LeftDomain,
                     SingularJacobian)
from .exprlang import ScalarExpr, eval_jet2, parse

TOL_COLLISION = 1e-8


# --------------------------------------------------------------------------
# Charts and grids

@dataclass(frozen=True)
class Chart:
    coords: tuple[str, ...]
    domain: tuple[tuple[float, float], ...]
    periodic: tuple[bool, ...] = None

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(self.coords))
        object.__setattr__(self, "domain", tuple((float(a), float(b)) for a, b in self.domain))
        periodic = self.periodic
        if periodic is None:
            periodic = (False,) * len(self.coords)
        object.__setattr__(self, "periodic", tuple(bool(p) for p in periodic))
        if len(self.coords) < 2:
            raise ValueError("a chart needs at least two coordinates")
        if not len(self.coords) == len(self.domain) == len(self.periodic):
            raise ValueError("coords, domain and periodic must have equal length")
        if len(set(self.coords)) != len(self.coords):
            raise ValueError(f"duplicate coordinate names {self.coords}")
        for name, (lo, hi) in zip(self.coords, self.domain):
            if not lo < hi:
                raise ValueError(f"empty interval for {name}: [{lo}, {hi}]")

    @property
    def dim(self) -> int:
        return len(self.coords)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([hi - lo for lo, hi in self.domain])

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.lengths))

    def index(self, name: str) -> int:
        return self.coords.index(name)

    def wrap(self, points):
        """Map periodic coordinates back into their fundamental interval."""
        pts = np.array(points, dtype=float)
        for i, (lo, hi) in enumerate(self.domain):
            if self.periodic[i]:
                pts[..., i] = lo + np.mod(pts[..., i] - lo, hi - lo)
        return pts

    def contains(self, points, slack: float = 1e-12):
        pts = np.asarray(points, dtype=float)
        ok = np.ones(pts.shape[:-1], dtype=bool)
        for i, (lo, hi) in enumerate(self.domain):
            if not self.periodic[i]:
                ok &= (pts[..., i] >= lo - slack) & (pts[..., i] <= hi + slack)
        return ok

    def parse(self, text: str) -> ScalarExpr:
        return parse(text, self.coords)


@dataclass(frozen=True)
class GridSpec:
    """Uniform sample grid.

    Periodic axes use ``counts[i]`` equispaced nodes without the duplicate
    endpoint.  Other axes span the domain shrunk by ``margin`` on each side.
    """

    counts: tuple[int, ...]
    margin: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if any(c < 1 for c in self.counts):
            raise ValueError("grid counts must be positive")

    @classmethod
    def uniform(cls, n: int, dim: int = 3, margin: float = 0.0) -> "GridSpec":
        return cls((n,) * dim, margin)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    def axes(self, chart: Chart) -> list[np.ndarray]:
        if len(self.counts) != chart.dim:
            raise ValueError(f"grid has {len(self.counts)} axes, chart has {chart.dim}")
        out = []
        for c, (lo, hi), per in zip(self.counts, chart.domain, chart.periodic):
            if per:
                out.append(lo + (hi - lo) * np.arange(c) / c)
            else:
                a, b = lo + self.margin, hi - self.margin
                if not a < b:
                    raise ValueError("grid margin swallows the domain")
                out.append(np.linspace(a, b, c) if c > 1 else np.array([(a + b) / 2]))
        return out

    def spacing(self, chart: Chart) -> np.ndarray:
        h = []
        for ax, per, (lo, hi) in zip(self.axes(chart), chart.periodic, chart.domain):
            if per:
                h.append((hi - lo) / len(ax))
            else:
                h.append(ax[1] - ax[0] if len(ax) > 1 else hi - lo)
        return np.array(h)

    def points(self, chart: Chart) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(chart), indexing="ij")
        return np.stack(mesh, axis=-1)

    def to_dict(self):
        return {"counts": list(self.counts), "margin": self.margin}


# --------------------------------------------------------------------------
# Fields

def _coerce_entry(chart: Chart, e) -> ScalarExpr:
    if isinstance(e, ScalarExpr):
        if e.chart_vars != chart.coords:
            raise ValueError(f"expression over {e.chart_vars} on chart {chart.coords}")
        return e
    if isinstance(e, (int, float)):
        e = repr(float(e))
    return parse(str(e), chart.coords)


def _entries_from(chart: Chart, spec) -> tuple[tuple[ScalarExpr, ...], ...]:
    n = chart.dim
    grid: list[list] = [[None] * n for _ in range(n)]
    if isinstance(spec, Mapping):
        for key, e in spec.items():
            if isinstance(key, str):
                i, j = _pair_from_name(chart, key)
            else:
                i, j = key
            expr = _coerce_entry(chart, e)
            if grid[i][j] is not None and i != j and grid[i][j] != expr:
                raise ValueError(f"conflicting entries for ({i},{j})")
            grid[i][j] = grid[j][i] = expr
        zero = parse("0", chart.coords)
        grid = [[zero if c is None else c for c in row] for row in grid]
    else:
        rows = list(spec)
        if len(rows) != n or any(len(r) != n for r in rows):
            raise ValueError(f"expected a {n}x{n} matrix of expressions")
        for i in range(n):
            for j in range(i, n):
                a = _coerce_entry(chart, rows[i][j])
                b = _coerce_entry(chart, rows[j][i])
                if a != b:
                    raise ValueError(f"entries ({i},{j}) and ({j},{i}) differ: {a} vs {b}")
                grid[i][j] = grid[j][i] = a
    return tuple(tuple(r) for r in grid)


def _pair_from_name(chart: Chart, key: str) -> tuple[int, int]:
    """Resolve ``"tx"``, ``"t,x"`` or ``"r theta"`` to an index pair."""
    parts = [p for p in key.replace(",", " ").split() if p]
    if len(parts) == 2:
        return chart.index(parts[0]), chart.index(parts[1])
    for i, a in enumerate(chart.coords):
        if key.startswith(a) and key[len(a):] in chart.coords:
            return i, chart.index(key[len(a):])
    raise KeyError(f"cannot resolve component name {key!r} on chart {chart.coords}")


@dataclass(frozen=True)
class SymField:
    """Symmetric (0,2) field with one expression per index pair."""

    chart: Chart
    entries: tuple[tuple[ScalarExpr, ...], ...]

    @classmethod
    def from_spec(cls, chart: Chart, spec):
        return cls(chart, _entries_from(chart, spec))

    @classmethod
    def diagonal(cls, chart: Chart, diag: Sequence):
        return cls.from_spec(chart, {(i, i): d for i, d in enumerate(diag)})

    @property
    def dim(self):
        return self.chart.dim

    def component_texts(self) -> dict[str, str]:
        out = {}
        c = self.chart.coords
        for i in range(self.dim):
            for j in range(i, self.dim):
                out[f"{c[i]},{c[j]}"] = str(self.entries[i][j])
        return out

    def jets(self, points, errors: str = "raise"):
        """Values ``T[..., i, j]``, first partials ``dT[..., m, i, j]`` and
        second partials ``ddT[..., m, l, i, j]``; with ``errors="mask"`` a
        fourth array flags points outside the natural domain."""
        pts = np.asarray(points, dtype=float)
        n = self.dim
        batch = pts.shape[:-1]
        T = np.zeros(batch + (n, n))
        dT = np.zeros(batch + (n, n, n))
        ddT = np.zeros(batch + (n, n, n, n))
        bad = np.zeros(batch, dtype=bool)
        cache = {}
        for i in range(n):
            for j in range(i, n):
                e = self.entries[i][j]
                if e not in cache:
                    if errors == "raise":
                        cache[e] = eval_jet2(e, pts)
                    else:
                        jet, b = eval_jet2(e, pts, errors="mask")
                        bad |= b
                        cache[e] = jet
                jet = cache[e]
                for a, b in {(i, j), (j, i)}:
                    T[..., a, b] = jet.value
                    dT[..., :, a, b] = jet.grad
                    ddT[..., :, :, a, b] = jet.hess
        if errors == "raise":
            return T, dT, ddT
        return T, dT, ddT, bad

    def values(self, points):
        return self.jets(points)[0]


class MetricField(SymField):
    """Riemannian metric on a chart."""


class SymTensorField(SymField):
    """Symmetric (0,2) tensor field, e.g. a candidate Codazzi tensor."""


def euclidean(chart: Chart) -> MetricField:
    return MetricField.diagonal(chart, ["1"] * chart.dim)


# --------------------------------------------------------------------------
# Pointwise connection data

def spd_mask(G):
    """True where the symmetric matrices ``G[..., :, :]`` are positive definite."""
    G = np.asarray(G)
    ok = np.isfinite(G).all(axis=(-1, -2))
    safe = np.where(ok[..., None, None], G, np.eye(G.shape[-1]))
    try:
        np.linalg.cholesky(safe)
        return ok
    except np.linalg.LinAlgError:
        pass
    flat = safe.reshape((-1,) + G.shape[-2:])
    res = np.empty(len(flat), dtype=bool)
    for k, m in enumerate(flat):
        try:
            np.linalg.cholesky(m)
            res[k] = True
        except np.linalg.LinAlgError:
            res[k] = False
    return ok & res.reshape(G.shape[:-2])


def christoffel_from_jets(G, dG):
    """Levi-Civita symbols from metric values and first partials."""
    Ginv = np.linalg.inv(G)
    # lower[..., l, i, j] = (d_i g_jl + d_j g_il - d_l g_ij) / 2
    lower = 0.5 * (np.einsum("...ijl->...lij", dG) + np.einsum("...jil->...lij", dG) - dG)
    return np.einsum("...kl,...lij->...kij", Ginv, lower), Ginv


@dataclass
class MetricSample:
    """Metric, inverse and Christoffel symbols at a batch of points."""

    points: np.ndarray
    G: np.ndarray
    dG: np.ndarray
    Ginv: np.ndarray
    Gamma: np.ndarray
    bad: np.ndarray = field(default=None)

    @property
    def valid(self):
        return ~self.bad


def sample_metric(g: MetricField, points, errors: str = "raise") -> MetricSample:
    """Evaluate the metric and its connection at ``points``.

    ``errors="raise"`` propagates DomainError and raises DegenerateMetric at
    the first non-SPD point; ``errors="mask"`` records such points in
    ``sample.bad`` (their entries are replaced by the identity).
    """
    pts = np.asarray(points, dtype=float)
    if errors == "raise":
        G, dG, _ = g.jets(pts)
        bad = np.zeros(pts.shape[:-1], dtype=bool)
    else:
        G, dG, _, bad = g.jets(pts, errors="mask")
    spd = spd_mask(G)
    if errors == "raise" and not spd.all():
        idx = tuple(np.argwhere(~spd)[0]) if pts.ndim > 1 else ()
        raise DegenerateMetric(tuple(float(c) for c in pts[idx]))
    bad = bad | ~spd
    if bad.any():
        G = np.where(bad[..., None, None], np.eye(g.dim), G)
        dG = np.where(bad[..., None, None, None], 0.0, dG)
    Gamma, Ginv = christoffel_from_jets(G, dG)
    return MetricSample(pts, G, dG, Ginv, Gamma, bad)


def christoffel_at(g: MetricField, p) -> np.ndarray:
    """Christoffel symbols ``Gamma[..., k, i, j]`` of ``g`` at ``p``."""
    return sample_metric(g, p).Gamma


def christoffel_family_closed_form(lam: float, mu: ScalarExpr, p,
                                   tol_collision: float = TOL_COLLISION) -> np.ndarray:
    """Closed-form symbols of ``(lam - mu)^-2 dt^2 + lam * sum dx_i^2``.

    The first chart coordinate plays the role of ``t``.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    jet = eval_jet2(mu, p)
    gap = lam - jet.value
    if np.any(np.abs(gap) < tol_collision):
        pts = np.asarray(p, dtype=float)
        idx = tuple(np.argwhere(np.abs(gap) < tol_collision)[0]) if pts.ndim > 1 else ()
        raise EigenvalueCollision(tuple(float(c) for c in pts[idx]),
                                  float(np.abs(gap[idx])))
    n = jet.n
    d = jet.grad
    Gamma = np.zeros(np.shape(gap) + (n, n, n))
    Gamma[..., 0, 0, 0] = d[..., 0] / gap
    for i in range(1, n):
        Gamma[..., i, 0, 0] = -d[..., i] / (lam * gap**3)
        Gamma[..., 0, i, 0] = Gamma[..., 0, 0, i] = d[..., i] / gap
    return Gamma


# --------------------------------------------------------------------------
# Covariant derivatives

def nabla_tensor(T, dT, Gamma):
    """``(nabla_m T)_ij = d_m T_ij - Gamma^p_mi T_pj - Gamma^p_mj T_ip``."""
    return (dT
            - np.einsum("...pmi,...pj->...mij", Gamma, T)
            - np.einsum("...pmj,...ip->...mij", Gamma, T))


def nabla_vector(V, dV, Gamma):
    """``(nabla_m V)^k = d_m V^k + Gamma^k_mp V^p``; ``dV[..., m, k]``."""
    return dV + np.einsum("...kmp,...p->...mk", Gamma, V)


def _vector_jets(V: Sequence[ScalarExpr], points):
    pts = np.asarray(points, dtype=float)
    jets = [eval_jet2(c, pts) for c in V]
    vals = np.stack([j.value for j in jets], axis=-1)
    d = np.stack([j.grad for j in jets], axis=-1)  # [..., m, k]
    return vals, d


def covariant_derivative(T, g: MetricField, p, X: int | None = None):
    """Covariant derivative of a symmetric (0,2) field or of a vector field.

    ``T`` is a :class:`SymField` or a sequence of component expressions.
    Returns all directions (leading derivative axis) unless ``X`` selects one.
    """
    sample = sample_metric(g, p)
    if isinstance(T, SymField):
        vals, d, _ = T.jets(p)
        out = nabla_tensor(vals, d, sample.Gamma)
    else:
        vals, d = _vector_jets(T, p)
        out = nabla_vector(vals, d, sample.Gamma)
    if X is None:
        return out
    return out[..., X, :, :] if isinstance(T, SymField) else out[..., X, :]


def hessian_scalar(f: ScalarExpr, g: MetricField, p) -> np.ndarray:
    """``Hess f(d_i, d_j) = d_i d_j f - Gamma^k_ij d_k f``."""
    jet = eval_jet2(f, p)
    Gamma = christoffel_at(g, p)
    return jet.hess - np.einsum("...kij,...k->...ij", Gamma, jet.grad)


def hessian_family_closed_form(lam: float, mu: ScalarExpr, f: ScalarExpr, p) -> np.ndarray:
    """Hessian of ``f`` on the two-eigenvalue family via the displayed component
    formulas (first coordinate is ``t``)."""
    m, F = eval_jet2(mu, p), eval_jet2(f, p)
    gap = lam - m.value
    n = F.n
    H = F.hess.copy()
    H[..., 0, 0] = (F.hess[..., 0, 0] - m.grad[..., 0] * F.grad[..., 0] / gap
                    + np.einsum("...i,...i->...", F.grad[..., 1:], m.grad[..., 1:]) / (lam * gap**3))
    for i in range(1, n):
        H[..., 0, i] = H[..., i, 0] = F.hess[..., 0, i] - m.grad[..., i] * F.grad[..., 0] / gap
    return H


def lie_bracket(V: Sequence[ScalarExpr], W: Sequence[ScalarExpr], p) -> np.ndarray:
    """``[V, W]^k = V^m d_m W^k - W^m d_m V^k``."""
    v, dv = _vector_jets(V, p)
    w, dw = _vector_jets(W, p)
    return np.einsum("...m,...mk->...k", v, dw) - np.einsum("...m,...mk->...k", w, dv)


def norm_g(G, v):
    return np.sqrt(np.maximum(np.einsum("...i,...ij,...j->...", v, G, v), 0.0))


# --------------------------------------------------------------------------
# Geodesics

@dataclass
class Trajectory:
    points: np.ndarray
    velocities: np.ndarray
    residuals: np.ndarray  # |nabla_xdot xdot|_g per sample

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max()) if self.residuals.size else 0.0


def geodesic_residual(g: MetricField, points, velocities, accelerations):
    """``|xddot + Gamma(xdot, xdot)|_g`` along a sampled curve."""
    s = sample_metric(g, points)
    acc = accelerations + np.einsum("...kij,...i,...j->...k", s.Gamma, velocities, velocities)
    return norm_g(s.G, acc)


def integrate_geodesic(g: MetricField, p0, v0, step: float, n_steps: int) -> Trajectory:
    """Classical fixed-step RK4 for ``xddot^k + Gamma^k_ij xdot^i xdot^j = 0``.

    The residual column re-measures the geodesic equation from the sampled
    velocities (second-order differences), so it reflects integration error.
    """
    chart = g.chart

    def accel(x, v):
        Gamma = christoffel_at(g, x)
        return -np.einsum("kij,i,j->k", Gamma, v, v)

    x = np.array(p0, dtype=float)
    v = np.array(v0, dtype=float)
    xs, vs = [x.copy()], [v.copy()]
    for k in range(1, n_steps + 1):
        k1x, k1v = v, accel(x, v)
        k2x, k2v = v + 0.5 * step * k1v, accel(x + 0.5 * step * k1x, v + 0.5 * step * k1v)
        k3x, k3v = v + 0.5 * step * k2v, accel(x + 0.5 * step * k2x, v + 0.5 * step * k2v)
        k4x, k4v = v + step * k3v, accel(x + step * k3x, v + step * k3v)
        x = x + step / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + step / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not chart.contains(x):
            raise LeftDomain(k, tuple(float(c) for c in x))
        xs.append(x.copy())
        vs.append(v.copy())
    P, V = np.array(xs), np.array(vs)
    if len(V) >= 3:
        A = np.gradient(V, step, axis=0, edge_order=2)
    else:
        A = np.zeros_like(V)
    res = geodesic_residual(g, P, V, A)
    return Trajectory(chart.wrap(P), V, res)


# --------------------------------------------------------------------------
# Coordinate changes

class PullbackMetric:
    """``phi^* g`` for a coordinate map ``phi`` from ``source`` into ``g.chart``."""

    def __init__(self, phi: Sequence[ScalarExpr], g, source: Chart, check_domain: bool = True):
        if len(phi) != g.chart.dim:
            raise ValueError("map components must match the target dimension")
        self.phi = tuple(_coerce_entry(source, c) for c in phi)
        self.g = g
        self.chart = source
        self.check_domain = check_domain

    @property
    def dim(self):
        return self.chart.dim

    def values(self, points):
        pts = np.asarray(points, dtype=float)
        jets = [eval_jet2(c, pts) for c in self.phi]
        image = np.stack([j.value for j in jets], axis=-1)
        J = np.stack([j.grad for j in jets], axis=-2)  # J[..., i, a] = d_a phi^i
        det = np.linalg.det(J) if J.shape[-1] == J.shape[-2] else None
        if det is not None:
            scale = np.abs(J).max(axis=(-1, -2)) ** J.shape[-1]
            sing = np.abs(det) <= 1e-14 * np.maximum(scale, 1e-300)
            if np.any(sing):
                idx = tuple(np.argwhere(sing)[0]) if pts.ndim > 1 else ()
                raise SingularJacobian(tuple(float(c) for c in pts[idx]))
        target = getattr(self.g, "chart", None)
        if self.check_domain and target is not None:
            inside = target.contains(image)
            if not np.all(inside):
                idx = tuple(np.argwhere(~inside)[0]) if pts.ndim > 1 else ()
                raise DomainError(tuple(float(c) for c in pts[idx]), "coordinate map",
                                  "image outside target chart domain")
        G = self.g.values(image)
        return np.einsum("...ia,...ij,...jb->...ab", J, G, J)


def pullback_metric(phi: Sequence[ScalarExpr], g, p, source: Chart | None = None,
                    check_domain: bool = True) -> np.ndarray:
    """``(phi^* g)_ab = d_a phi^i d_b phi^j g_ij(phi(p))``."""
    if source is None:
        first = phi[0]
        if not isinstance(first, ScalarExpr):
            raise ValueError("pass a source chart when map components are strings")
        n = len(first.chart_vars)
        source = Chart(first.chart_vars, [(-1e300, 1e300)] * n)
    return PullbackMetric(phi, g, source, check_domain).values(p)
