"""Codazzi residuals, eigenstructure of A relative to g, and the lemma and
condition checks for tensors with a simple eigenvalue ``mu`` and an
``(n-1)``-fold eigenvalue ``lam``.

Derivatives of eigen-data (eigenvalues, the spectral projector onto the
``lam`` cluster, the unit ``mu`` eigenvector) are central finite differences
of the pointwise eigensolve with one Richardson step.  Only quantities that
are invariant under rotations inside the ``lam`` cluster are differentiated:
sections of that eigendistribution are taken as ``P_lam(.) b`` for fixed
vectors ``b``, which makes every residual below independent of the basis
chosen at a point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import ClusterAmbiguity, MisalignedFrame, NotWarpedEvidence
from .geometry import GridSpec, MetricField, SymField, nabla_tensor, norm_g, sample_metric

TOL_CODAZZI = 1e-8
TOL_LEMMA = 1e-6
TOL_COND = 1e-5
TOL_WARP = 1e-5
CLUSTER_TOL = 1e-6
FD_STEP = 1e-3

LEMMAS = ("same", "constant", "integrable", "derivative")
CONDITIONS = (1, 2, 3, 4)


@dataclass
class ResidualReport:
    name: str
    max: float
    mean: float
    argmax: tuple | None
    n_points: int
    excluded: int
    tolerance: float
    grid: tuple | None = None
    notes: str = ""

    @property
    def passed(self) -> bool:
        return self.n_points > 0 and self.max < self.tolerance

    @classmethod
    def from_values(cls, name, values, points, tolerance, include=None, grid=None, notes=""):
        values = np.asarray(values, dtype=float)
        pts = np.asarray(points, dtype=float).reshape(values.shape + (-1,))
        include = np.ones(values.shape, dtype=bool) if include is None else np.asarray(include)
        include = include & np.isfinite(values)
        excluded = int(values.size - include.sum())
        if not include.any():
            return cls(name, 0.0, 0.0, None, 0, excluded, tolerance, grid,
                       (notes + "; " if notes else "") + "no included points")
        v = np.where(include, values, -np.inf)
        k = np.unravel_index(int(np.argmax(v)), v.shape)
        return cls(name, float(values[k]), float(values[include].mean()),
                   tuple(float(c) for c in pts[k]), int(include.sum()), excluded,
                   tolerance, grid, notes)

    def to_dict(self):
        return {
            "name": self.name,
            "grid": list(self.grid) if self.grid is not None else None,
            "max": self.max,
            "mean": self.mean,
            "argmax": list(self.argmax) if self.argmax is not None else None,
            "n_points": self.n_points,
            "excluded": self.excluded,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "notes": self.notes,
        }


def grid_points(field: SymField, grid):
    """Resolve a GridSpec (on the field's chart) or an explicit point array."""
    if isinstance(grid, GridSpec):
        return grid.points(field.chart), grid.counts
    pts = np.asarray(grid, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    return pts, None


# --------------------------------------------------------------------------
# Codazzi identity

def codazzi_defect(A: SymField, g: MetricField, points):
    """Per-point ``max |(nabla_i A)_jk - (nabla_j A)_ik|`` and a validity mask."""
    s = sample_metric(g, points, errors="mask")
    T, dT, _, bad = A.jets(points, errors="mask")
    nab = nabla_tensor(T, dT, s.Gamma)
    diff = np.abs(nab - np.swapaxes(nab, -3, -2))
    return diff.max(axis=(-1, -2, -3)), ~(bad | s.bad)


def codazzi_residual(A: SymField, g: MetricField, grid, tol: float = TOL_CODAZZI) -> ResidualReport:
    pts, counts = grid_points(g, grid)
    res, ok = codazzi_defect(A, g, pts)
    return ResidualReport.from_values("codazzi", res, pts, tol, ok, counts)


# --------------------------------------------------------------------------
# Eigenstructure

def generalized_eigh(Amat, G):
    """Solve ``A v = kappa G v`` pointwise; eigenvectors are G-orthonormal."""
    L = np.linalg.cholesky(G)
    Linv = np.linalg.inv(L)
    C = Linv @ Amat @ np.swapaxes(Linv, -1, -2)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    kappa, U = np.linalg.eigh(C)
    return kappa, np.swapaxes(Linv, -1, -2) @ U


def cluster_labels(kappa, cluster_tol: float = CLUSTER_TOL):
    """Single-linkage clustering of ascending eigenvalues by relative gap."""
    scale = np.maximum(np.abs(kappa).max(axis=-1, keepdims=True), 1e-300)
    gaps = np.diff(kappa, axis=-1) / scale
    labels = np.zeros(kappa.shape, dtype=int)
    labels[..., 1:] = np.cumsum(gaps >= cluster_tol, axis=-1)
    return labels


def _two_cluster_split(labels):
    """Return (is_two_cluster, index of the simple eigenvalue)."""
    n = labels.shape[-1]
    ncl = labels[..., -1] + 1
    first_simple = (labels[..., 0] != labels[..., 1]) if n > 1 else np.ones(labels.shape[:-1], bool)
    last_simple = (labels[..., -1] != labels[..., -2]) if n > 1 else first_simple
    two = (ncl == 2) & (n >= 3) & (first_simple ^ last_simple)
    mu_index = np.where(first_simple, 0, n - 1)
    return two, mu_index


@dataclass
class EigenStructure:
    """Pointwise spectrum of A relative to g on a grid.

    ``vectors[..., :, c]`` is the G-orthonormal eigenvector of
    ``values[..., c]``.  For two-cluster points ``mu``, ``lam`` and
    ``mu_vector`` hold the simple eigenvalue, the mean of the (n-1)-fold
    cluster and the sign-aligned unit eigenvector of ``mu``.
    """

    points: np.ndarray
    values: np.ndarray
    vectors: np.ndarray
    labels: np.ndarray
    excluded: np.ndarray      # domain error or non-SPD metric
    ambiguous: np.ndarray     # clusters merge where the field is otherwise split
    two_cluster: np.ndarray
    mu_index: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    mu_vector: np.ndarray
    flipped: np.ndarray
    G: np.ndarray
    A: np.ndarray
    cluster_tol: float = CLUSTER_TOL
    grid: tuple | None = None

    @property
    def included(self):
        return self.two_cluster & ~self.excluded & ~self.ambiguous

    @property
    def is_two_eigenvalue(self) -> bool:
        """True when every usable point shows the simple/(n-1)-fold split."""
        usable = ~self.excluded & ~self.ambiguous
        return bool(usable.any() and self.two_cluster[usable].all())

    @property
    def n_clusters(self):
        return self.labels[..., -1] + 1

    @property
    def lam_basis(self):
        """G-orthonormal basis of the lam cluster, shape ``(..., n, n-1)``."""
        n = self.values.shape[-1]
        idx = np.arange(n)
        keep = idx[None, :] != self.mu_index.reshape(-1, 1)
        V = self.vectors.reshape((-1, n, n))
        out = np.stack([V[k][:, keep[k]] for k in range(V.shape[0])])
        return out.reshape(self.vectors.shape[:-1] + (n - 1,))

    def reconstruct(self):
        """``G V diag(kappa) V^T G``, which must reproduce A."""
        GV = self.G @ self.vectors
        return np.einsum("...ic,...c,...jc->...ij", GV, self.values, GV)

    def summary(self):
        return {
            "n_points": int(self.values[..., 0].size),
            "two_cluster_points": int(self.included.sum()),
            "excluded": int(self.excluded.sum()),
            "ambiguous": int(self.ambiguous.sum()),
            "is_two_eigenvalue": self.is_two_eigenvalue,
            "mu_range": _range(self.mu, self.included),
            "lam_range": _range(self.lam, self.included),
        }


def _range(x, mask):
    if not mask.any():
        return None
    return [float(x[mask].min()), float(x[mask].max())]


def _previous_neighbor(idx, shape):
    for axis in range(len(shape) - 1, -1, -1):
        if idx[axis] > 0:
            prev = list(idx)
            prev[axis] -= 1
            return tuple(prev)
    return None


def eigen_structure(A: SymField, g: MetricField, grid, cluster_tol: float = CLUSTER_TOL) -> EigenStructure:
    pts, counts = grid_points(g, grid)
    s = sample_metric(g, pts, errors="mask")
    T, _, _, bad_a = A.jets(pts, errors="mask")
    excluded = s.bad | bad_a
    T = np.where(excluded[..., None, None], np.eye(g.dim), T)
    kappa, V = generalized_eigh(T, s.G)
    labels = cluster_labels(kappa, cluster_tol)
    two, mu_index = _two_cluster_split(labels)
    single = (labels[..., -1] == 0) & ~excluded
    ambiguous = single & bool((two & ~excluded).any())
    n = g.dim

    mu = np.take_along_axis(kappa, mu_index[..., None], axis=-1)[..., 0]
    lam = (kappa.sum(axis=-1) - mu) / max(n - 1, 1)
    vmu = np.take_along_axis(V, mu_index[..., None, None], axis=-1)[..., 0]

    # sequential sign sweep in C order: match each simple eigenvector to the
    # previous grid neighbour
    shape = kappa.shape[:-1]
    flipped = np.zeros(shape, dtype=bool)
    simple = np.zeros(kappa.shape, dtype=bool)
    simple[..., 1:-1] = (labels[..., 1:-1] != labels[..., :-2]) & (labels[..., 1:-1] != labels[..., 2:])
    simple[..., 0] = labels[..., 0] != labels[..., 1]
    simple[..., -1] = labels[..., -1] != labels[..., -2]
    for idx in np.ndindex(*shape):
        prev = _previous_neighbor(idx, shape)
        if excluded[idx]:
            continue
        if two[idx]:
            v = vmu[idx]
            if prev is not None and two[prev] and not excluded[prev]:
                flip = v @ s.G[idx] @ vmu[prev] < 0
            else:
                flip = v[np.argmax(np.abs(v))] < 0
            if flip:
                vmu[idx] = -v
                V[idx + (slice(None), mu_index[idx])] *= -1
                flipped[idx] = True
        elif simple[idx].all() and prev is not None and simple[prev].all() and not excluded[prev]:
            for c in range(n):
                if V[idx][:, c] @ s.G[idx] @ V[prev][:, c] < 0:
                    V[idx + (slice(None), c)] *= -1
                    flipped[idx] = True

    return EigenStructure(pts, kappa, V, labels, excluded, ambiguous, two & ~excluded,
                          mu_index, mu, lam, vmu, flipped, s.G, T, cluster_tol, counts)


def eigen_at(A: SymField, g: MetricField, p, cluster_tol: float = CLUSTER_TOL):
    """Single-point eigen-data ``(mu, lam, unit mu eigenvector)``.

    Raises ClusterAmbiguity when the spectrum has fewer than two clusters.
    """
    pts = np.asarray(p, dtype=float)[None, :]
    G = sample_metric(g, pts).G
    T = A.values(pts)
    kappa, V = generalized_eigh(T, G)
    labels = cluster_labels(kappa, cluster_tol)
    if labels[0, -1] == 0:
        raise ClusterAmbiguity(tuple(float(c) for c in pts[0]))
    two, mu_index = _two_cluster_split(labels)
    if not two[0]:
        raise ClusterAmbiguity(tuple(float(c) for c in pts[0]))
    k = int(mu_index[0])
    mu = float(kappa[0, k])
    lam = float((kappa[0].sum() - mu) / (len(kappa[0]) - 1))
    return mu, lam, V[0, :, k]


# --------------------------------------------------------------------------
# Local frame: eigen-data and their derivatives at included points

def _spectral_data(A: SymField, g: MetricField, pts, cluster_tol):
    G = g.values(pts)
    T = A.values(pts)
    kappa, V = generalized_eigh(T, G)
    labels = cluster_labels(kappa, cluster_tol)
    two, mu_index = _two_cluster_split(labels)
    n = G.shape[-1]
    mu = np.take_along_axis(kappa, mu_index[..., None], axis=-1)[..., 0]
    lam = (kappa.sum(axis=-1) - mu) / (n - 1)
    v = np.take_along_axis(V, mu_index[..., None, None], axis=-1)[..., 0]
    # (1,1) projector onto V_mu is v v^T G; its complement projects onto V_lam
    P_mu = np.einsum("...k,...l,...lj->...kj", v, v, G)
    P_lam = np.eye(n) - P_mu
    return {"mu": mu, "lam": lam, "v": v, "P_lam": P_lam, "two": two}


def _richardson(fun, pts, h):
    """Central differences along every axis with one Richardson step.

    ``fun(points)`` returns an array with leading shape ``pts.shape[:-1]``;
    the result gains a derivative axis right after the batch axes.
    """
    n = pts.shape[-1]
    out = []
    for m in range(n):
        e = np.zeros(n)
        e[m] = 1.0
        d_h = (fun(pts + h * e) - fun(pts - h * e)) / (2 * h)
        d_h2 = (fun(pts + 0.5 * h * e) - fun(pts - 0.5 * h * e)) / h
        out.append((4.0 * d_h2 - d_h) / 3.0)
    return np.stack(out, axis=pts.ndim - 1)


@dataclass
class LocalFrame:
    """Everything the lemma and condition checks need at included points."""

    points: np.ndarray       # (M, n)
    include: np.ndarray      # (M,) usable after derivative stencils
    G: np.ndarray
    Ginv: np.ndarray
    Gamma: np.ndarray
    M: np.ndarray            # (1,1) form G^-1 A
    mu: np.ndarray
    lam: np.ndarray
    v: np.ndarray            # unit mu eigenvector
    basis: np.ndarray        # (M, n, n-1) G-orthonormal lam basis
    dmu: np.ndarray          # (M, n)
    dlam: np.ndarray         # (M, n)
    dtrace: np.ndarray       # (M, n), exact
    dP: np.ndarray           # (M, n, n, n): d_m (P_lam)^k_l
    dv: np.ndarray           # (M, n, n): d_m v^k
    grid_mask: np.ndarray = field(default=None)   # (grid...) -> rows of points
    fd_step: float = FD_STEP


def local_frame(A: SymField, g: MetricField, eig: EigenStructure, fd_step: float = FD_STEP) -> LocalFrame:
    mask = eig.included
    pts = eig.points[mask]
    cl = eig.cluster_tol
    s = sample_metric(g, pts)
    T, dT, _ = A.jets(pts)
    M = s.Ginv @ T
    # d tr(G^-1 A) = tr(G^-1 dA) - tr(G^-1 dG G^-1 A)
    dtrace = (np.einsum("...ij,...mji->...m", s.Ginv, dT)
              - np.einsum("...ij,...mjk,...ki->...m", s.Ginv, s.dG, M))

    vref = eig.mu_vector[mask]
    valid = np.ones(len(pts), dtype=bool)

    def spectral(q):
        d = _spectral_data(A, g, q, cl)
        valid[...] &= d["two"]
        return d

    def aligned_v(q):
        v = spectral(q)["v"]
        sgn = np.sign(np.einsum("...i,...i->...", v, vref))
        sgn[sgn == 0] = 1.0
        return v * sgn[..., None]

    with np.errstate(all="ignore"):
        dmu = _richardson(lambda q: spectral(q)["mu"], pts, fd_step)
        dlam = _richardson(lambda q: spectral(q)["lam"], pts, fd_step)
        dv = _richardson(aligned_v, pts, fd_step)
        dP = _richardson(lambda q: spectral(q)["P_lam"], pts, fd_step)

    return LocalFrame(pts, valid, s.G, s.Ginv, s.Gamma, M, eig.mu[mask], eig.lam[mask],
                      vref, eig.lam_basis[mask], dmu, dlam, dtrace, dP, dv, mask, fd_step)


def _nabla_section(F: LocalFrame, Y, b):
    """``nabla_Y X`` for the section ``X = P_lam(.) b`` with ``P_lam b = b`` here."""
    return (np.einsum("...m,...mkl,...l->...k", Y, F.dP, b)
            + np.einsum("...kmj,...m,...j->...k", F.Gamma, Y, b))


def _gdot(G, a, b):
    return np.einsum("...i,...ij,...j->...", a, G, b)


def _lemma_values(F: LocalFrame, lemma_id: str):
    n = F.points.shape[-1]
    B = [F.basis[..., :, a] for a in range(n - 1)]
    if lemma_id == "same":
        grad_lam = np.einsum("...ij,...j->...i", F.Ginv, F.dlam)
        out = np.zeros(len(F.points))
        for X in B:
            for Y in B:
                nYX = _nabla_section(F, Y, X)
                R = (np.einsum("...kl,...l->...k", F.M, nYX) - F.lam[:, None] * nYX
                     - np.einsum("...m,...m->...", F.dlam, Y)[:, None] * X
                     + _gdot(F.G, X, Y)[:, None] * grad_lam)
                out = np.maximum(out, norm_g(F.G, R))
        return out
    if lemma_id == "constant":
        return np.max([np.abs(np.einsum("...m,...m->...", F.dlam, Y)) for Y in B], axis=0)
    if lemma_id == "integrable":
        out = np.zeros(len(F.points))
        for a in range(len(B)):
            for b in range(a + 1, len(B)):
                br = _nabla_section(F, B[a], B[b]) - _nabla_section(F, B[b], B[a])
                out = np.maximum(out, np.abs(_gdot(F.G, F.v, br)))
        return out
    if lemma_id == "derivative":
        out = np.zeros(len(F.points))
        for Y in B:
            nvY = _nabla_section(F, F.v, Y)
            r = np.abs(np.einsum("...m,...m->...", F.dmu, Y)
                       - (F.lam - F.mu) * _gdot(F.G, nvY, F.v))
            out = np.maximum(out, r)
        return out
    raise ValueError(f"unknown lemma {lemma_id!r}; choose from {LEMMAS}")


def _report_on_grid(name, values, F: LocalFrame, eig: EigenStructure, tol, notes=""):
    full = np.full(eig.included.shape, np.nan)
    full[eig.included] = np.where(F.include, values, np.nan)
    return ResidualReport.from_values(name, full, eig.points, tol, np.isfinite(full), eig.grid, notes)


def lemma_residual(lemma_id: str, A: SymField, g: MetricField, eig: EigenStructure, grid=None,
                   tol: float = TOL_LEMMA, fd_step: float = FD_STEP,
                   frame: LocalFrame | None = None) -> ResidualReport:
    """Pointwise residual of one of the background identities.

    ``same``        |A nabla_Y X - lam nabla_Y X - (D_Y lam) X + g(X,Y) grad lam|_g
    ``constant``    |D_Y lam| for unit Y in V_lam
    ``integrable``  |V_mu component of [X, Y]| for X, Y spanning V_lam
    ``derivative``  |D_Y mu g(X,X) - (lam - mu) g(nabla_X Y, X)|, X unit in V_mu
    """
    if lemma_id not in LEMMAS:
        raise ValueError(f"unknown lemma {lemma_id!r}; choose from {LEMMAS}")
    F = frame if frame is not None else local_frame(A, g, eig, fd_step)
    vals = _lemma_values(F, lemma_id) if len(F.points) else np.zeros(0)
    return _report_on_grid(f"lemma:{lemma_id}", vals, F, eig, tol)


# --------------------------------------------------------------------------
# Characterizing conditions

@dataclass
class ConditionResult:
    reports: dict
    tolerance: float

    @property
    def booleans(self) -> dict:
        return {k: r.passed for k, r in self.reports.items()}

    @property
    def agree(self) -> bool:
        return len(set(self.booleans.values())) == 1

    @property
    def all_true(self) -> bool:
        return all(self.booleans.values())

    def to_dict(self):
        return {
            "tolerance": self.tolerance,
            "booleans": {str(k): v for k, v in self.booleans.items()},
            "agree": self.agree,
            "reports": {str(k): r.to_dict() for k, r in self.reports.items()},
        }


CONDITION_NAMES = {
    1: "trace constant along V_lam",
    2: "mu constant along V_lam",
    3: "V_mu integral curves are geodesics",
    4: "unit V_mu field is closed (locally a gradient)",
}


def _condition_values(F: LocalFrame):
    n = F.points.shape[-1]
    B = [F.basis[..., :, a] for a in range(n - 1)]
    c1 = np.max([np.abs(np.einsum("...m,...m->...", F.dtrace, Y)) for Y in B], axis=0)
    c2 = np.max([np.abs(np.einsum("...m,...m->...", F.dmu, Y)) for Y in B], axis=0)
    nabla_v = F.dv + np.einsum("...kmp,...p->...mk", F.Gamma, F.v)   # [m, k]
    c3 = norm_g(F.G, np.einsum("...m,...mk->...k", F.v, nabla_v))
    Bmat = np.einsum("...mk,...kj->...mj", nabla_v, F.G)          # g(nabla_m X, d_j)
    c4 = np.abs(Bmat - np.swapaxes(Bmat, -1, -2)).max(axis=(-1, -2))
    return {1: c1, 2: c2, 3: c3, 4: c4}


def char_conditions(A: SymField, g: MetricField, eig: EigenStructure, grid=None,
                    tol: float = TOL_COND, fd_step: float = FD_STEP,
                    frame: LocalFrame | None = None) -> ConditionResult:
    F = frame if frame is not None else local_frame(A, g, eig, fd_step)
    if len(F.points):
        vals = _condition_values(F)
    else:
        vals = {k: np.zeros(0) for k in CONDITIONS}
    reports = {k: _report_on_grid(f"condition:{k}", vals[k], F, eig, tol, CONDITION_NAMES[k])
               for k in CONDITIONS}
    return ConditionResult(reports, tol)


# --------------------------------------------------------------------------
# Warp extraction

@dataclass
class WarpExtraction:
    axis: int
    eta: np.ndarray            # on the grid
    eta_coord: np.ndarray      # (mu - lam)^-1 d_axis lam
    q: np.ndarray              # on the grid, q = 0 on the first slice
    h: np.ndarray              # e^-q g_ij on leaf indices
    leaf_constancy: ResidualReport
    warp: ResidualReport
    alignment: float
    q_spread: float

    def q_profile(self):
        """Axis nodes and q along the first grid line."""
        idx = [0] * self.q.ndim
        idx[self.axis] = slice(None)
        return self.q[tuple(idx)]

    def to_dict(self, axis_nodes=None):
        return {
            "axis": self.axis,
            "eta_min": float(np.nanmin(self.eta)),
            "eta_max": float(np.nanmax(self.eta)),
            "alignment_deviation": self.alignment,
            "q_spread_across_leaves": self.q_spread,
            "q_profile": [float(x) for x in self.q_profile()],
            "axis_nodes": None if axis_nodes is None else [float(x) for x in axis_nodes],
            "leaf_constancy": self.leaf_constancy.to_dict(),
            "warp": self.warp.to_dict(),
        }


def _alignment(eig: EigenStructure):
    """Best coordinate axis for V_mu and the worst normalized |g(v, d_i)|, i != axis."""
    mask = eig.included
    v, G = eig.mu_vector[mask], eig.G[mask]
    gv = np.einsum("...ij,...j->...i", G, v) / np.sqrt(np.einsum("...ii->...i", G))
    best, dev = None, np.inf
    for a in range(v.shape[-1]):
        others = np.delete(np.abs(gv), a, axis=-1)
        d = float(others.max()) if others.size else 0.0
        if d < dev:
            best, dev = a, d
    return best, dev


def eta_and_warp_extract(A: SymField, g: MetricField, eig: EigenStructure, grid=None,
                         tol: float = TOL_WARP, fd_step: float = FD_STEP,
                         cond_tol: float = TOL_COND, align_tol: float = 1e-8,
                         conditions: ConditionResult | None = None) -> WarpExtraction:
    """Warp rate ``eta`` and factor ``e^q`` for a frame with V_mu along a coordinate axis."""
    if eig.grid is None:
        raise ValueError("warp extraction needs a structured grid")
    if conditions is None:
        conditions = char_conditions(A, g, eig, tol=cond_tol, fd_step=fd_step)
    failed = [CONDITION_NAMES[k] for k, ok in conditions.booleans.items() if not ok]
    if failed:
        raise NotWarpedEvidence(failed)
    if not eig.included.all():
        raise NotWarpedEvidence(["two-cluster structure at every grid point"])
    axis, dev = _alignment(eig)
    if dev >= align_tol:
        raise MisalignedFrame(dev)

    cl = eig.cluster_tol

    def eta_fields(q_pts):
        d = _spectral_data(A, g, q_pts, cl)
        dl = _richardson(lambda q: _spectral_data(A, g, q, cl)["lam"], q_pts, fd_step)
        v = d["v"] * np.sign(d["v"][..., axis])[..., None]
        gap = d["mu"] - d["lam"]
        eta = np.einsum("...m,...m->...", dl, v) / gap
        return eta, dl[..., axis] / gap

    pts = eig.points
    eta, eta_coord = eta_fields(pts)
    outer = 10.0 * fd_step
    d_eta = _richardson(lambda q: eta_fields(q)[0], pts, outer)
    others = [i for i in range(g.dim) if i != axis]
    leaf = np.abs(d_eta[..., others]).max(axis=-1)
    leaf_rep = ResidualReport.from_values("eta_leaf_constancy", leaf, pts, tol, grid=eig.grid)

    nodes = pts[(0,) * axis + (slice(None),) + (0,) * (g.dim - axis - 1)][..., axis]
    q = cumulative_trapezoid(2.0 * eta_coord, x=nodes, axis=axis, initial=0.0)
    q_spread = float(np.ptp(q, axis=tuple(others)).max()) if others else 0.0

    G, dG, _ = g.jets(pts)
    sub = np.ix_(others, others)
    Gl = G[(Ellipsis,) + sub]
    dGl = dG[..., axis, :, :][(Ellipsis,) + sub]
    scale = np.exp(-q)[..., None, None]
    warp_res = np.abs(scale * (dGl - 2.0 * eta_coord[..., None, None] * Gl)).max(axis=(-1, -2))
    warp_rep = ResidualReport.from_values("warp_factor", warp_res, pts, tol, grid=eig.grid)
    return WarpExtraction(axis, eta, eta_coord, q, scale * Gl, leaf_rep, warp_rep, dev, q_spread)
