"""Discrete test for a function with ``Hess f = a g`` and nonzero gradient.

The equation is linear in the unknown pair ``(f, a)``.  On a grid it becomes
a sparse system ``L (f, a) = 0`` whose numerical kernel is computed by SVD;
a kernel vector whose ``f`` has a nonvanishing gradient at the probe point
certifies a warped product with interval base near that point.

Stencils: central first derivatives, the three-point second derivative on
the diagonal, and for each mixed pair the two seven-point stencils

    [f(+,+) - f(+,0) - f(0,+) + 2 f(0,0) - f(-,0) - f(0,-) + f(-,-)] / (2 h_i h_j)
   -[f(+,-) - f(+,0) - f(0,-) + 2 f(0,0) - f(-,0) - f(0,+) + f(-,+)] / (2 h_i h_j)

as separate rows.  Both are exact on quadratics; either one alone (or the
symmetric four-point stencil) lets the free per-node ``a`` absorb an
oscillating grid mode and inflates the kernel.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .codazzi import ResidualReport, grid_points
from .errors import ConvergenceFailure, GridTooCoarse
from .exprlang import ScalarExpr, eval_jet2
from .geometry import Chart, GridSpec, MetricField, hessian_scalar, sample_metric

SIGMA_REL_TOL = 1e-6
GRAD_TOL_SCALE = 1e-3
DENSE_LIMIT = 10_000
N_SECONDARY = 5
VERDICTS = ("warped_candidate", "no_nontrivial_solution", "inconclusive")


# --------------------------------------------------------------------------
# Assembly

@dataclass
class HessSystem:
    """Sparse system ``D_ij f - Gamma^k_ij D_k f - a g_ij = 0`` on a grid.

    Columns hold ``f`` at every node some stencil touches, then ``a`` at each
    equation node.  Rows run over equation nodes and ``rows_per_node``
    entries ``(i, j, orientation)``: one per diagonal pair, two per mixed pair.
    Each row is scaled by ``1 / |g(p)|_F``.
    """

    chart: Chart
    grid: GridSpec
    matrix: sp.csr_matrix
    f_nodes: np.ndarray
    eq_nodes: np.ndarray
    pairs: tuple
    row_scale: np.ndarray

    @property
    def shape(self):
        return tuple(self.grid.counts)

    @property
    def n_f(self) -> int:
        return len(self.f_nodes)

    @property
    def n_a(self) -> int:
        return len(self.eq_nodes)

    @property
    def n_unknowns(self) -> int:
        return self.n_f + self.n_a

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    def pack(self, f_grid, a_grid) -> np.ndarray:
        """Column vector from node arrays of ``f`` and ``a``."""
        f = np.asarray(f_grid, dtype=float).reshape(-1)
        a = np.broadcast_to(np.asarray(a_grid, dtype=float), self.shape).reshape(-1)
        return np.concatenate([f[self.f_nodes], a[self.eq_nodes]])

    def unpack(self, v):
        """Node arrays ``(f, a)``; nodes without an unknown hold NaN."""
        v = np.asarray(v, dtype=float)
        f = np.full(self.grid.size, np.nan)
        a = np.full(self.grid.size, np.nan)
        f[self.f_nodes] = v[: self.n_f]
        a[self.eq_nodes] = v[self.n_f:]
        return f.reshape(self.shape), a.reshape(self.shape)

    def constant_vector(self) -> np.ndarray:
        v = np.zeros(self.n_unknowns)
        v[: self.n_f] = 1.0
        return v / np.linalg.norm(v)

    def residual(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)

    def sample(self, fn) -> np.ndarray:
        """Evaluate ``fn(points)`` on the grid nodes."""
        return fn(self.grid.points(self.chart))


def _equation_mask(counts, periodic):
    masks = []
    for c, per in zip(counts, periodic):
        m = np.ones(c, dtype=bool)
        if not per:
            m[0] = m[-1] = False
        masks.append(m)
    out = np.ones(tuple(counts), dtype=bool)
    for k, m in enumerate(masks):
        shape = [1] * len(masks)
        shape[k] = -1
        out = out & m.reshape(shape)
    return out


def _stencils(n, h):
    """(offset, weight) lists: per axis for ``D_k`` and per row key for ``D_ij``."""
    def e(*axes_signs):
        off = [0] * n
        for ax, s in axes_signs:
            off[ax] += s
        return tuple(off)

    first = []
    for k in range(n):
        first.append([(e((k, 1)), 0.5 / h[k]), (e((k, -1)), -0.5 / h[k])])
    second = {}
    for i in range(n):
        for j in range(i, n):
            if i == j:
                w = 1.0 / h[i] ** 2
                second[i, j, 0] = [(e((i, 1)), w), (e(), -2 * w), (e((i, -1)), w)]
                continue
            for o in (1, -1):
                w = o * 0.5 / (h[i] * h[j])
                second[i, j, o] = [(e((i, 1), (j, o)), w), (e((i, 1)), -w), (e((j, o)), -w),
                                   (e(), 2 * w), (e((i, -1)), -w), (e((j, -o)), -w),
                                   (e((i, -1), (j, -o)), w)]
    return first, second


def assemble_hess_system(g: MetricField, grid: GridSpec) -> HessSystem:
    """Discretize ``Hess f - a g`` on ``grid``.

    Equations sit on interior nodes (every node along periodic axes).  ``f``
    unknowns exist wherever a stencil reaches; ``a`` only at equation nodes.
    """
    chart = g.chart
    counts = np.array(grid.counts)
    n = chart.dim
    if len(counts) != n:
        raise ValueError(f"grid has {len(counts)} axes, chart has {n}")
    if np.any(counts < 5):
        raise GridTooCoarse(f"need at least 5 nodes per axis, got {tuple(counts)}")
    h = grid.spacing(chart)
    eq_mask = _equation_mask(counts, chart.periodic)
    eq_multi = np.argwhere(eq_mask)
    eq_flat = np.ravel_multi_index(eq_multi.T, counts)
    pts = grid.points(chart).reshape(-1, n)[eq_flat]
    s = sample_metric(g, pts)
    G, Gamma = s.G, s.Gamma
    scale = 1.0 / np.linalg.norm(G, axis=(-1, -2))
    first, second = _stencils(n, h)
    pairs = tuple(second)
    per = np.array(chart.periodic)

    def neighbor(off):
        m = eq_multi + np.array(off)
        m = np.where(per, np.mod(m, counts), m)
        return np.ravel_multi_index(m.T, counts)

    nbr_cache = {}

    def nbr(off):
        if off not in nbr_cache:
            nbr_cache[off] = neighbor(off)
        return nbr_cache[off]

    n_eq = len(eq_flat)
    rows, cols, vals = [], [], []
    for r, (i, j, o) in enumerate(pairs):
        row_ids = np.arange(n_eq) * len(pairs) + r
        for off, w in second[i, j, o]:
            rows.append(row_ids)
            cols.append(nbr(off))
            vals.append(w * scale)
        for k in range(n):
            coef = -Gamma[:, k, i, j] * scale
            for off, w in first[k]:
                rows.append(row_ids)
                cols.append(nbr(off))
                vals.append(w * coef)
        rows.append(row_ids)
        cols.append(-1 - np.arange(n_eq))  # a columns, remapped below
        vals.append(-G[:, i, j] * scale)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    is_f = cols >= 0
    f_nodes = np.unique(cols[is_f])
    col_of_node = np.full(int(np.prod(counts)), -1)
    col_of_node[f_nodes] = np.arange(len(f_nodes))
    cols = np.where(is_f, col_of_node[np.where(is_f, cols, 0)], len(f_nodes) + (-1 - cols))
    shape = (n_eq * len(pairs), len(f_nodes) + n_eq)
    L = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    L.sum_duplicates()
    L.eliminate_zeros()
    return HessSystem(chart, grid, L, f_nodes, eq_flat, pairs, np.repeat(scale, len(pairs)))


# --------------------------------------------------------------------------
# Kernel

@dataclass
class KernelBasis:
    """Orthonormal numerical kernel of a HessSystem."""

    system: HessSystem
    vectors: np.ndarray  # (n_unknowns, dim)
    singular_values: np.ndarray  # smallest first, as computed
    sigma_max: float
    sigma_rel_tol: float
    method: str

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def threshold(self) -> float:
        return self.sigma_rel_tol * self.sigma_max

    def tail(self, k: int = 12) -> list[float]:
        """The ``k`` smallest singular values relative to ``sigma_max``."""
        return [float(s / self.sigma_max) for s in self.singular_values[:k]]

    def residuals(self) -> np.ndarray:
        return np.linalg.norm(self.system.matrix @ self.vectors, axis=0)


def _dense_kernel(L: sp.csr_matrix):
    R = sla.qr(L.toarray(), mode="r", check_finite=False)[0]
    R = R[: L.shape[1]]
    _, s, vt = sla.svd(R, full_matrices=True, check_finite=False, lapack_driver="gesdd")
    order = np.argsort(s)
    return s[order], vt[order].T


def _iterative_kernel(L: sp.csr_matrix, k: int, seed: int):
    M = (L.T @ L).tocsc()
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(M.shape[0])
    try:
        top = spla.eigsh(M, k=1, which="LA", v0=v0, return_eigenvectors=False)
        smax2 = float(top[0])
        shift = -1e-13 * smax2
        vals, vecs = spla.eigsh(M, k=k, sigma=shift, which="LM", v0=v0, maxiter=5000)
    except spla.ArpackNoConvergence as exc:
        raise ConvergenceFailure(f"ARPACK did not converge: {exc}") from exc
    order = np.argsort(vals)
    s = np.sqrt(np.clip(vals[order], 0.0, None))
    return s, vecs[:, order], np.sqrt(smax2)


def kernel_basis(system: HessSystem, sigma_rel_tol: float = SIGMA_REL_TOL, method: str = "auto",
                 k_max: int = 12, seed: int = 0) -> KernelBasis:
    """Right singular vectors with ``sigma < sigma_rel_tol * sigma_max``.

    ``method="auto"`` uses a dense QR + SVD up to ``DENSE_LIMIT`` unknowns and
    shift-invert Lanczos on ``L^T L`` (``k_max`` smallest pairs) above it.
    """
    L = system.matrix
    if method == "auto":
        method = "dense" if system.n_unknowns <= DENSE_LIMIT else "iterative"
    if method == "dense":
        s, V = _dense_kernel(L)
        smax = float(s[-1])
    elif method == "iterative":
        k = min(k_max, system.n_unknowns - 2)
        s, V, smax = _iterative_kernel(L, k, seed)
        if np.all(s < sigma_rel_tol * smax):
            raise ConvergenceFailure(f"all {k} computed singular values are below threshold; "
                                     "raise k_max")
    else:
        raise ValueError(f"unknown kernel method {method!r}")
    keep = s < sigma_rel_tol * smax
    vecs = V[:, keep]
    if vecs.shape[1]:
        vecs = np.linalg.qr(vecs)[0]
    # fixed orientation: largest-magnitude component positive
    for c in range(vecs.shape[1]):
        if vecs[np.argmax(np.abs(vecs[:, c])), c] < 0:
            vecs[:, c] *= -1
    return KernelBasis(system, vecs, s, smax, sigma_rel_tol, method)


# --------------------------------------------------------------------------
# Classification

def _node_gradient(f_grid, counts, h, periodic, node):
    """Second-order FD gradient of node values at a multi-index."""
    n = len(counts)
    grad = np.empty(n)
    for k in range(n):
        def at(d):
            m = list(node)
            m[k] += d
            if periodic[k]:
                m[k] %= counts[k]
            return f_grid[tuple(m)]
        i = node[k]
        if periodic[k] or 0 < i < counts[k] - 1:
            grad[k] = (at(1) - at(-1)) / (2 * h[k])
        elif i == 0:
            grad[k] = (-3 * at(0) + 4 * at(1) - at(2)) / (2 * h[k])
        else:
            grad[k] = (3 * at(0) - 4 * at(-1) + at(-2)) / (2 * h[k])
    return grad


def _nearest_node(system: HessSystem, point):
    """Nearest equation node to ``point`` (periodic distance on periodic axes)."""
    chart = system.chart
    pts = system.grid.points(chart).reshape(-1, chart.dim)[system.eq_nodes]
    d = pts - np.asarray(point, dtype=float)
    for i, per in enumerate(chart.periodic):
        if per:
            L = chart.lengths[i]
            d[:, i] = (d[:, i] + L / 2) % L - L / 2
    k = int(np.argmin(np.einsum("ij,ij->i", d, d)))
    flat = int(system.eq_nodes[k])
    return np.unravel_index(flat, system.shape), pts[k]


@dataclass
class WarpVerdict:
    verdict: str
    kernel_dim: int
    gradient_norms: list
    probe: tuple
    probe_node: tuple
    grad_tol: float
    max_gradient: float
    secondary_probes: list = field(default_factory=list)
    secondary_gradients: list = field(default_factory=list)
    singular_tail: list = field(default_factory=list)
    certificate: np.ndarray | None = None
    certificate_residual: float | None = None
    fit: dict | None = None
    system: HessSystem | None = field(default=None, repr=False)

    @property
    def is_warped(self) -> bool:
        return self.verdict == "warped_candidate"

    def certificate_fields(self):
        """Node arrays ``(f, a)`` of the certificate, or None."""
        if self.certificate is None:
            return None
        return self.system.unpack(self.certificate)

    def certificate_table(self):
        """Rows ``(coords..., f, a)`` over nodes that carry an ``f`` unknown."""
        if self.certificate is None:
            return None
        f, a = self.certificate_fields()
        pts = self.system.grid.points(self.system.chart).reshape(-1, self.system.chart.dim)
        idx = self.system.f_nodes
        return np.column_stack([pts[idx], f.reshape(-1)[idx], a.reshape(-1)[idx]])

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "kernel_dim": self.kernel_dim,
            "probe": list(self.probe),
            "probe_node": [int(i) for i in self.probe_node],
            "grad_tol": self.grad_tol,
            "max_gradient": self.max_gradient,
            "gradient_norms": list(self.gradient_norms),
            "secondary_probes": [list(p) for p in self.secondary_probes],
            "secondary_gradients": list(self.secondary_gradients),
            "singular_tail": list(self.singular_tail),
            "certificate_residual": self.certificate_residual,
            "fit": self.fit,
        }


def _monomials(names, degree=2):
    terms = [()]
    for d in range(1, degree + 1):
        terms += list(itertools.combinations_with_replacement(range(len(names)), d))
    return terms


def _term_text(term, names):
    return "*".join(names[i] for i in term) if term else "1"


def polynomial_fit(points, values, names, degree: int = 2) -> dict:
    """Least-squares polynomial of total degree ``degree``."""
    pts = np.asarray(points, dtype=float)
    vals = np.asarray(values, dtype=float)
    ok = np.isfinite(vals)
    pts, vals = pts[ok], vals[ok]
    terms = _monomials(names, degree)
    X = np.column_stack([np.prod(pts[:, list(t)], axis=1) if t else np.ones(len(pts))
                         for t in terms])
    coef, *_ = np.linalg.lstsq(X, vals, rcond=None)
    coef = np.where(np.abs(coef) < 1e-12 * max(1.0, np.abs(coef).max()), 0.0, coef)
    rms = float(np.sqrt(np.mean((X @ coef - vals) ** 2)))
    text = " + ".join(f"({float(c)!r})*{_term_text(t, names)}" for c, t in zip(coef, terms) if c != 0)
    return {"terms": [_term_text(t, names) for t in terms], "coefficients": coef.tolist(),
            "rms_residual": rms, "expression": text or "0"}


def default_grad_tol(chart: Chart) -> float:
    return GRAD_TOL_SCALE * chart.diameter


def classify_warped(basis: KernelBasis, g: MetricField, probe, grad_tol: float | None = None,
                    seed: int = 0, n_secondary: int = N_SECONDARY) -> WarpVerdict:
    """Decide whether the kernel holds an ``f`` with nonzero gradient at ``probe``.

    Kernel vectors are stripped of the constant direction and rescaled so each
    ``f`` has unit RMS over the grid.  The gradient norm ``|df|_g`` is taken
    at the equation node nearest ``probe``; the certificate maximizes it over
    unit-RMS combinations.
    """
    system = basis.system
    chart = system.chart
    grad_tol = default_grad_tol(chart) if grad_tol is None else float(grad_tol)
    counts, h, periodic = system.shape, system.grid.spacing(chart), chart.periodic
    probe = tuple(float(c) for c in probe)
    node, _ = _nearest_node(system, probe)

    V = basis.vectors
    c0 = system.constant_vector()
    V = V - np.outer(c0, c0 @ V)
    B = np.zeros((system.n_unknowns, 0))
    if V.shape[1]:
        F = V[: system.n_f] / np.sqrt(system.n_f)
        U, s, Wt = np.linalg.svd(F, full_matrices=False)
        keep = s > 1e-8 * max(1.0, s.max(initial=0.0))
        B = V @ Wt[keep].T / s[keep]

    fgrids = [system.unpack(B[:, c])[0] for c in range(B.shape[1])]

    def gradient_map(nd):
        if not fgrids:
            return np.zeros((chart.dim, 0))
        p = system.grid.points(chart)[tuple(nd)]
        Ginv = sample_metric(g, p).Ginv
        C = np.linalg.cholesky(Ginv)
        D = np.column_stack([_node_gradient(fg, counts, h, periodic, nd) for fg in fgrids])
        return C.T @ D

    J = gradient_map(node)
    norms = np.linalg.norm(J, axis=0)
    top, w = 0.0, None
    if J.shape[1]:
        _, sj, wt = np.linalg.svd(J, full_matrices=False)
        top, w = float(sj[0]), wt[0]

    rng = np.random.default_rng(seed)
    picks = rng.choice(len(system.eq_nodes), size=min(n_secondary, len(system.eq_nodes)),
                       replace=False)
    pts = system.grid.points(chart).reshape(-1, chart.dim)
    sec_nodes = [np.unravel_index(int(system.eq_nodes[k]), counts) for k in picks]
    sec_probes = [tuple(float(c) for c in pts[system.eq_nodes[k]]) for k in picks]
    sec_grad = [float(np.linalg.norm(gradient_map(nd), 2)) if fgrids else 0.0
                for nd in sec_nodes]

    cert = cert_res = fit = None
    if top > grad_tol:
        verdict = "warped_candidate"
        cert = B @ w
        f_grid = system.unpack(cert)[0]
        if _node_gradient(f_grid, counts, h, periodic, node) @ np.ones(chart.dim) < 0:
            cert = -cert
        cert_res = float(np.linalg.norm(system.matrix @ cert)
                         / (basis.sigma_max * np.linalg.norm(cert)))
        f_grid, a_grid = system.unpack(cert)
        allpts = system.grid.points(chart).reshape(-1, chart.dim)
        fit = {"f": polynomial_fit(allpts, f_grid.reshape(-1), chart.coords),
               "a": polynomial_fit(allpts, a_grid.reshape(-1), chart.coords)}
    elif all(gv <= grad_tol for gv in sec_grad):
        verdict = "no_nontrivial_solution"
    else:
        verdict = "inconclusive"
    return WarpVerdict(verdict, basis.dim, [float(x) for x in norms], probe,
                       tuple(int(i) for i in node), grad_tol, top, sec_probes, sec_grad,
                       basis.tail(), cert, cert_res, fit, system)


def detect_warped(g: MetricField, grid: GridSpec, probe, sigma_rel_tol: float = SIGMA_REL_TOL,
                  grad_tol: float | None = None, seed: int = 0, method: str = "auto"):
    """Assemble, extract the kernel and classify; returns ``(basis, verdict)``."""
    system = assemble_hess_system(g, grid)
    basis = kernel_basis(system, sigma_rel_tol, method=method, seed=seed)
    return basis, classify_warped(basis, g, probe, grad_tol, seed=seed)


def verify_candidate(f: ScalarExpr, a: ScalarExpr, g: MetricField, grid,
                     tol: float = 1e-8) -> ResidualReport:
    """``max_ij |Hess f(d_i, d_j) - a g_ij|`` with exact derivatives of ``f``."""
    pts, counts = grid_points(g, grid)
    H = hessian_scalar(f, g, pts)
    G = sample_metric(g, pts).G
    av = eval_jet2(a, pts).value
    res = np.abs(H - av[..., None, None] * G).max(axis=(-1, -2))
    return ResidualReport.from_values(f"hess({f}) - ({a}) g", res, pts, tol, grid=counts)


__all__ = [
    "HessSystem", "KernelBasis", "WarpVerdict", "assemble_hess_system", "kernel_basis",
    "classify_warped", "detect_warped", "verify_candidate", "polynomial_fit",
    "default_grad_tol", "SIGMA_REL_TOL", "VERDICTS",
]
