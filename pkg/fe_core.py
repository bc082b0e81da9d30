"""Element machinery: quadrature, polynomial bases, H(div) stress bases per family and the global DOF layout.

Stress bases are built directly on the physical triangle in scaled monomials
xi = (x - x_K) / h_K by inverting the matrix of degrees-of-freedom functionals.
Edge functionals are moments of (tau n_E)_i against shifted Legendre
polynomials in the global edge parameter, so neighbouring elements agree on
every shared edge DOF without sign bookkeeping.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator, Optional, Tuple

import numpy as np
from numpy.polynomial import legendre

from config import FamilyConfig
from errors import UnisolvenceError, ValidationError
from mesh import LOCAL_EDGES, Mesh2D, geometry_tables

logger = logging.getLogger(__name__)

MAX_RULE_ORDER = 20
# inverse condition numbers below this signal a broken DOF set
UNISOLVENCE_RCOND = 1e-12


# --------------------------------------------------------------------------- quadrature

@dataclass(frozen=True)
class TriangleRule:
    points: np.ndarray   # (n, 2) on the reference triangle
    weights: np.ndarray  # (n,), sum 1/2
    order: int


@dataclass(frozen=True)
class EdgeRule:
    points: np.ndarray   # (n,) on [0, 1]
    weights: np.ndarray  # (n,), sum 1
    order: int


@dataclass(frozen=True)
class QuadratureRules:
    triangle: TriangleRule
    edge: EdgeRule


def _gauss_unit(n: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def edge_rule(order: int) -> EdgeRule:
    if order < 0:
        raise ValidationError(f"Unsupported quadrature order {order}")
    s, w = _gauss_unit(max(1, math.ceil((order + 1) / 2)))
    return EdgeRule(s, w, order)


@lru_cache(maxsize=None)
def triangle_rule(order: int) -> TriangleRule:
    """Collapsed Gauss rule: x = u, y = v (1 - u) with Jacobian 1 - u."""
    if order < 0:
        raise ValidationError(f"Unsupported quadrature order {order}")
    u, wu = _gauss_unit(max(1, math.ceil((order + 2) / 2)))
    v, wv = _gauss_unit(max(1, math.ceil((order + 1) / 2)))
    U, V = np.meshgrid(u, v, indexing="ij")
    points = np.stack([U.ravel(), (V * (1.0 - U)).ravel()], axis=1)
    weights = np.outer(wu * (1.0 - u), wv).ravel()
    return TriangleRule(points, weights, order)


def quadrature_rules(order: int) -> QuadratureRules:
    if isinstance(order, bool) or not isinstance(order, (int, np.integer)) or not 1 <= order <= MAX_RULE_ORDER:
        raise ValidationError(f"Unsupported quadrature order {order!r}, expected 1..{MAX_RULE_ORDER}")
    return QuadratureRules(triangle_rule(int(order)), edge_rule(int(order)))


def shifted_legendre(n: int, s: np.ndarray) -> np.ndarray:
    """Legendre polynomials L_0..L_n on [0, 1], shape (len(s), n + 1)."""
    return legendre.legvander(2.0 * np.asarray(s, dtype=float) - 1.0, n)


def graded_quadrature(vertices: np.ndarray, corner: int, order: int, levels: int) -> Tuple[np.ndarray, np.ndarray]:
    """Composite rule on a physical triangle, dyadically refined toward one corner."""
    rule = triangle_rule(order)
    vertices = np.asarray(vertices, dtype=float)
    c = vertices[corner]
    a = vertices[(corner + 1) % 3]
    b = vertices[(corner + 2) % 3]
    pieces = []
    for _ in range(levels):
        ma, mb, mab = 0.5 * (c + a), 0.5 * (c + b), 0.5 * (a + b)
        pieces += [(ma, a, mab), (mb, mab, b), (ma, mab, mb)]
        a, b = ma, mb
    # the collapsed vertex (1, 0) of the reference rule sits on the corner
    pieces.append((a, c, b))
    points, weights = [], []
    for p0, p1, p2 in pieces:
        jac = np.stack([p1 - p0, p2 - p0], axis=1)
        points.append(p0 + rule.points @ jac.T)
        weights.append(rule.weights * abs(np.linalg.det(jac)))
    return np.concatenate(points), np.concatenate(weights)


# --------------------------------------------------------------------------- polynomials

def dim_p(p: int) -> int:
    return (p + 1) * (p + 2) // 2


@lru_cache(maxsize=None)
def monomial_exponents(p: int) -> np.ndarray:
    """Exponents (a, b) of xi^a eta^b, ordered by total degree."""
    return np.array([(d - j, j) for d in range(p + 1) for j in range(d + 1)], dtype=np.int64).reshape(-1, 2)


@lru_cache(maxsize=None)
def _monomial_index(p: int):
    return {(int(a), int(b)): i for i, (a, b) in enumerate(monomial_exponents(p))}


def monomial_values(p: int, pts: np.ndarray) -> np.ndarray:
    e = monomial_exponents(p)
    pts = np.asarray(pts, dtype=float)
    return pts[..., 0, None] ** e[:, 0] * pts[..., 1, None] ** e[:, 1]


def monomial_gradients(p: int, pts: np.ndarray) -> np.ndarray:
    e = monomial_exponents(p)
    a, b = e[:, 0], e[:, 1]
    pts = np.asarray(pts, dtype=float)
    x, y = pts[..., 0, None], pts[..., 1, None]
    dx = a * x ** np.maximum(a - 1, 0) * y ** b
    dy = b * x ** a * y ** np.maximum(b - 1, 0)
    return np.stack([dx, dy], axis=-1)


@lru_cache(maxsize=None)
def derivative_matrices(p: int) -> Tuple[np.ndarray, np.ndarray]:
    """(DX, DY) such that coef @ DX holds the coefficients of the xi-derivative."""
    index = _monomial_index(p)
    m = dim_p(p)
    dx, dy = np.zeros((m, m)), np.zeros((m, m))
    for (a, b), i in index.items():
        if a > 0:
            dx[i, index[(a - 1, b)]] = a
        if b > 0:
            dy[i, index[(a, b - 1)]] = b
    return dx, dy


def _grid_product(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Product of batched coefficient grids p[..., a, b] (xi^a eta^b)."""
    n1, n2 = p.shape[-1], q.shape[-1]
    out = np.zeros(p.shape[:-2] + (n1 + n2 - 1, n1 + n2 - 1))
    for a, b in np.ndindex(n2, n2):
        out[..., a:a + n1, b:b + n1] += p * q[..., a, b, None, None]
    return out


def _grid_dx(g: np.ndarray) -> np.ndarray:
    n = g.shape[-1]
    out = np.zeros_like(g)
    out[..., :n - 1, :] = g[..., 1:, :] * np.arange(1, n)[:, None]
    return out


def _grid_dy(g: np.ndarray) -> np.ndarray:
    n = g.shape[-1]
    out = np.zeros_like(g)
    out[..., :, :n - 1] = g[..., :, 1:] * np.arange(1, n)[None, :]
    return out


def _grid_to_monomials(g: np.ndarray, p: int) -> np.ndarray:
    e = monomial_exponents(p)
    n = g.shape[-1]
    keep = (e[:, 0] < n) & (e[:, 1] < n)
    out = np.zeros(g.shape[:-2] + (len(e),))
    out[..., keep] = g[..., e[keep, 0], e[keep, 1]]
    return out


@lru_cache(maxsize=None)
def lagrange_nodes(p: int) -> np.ndarray:
    """Lagrange nodes on the reference triangle: vertices, edge nodes per local edge, interior."""
    if p == 0:
        return np.array([[1.0 / 3.0, 1.0 / 3.0]])
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nodes = list(verts)
    for e in range(3):
        a, b = verts[LOCAL_EDGES[e]]
        nodes += [a + pos / p * (b - a) for pos in range(1, p)]
    for j in range(1, p - 1):
        for i in range(1, p - j):
            nodes.append(np.array([i / p, j / p]))
    return np.array(nodes)


@lru_cache(maxsize=None)
def _lagrange_coefficients(p: int) -> np.ndarray:
    return np.linalg.inv(monomial_values(p, lagrange_nodes(p)))


def pk_basis_eval(k: int, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Values (..., m) and reference gradients (..., m, 2) of the nodal P_k basis."""
    if k < 0:
        raise ValidationError(f"Polynomial degree must be nonnegative, got {k}")
    coef = _lagrange_coefficients(k)
    values = monomial_values(k, points) @ coef
    grads = np.einsum("...ad,ai->...id", monomial_gradients(k, points), coef)
    return values, grads


@dataclass(frozen=True)
class ScaledMonomials:
    """Scalar P_p on a physical element in the variable (x - center) / h."""

    degree: int

    @property
    def dim(self) -> int:
        return dim_p(self.degree)

    def values(self, centers: np.ndarray, h: np.ndarray, x: np.ndarray) -> np.ndarray:
        return monomial_values(self.degree, (x - centers[:, None, :]) / h[:, None, None])

    def gradients(self, centers: np.ndarray, h: np.ndarray, x: np.ndarray) -> np.ndarray:
        xi = (x - centers[:, None, :]) / h[:, None, None]
        return monomial_gradients(self.degree, xi) / h[:, None, None, None]


# --------------------------------------------------------------------------- stress bases

@dataclass(frozen=True)
class LocalStressBasis:
    """Batch of local stress bases; functions ordered edge DOFs (edge, row, mode), interior, bubbles."""

    coefficients: np.ndarray  # (B, n, 2, 2, m) in scaled monomials of degree `degree`
    divergence: np.ndarray    # (B, n, 2, m) physical row-wise divergence
    centers: np.ndarray       # (B, 2)
    h: np.ndarray             # (B,)
    degree: int
    n_edge: int
    n_interior: int
    n_bubble: int
    edge_starts: np.ndarray   # (B, 3, 2)
    edge_ends: np.ndarray     # (B, 3, 2)
    edge_normals: np.ndarray  # (B, 3, 2) normals the edge functionals use
    condition: np.ndarray = field(default=None)

    @property
    def size(self) -> int:
        return self.coefficients.shape[1]

    def _scaled(self, x: np.ndarray) -> np.ndarray:
        return monomial_values(self.degree, (x - self.centers[:, None, :]) / self.h[:, None, None])

    def values(self, x: np.ndarray) -> np.ndarray:
        """Basis values at physical points x (B, nq, 2), shape (B, nq, n, 2, 2)."""
        return np.einsum("bqm,bnijm->bqnij", self._scaled(x), self.coefficients)

    def divergences(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("bqm,bnim->bqni", self._scaled(x), self.divergence)

    def normal_traces(self, s: np.ndarray) -> np.ndarray:
        """tau n_E along every local edge at parameters s, shape (B, 3, ns, n, 2)."""
        s = np.asarray(s, dtype=float)
        pts = self.edge_starts[:, :, None, :] + s[None, None, :, None] * (self.edge_ends - self.edge_starts)[:, :, None, :]
        B = len(self.h)
        vals = self.values(pts.reshape(B, -1, 2)).reshape(B, 3, len(s), self.size, 2, 2)
        return np.einsum("besnij,bej->besni", vals, self.edge_normals)


def _edge_moments(k: int, l: int, xs: np.ndarray, starts: np.ndarray, ends: np.ndarray,
                  centers: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Moments of scaled monomials of P_k against L_0..L_l on each edge, shape (B, 3, dim P_k, l + 1)."""
    rule = edge_rule(k + l + 2)
    pts = starts[:, :, None, :] + rule.points[None, None, :, None] * (ends - starts)[:, :, None, :]
    mono = monomial_values(k, (pts - centers[:, None, None, :]) / h[:, None, None, None])
    leg = shifted_legendre(l, rule.points)
    return np.einsum("q,beqa,qj->beaj", rule.weights, mono, leg)


def _edge_functionals(moments: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Matrix of l_{e,i,j}(tau) = int (tau n_e)_i L_j ds on raw coefficients (row, col, monomial)."""
    B, _, mk, nl = moments.shape
    d = np.zeros((B, 3, 2, nl, 2, 2, mk))
    block = np.einsum("bec,beaj->bejca", normals, moments)
    for i in range(2):
        d[:, :, i, :, i, :, :] = block
    return d.reshape(B, 3 * 2 * nl, 4 * mk)


def _null_space_batch(a: np.ndarray, rank: int, what: str) -> np.ndarray:
    _, s, vh = np.linalg.svd(a)
    rcond = s[:, rank - 1] / s[:, 0]
    if np.any(rcond < UNISOLVENCE_RCOND):
        raise UnisolvenceError(f"Rank deficient {what}", {"min_rcond": float(rcond.min())})
    return np.swapaxes(vh[:, rank:, :], 1, 2)


def _barycentric_grids(xs: np.ndarray) -> np.ndarray:
    """Coefficient grids (B, 3, 2, 2) of the barycentric coordinates in scaled variables."""
    B = len(xs)
    t = np.concatenate([np.ones((B, 3, 1)), xs], axis=2)
    coef = np.linalg.inv(t)      # coef[:, r, i]: coefficient r of lambda_i in (1, xi, eta)
    grids = np.zeros((B, 3, 2, 2))
    grids[:, :, 0, 0] = coef[:, 0, :]
    grids[:, :, 1, 0] = coef[:, 1, :]
    grids[:, :, 0, 1] = coef[:, 2, :]
    return grids


def _curl_bubbles(k: int, xs: np.ndarray, q_exponents: np.ndarray) -> np.ndarray:
    """Rows curl((d_i q) b_K) for the given monomials q, coefficients (B, nq, 2, 2, dim P_{k+1})."""
    lam = _barycentric_grids(xs)
    bubble = _grid_product(_grid_product(lam[:, 0], lam[:, 1]), lam[:, 2])   # (B, 4, 4)
    B = len(xs)
    out = []
    for a, b in q_exponents:
        grad = np.zeros((2, k + 1, k + 1))
        if a > 0:
            grad[0, a - 1, b] = a
        if b > 0:
            grad[1, a, b - 1] = b
        tau = np.zeros((B, 2, 2, dim_p(k + 1)))
        for i in range(2):
            phi = _grid_product(np.broadcast_to(grad[i], (B, k + 1, k + 1)), bubble)
            tau[:, i, 0] = _grid_to_monomials(_grid_dy(phi), k + 1)
            tau[:, i, 1] = -_grid_to_monomials(_grid_dx(phi), k + 1)
        scale = np.abs(tau).max(axis=(1, 2, 3))
        out.append(tau / scale[:, None, None, None])
    return np.stack(out, axis=1)


def _divergence_coefficients(coef: np.ndarray, degree: int, h: np.ndarray) -> np.ndarray:
    dx, dy = derivative_matrices(degree)
    div = coef[..., 0, :] @ dx + coef[..., 1, :] @ dy
    return div / h[:, None, None, None]


def _build_stress_basis(cfg: FamilyConfig, vertices: np.ndarray, starts: np.ndarray, ends: np.ndarray,
                        normals: np.ndarray) -> LocalStressBasis:
    k = cfg.k
    l = cfg.neumann_degree
    B = len(vertices)
    centers = vertices.mean(axis=1)
    lengths = np.linalg.norm(vertices[:, LOCAL_EDGES[:, 1]] - vertices[:, LOCAL_EDGES[:, 0]], axis=-1)
    h = lengths.max(axis=1)
    mk = dim_p(k)
    n_raw = 4 * mk

    moments = _edge_moments(k, k, vertices, starts, ends, centers, h)
    functionals = _edge_functionals(moments[..., :l + 1], normals)
    if cfg.family == "RAFW":
        # remove the degree-k Legendre mode of tau n on every edge, one row at a time
        trace_top = _edge_functionals(moments[..., k:k + 1], normals)
        space = _null_space_batch(trace_top, 6, "RAFW trace constraints")
    else:
        space = np.broadcast_to(np.eye(n_raw), (B, n_raw, n_raw))
    n_space = space.shape[2]
    n_edge = functionals.shape[1]
    dz = functionals @ space
    interior = _null_space_batch(dz, n_edge, "edge functionals")
    dual = np.concatenate([dz, np.swapaxes(interior, 1, 2)], axis=1)
    if dual.shape[1] != n_space:
        raise UnisolvenceError("DOF count does not match the local space dimension",
                               {"dofs": dual.shape[1], "dim": n_space})
    condition = np.linalg.cond(dual)
    if not np.all(np.isfinite(condition)) or np.any(1.0 / condition < UNISOLVENCE_RCOND):
        raise UnisolvenceError("Singular DOF matrix", {"max_cond": float(np.max(condition))})
    logger.debug(f"{cfg.label} stress basis: {B} elements, max DOF matrix condition {np.max(condition):.3e}")
    coef = space @ np.linalg.inv(dual)                           # (B, n_raw, n_space)
    coef = np.swapaxes(coef, 1, 2).reshape(B, n_space, 2, 2, mk)
    full = np.zeros((B, n_space, 2, 2, dim_p(k + 1)))
    full[..., :mk] = coef

    n_bubble = 0
    if cfg.has_bubbles:
        xs = (vertices - centers[:, None, :]) / h[:, None, None]
        homogeneous = np.array([(k - j, j) for j in range(k + 1)])
        bubbles = _curl_bubbles(k, xs, homogeneous)
        n_bubble = bubbles.shape[1]
        full = np.concatenate([full, bubbles], axis=1)

    return LocalStressBasis(
        coefficients=full,
        divergence=_divergence_coefficients(full, k + 1, h),
        centers=centers, h=h, degree=k + 1,
        n_edge=n_edge, n_interior=n_space - n_edge, n_bubble=n_bubble,
        edge_starts=starts, edge_ends=ends, edge_normals=normals, condition=condition,
    )


def _cell_edges(vertices: np.ndarray):
    """Edge data of a standalone cell, oriented by local vertex numbers with outward normals."""
    lo, hi = LOCAL_EDGES.min(axis=1), LOCAL_EDGES.max(axis=1)
    starts, ends = vertices[:, lo], vertices[:, hi]
    vec = vertices[:, LOCAL_EDGES[:, 1]] - vertices[:, LOCAL_EDGES[:, 0]]
    normals = np.stack([vec[..., 1], -vec[..., 0]], axis=-1)
    return starts, ends, normals / np.linalg.norm(normals, axis=-1, keepdims=True)


def _as_cells(cell: np.ndarray) -> np.ndarray:
    cell = np.asarray(cell, dtype=float)
    cells = cell[None] if cell.ndim == 2 else cell
    d1, d2 = cells[:, 1] - cells[:, 0], cells[:, 2] - cells[:, 0]
    if np.any(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] <= 0):
        raise ValidationError("Cell vertices must be positively oriented and nondegenerate")
    return cells


def stress_basis_eval(cfg: FamilyConfig, cell: np.ndarray) -> LocalStressBasis:
    """Stress basis of one positively oriented cell (3, 2) or a batch of cells (B, 3, 2)."""
    cells = _as_cells(cell)
    return _build_stress_basis(cfg, cells, *_cell_edges(cells))


def curl_bubble_space(k: int, cell: np.ndarray) -> LocalStressBasis:
    """All bubbles curl(grad(q) b_K) for nonconstant monomials q of degree <= k."""
    cells = _as_cells(cell)
    centers = cells.mean(axis=1)
    lengths = np.linalg.norm(cells[:, LOCAL_EDGES[:, 1]] - cells[:, LOCAL_EDGES[:, 0]], axis=-1)
    h = lengths.max(axis=1)
    xs = (cells - centers[:, None, :]) / h[:, None, None]
    coef = _curl_bubbles(k, xs, monomial_exponents(k)[1:])
    starts, ends, normals = _cell_edges(cells)
    return LocalStressBasis(
        coefficients=coef, divergence=_divergence_coefficients(coef, k + 1, h),
        centers=centers, h=h, degree=k + 1, n_edge=0, n_interior=0, n_bubble=coef.shape[1],
        edge_starts=starts, edge_ends=ends, edge_normals=normals,
    )


# --------------------------------------------------------------------------- DOF layout

@dataclass(frozen=True)
class DofLayout:
    """Global numbering of (S_h, R_h, V_h); index arrays are relative to each block."""

    family: FamilyConfig
    n_edges: int
    n_triangles: int
    edge_moments: int        # l_e + 1
    n_interior: int          # polynomial interior DOFs per element
    n_bubble: int
    stress_dofs: np.ndarray        # (nt, n_local)
    rotation_dofs: np.ndarray      # (nt, dim P_rot)
    displacement_dofs: np.ndarray  # (nt, 2, dim P_{k-1})

    @property
    def n_S(self) -> int:
        return self.n_edges * 2 * self.edge_moments + self.n_triangles * (self.n_interior + self.n_bubble)

    @property
    def n_R(self) -> int:
        return self.rotation_dofs.size

    @property
    def n_V(self) -> int:
        return self.displacement_dofs.size

    @property
    def n_total(self) -> int:
        return self.n_S + self.n_R + self.n_V

    @property
    def rotation_offset(self) -> int:
        return self.n_S

    @property
    def displacement_offset(self) -> int:
        return self.n_S + self.n_R

    def edge_dofs(self, edge: int) -> np.ndarray:
        """Stress DOFs of one edge as (row, Legendre mode)."""
        per = 2 * self.edge_moments
        return (edge * per + np.arange(per)).reshape(2, self.edge_moments)


def local_stress_dimension(cfg: FamilyConfig) -> int:
    raw = 4 * dim_p(cfg.k) - (6 if cfg.family == "RAFW" else 0)
    return raw + (cfg.k + 1 if cfg.has_bubbles else 0)


def build_dof_layout(mesh: Mesh2D, cfg: FamilyConfig) -> DofLayout:
    nt, ne = mesh.n_triangles, mesh.n_edges
    moments = cfg.neumann_degree + 1
    per_edge = 2 * moments
    n_bubble = cfg.k + 1 if cfg.has_bubbles else 0
    n_interior = local_stress_dimension(cfg) - n_bubble - 3 * per_edge
    edge_part = (mesh.tri_edges[:, :, None] * per_edge + np.arange(per_edge)).reshape(nt, 3 * per_edge)
    n_cell = n_interior + n_bubble
    cell_part = ne * per_edge + np.arange(nt)[:, None] * n_cell + np.arange(n_cell)
    m_r = dim_p(cfg.rotation_degree)
    m_u = dim_p(cfg.displacement_degree)
    layout = DofLayout(
        family=cfg, n_edges=ne, n_triangles=nt, edge_moments=moments,
        n_interior=n_interior, n_bubble=n_bubble,
        stress_dofs=np.concatenate([edge_part, cell_part], axis=1),
        rotation_dofs=np.arange(nt * m_r).reshape(nt, m_r),
        displacement_dofs=np.arange(nt * 2 * m_u).reshape(nt, 2, m_u),
    )
    logger.debug(f"{cfg.label} layout: n_S={layout.n_S} n_R={layout.n_R} n_V={layout.n_V}")
    return layout


# --------------------------------------------------------------------------- edge projection

@dataclass(frozen=True)
class EdgeProjection:
    coefficients: np.ndarray  # (..., l + 1, 2) in shifted Legendre polynomials

    @property
    def degree(self) -> int:
        return self.coefficients.shape[-2] - 1

    @property
    def moments(self) -> np.ndarray:
        """int_0^1 g L_j ds for j = 0..l."""
        return self.coefficients / (2 * np.arange(self.degree + 1) + 1)[:, None]

    def __call__(self, s: np.ndarray) -> np.ndarray:
        return np.einsum("qj,...ji->...qi", shifted_legendre(self.degree, s), self.coefficients)


def edge_l2_project(g: Callable[[np.ndarray], np.ndarray], l: int, order: Optional[int] = None) -> EdgeProjection:
    """L2 projection onto [P_l]^2 of a vector function of the edge parameter s in [0, 1].

    g may return (q, 2) or a batch (..., q, 2) of edges; the projection is batched alike.
    """
    rule = edge_rule(order if order is not None else 2 * l + 20)
    values = np.asarray(g(rule.points), dtype=float)
    leg = shifted_legendre(l, rule.points)
    coef = (2 * np.arange(l + 1) + 1)[:, None] * np.einsum("q,qj,...qi->...ji", rule.weights, leg, values)
    return EdgeProjection(coef)


# --------------------------------------------------------------------------- discretization

class Discretization:
    """Mesh, family and layout bundled with per-element evaluation of every discrete space."""

    def __init__(self, mesh: Mesh2D, family: FamilyConfig, chunk_size: int = 1024):
        self.mesh = mesh
        self.family = family
        self.geometry = geometry_tables(mesh)
        self.layout = build_dof_layout(mesh, family)
        self.quad_order = family.quad_order
        self.chunk_size = chunk_size
        self.centers = mesh.centroids
        self.h = self.geometry.h_K
        self.displacement_space = ScaledMonomials(family.displacement_degree)
        self.rotation_space = ScaledMonomials(family.rotation_degree)

    def chunks(self) -> Iterator[np.ndarray]:
        nt = self.mesh.n_triangles
        for start in range(0, nt, self.chunk_size):
            yield np.arange(start, min(start + self.chunk_size, nt))

    def stress_basis(self, elements: np.ndarray) -> LocalStressBasis:
        mesh = self.mesh
        g = mesh.tri_edges[elements]
        ends = mesh.edges[g]
        x = mesh.vertices
        return _build_stress_basis(
            self.family, x[mesh.triangles[elements]], x[ends[..., 0]], x[ends[..., 1]],
            self.geometry.edge_normal[g],
        )

    def element_rule(self, elements: np.ndarray, order: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        rule = triangle_rule(order if order is not None else self.quad_order)
        v0 = self.mesh.vertices[self.mesh.triangles[elements, 0]]
        pts = v0[:, None, :] + np.einsum("bij,qj->bqi", self.geometry.jacobian[elements], rule.points)
        return pts, rule.weights[None, :] * self.geometry.det[elements, None]

    def reference_coordinates(self, elements: np.ndarray, x: np.ndarray) -> np.ndarray:
        v0 = self.mesh.vertices[self.mesh.triangles[elements, 0]]
        return np.einsum("bij,bqj->bqi", self.geometry.inverse[elements], x - v0[:, None, :])

    def displacement_values(self, elements: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.displacement_space.values(self.centers[elements], self.h[elements], x)

    def rotation_values(self, elements: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.rotation_space.values(self.centers[elements], self.h[elements], x)

    def stress_at(self, sigma: np.ndarray, basis: LocalStressBasis, elements: np.ndarray,
                  x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """sigma_h and div sigma_h at physical points, shapes (B, nq, 2, 2) and (B, nq, 2)."""
        c = sigma[self.layout.stress_dofs[elements]]
        return (np.einsum("bqnij,bn->bqij", basis.values(x), c),
                np.einsum("bqni,bn->bqi", basis.divergences(x), c))

    def rotation_at(self, rho: np.ndarray, elements: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.einsum("bqa,ba->bq", self.rotation_values(elements, x), rho[self.layout.rotation_dofs[elements]])

    def displacement_at(self, u: np.ndarray, elements: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.einsum("bqa,bia->bqi", self.displacement_values(elements, x), u[self.layout.displacement_dofs[elements]])
