"""Displacement postprocessing: local higher-order reconstruction, then nodal (Oswald) averaging."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from assembly import MixedSolution
from errors import SolverError
from fe_core import Discretization, ScaledMonomials, dim_p, lagrange_nodes, pk_basis_eval
from material import symmetric_part
from mesh import LOCAL_EDGES, Mesh2D

logger = logging.getLogger(__name__)


@dataclass
class LocalDisplacement:
    """Discontinuous u*_h in [P_degree(K)]^2, coefficients (nt, 2, m) in scaled monomials."""

    disc: Discretization
    degree: int
    coefficients: np.ndarray

    @property
    def space(self) -> ScaledMonomials:
        return ScaledMonomials(self.degree)

    def values(self, elements: np.ndarray, x: np.ndarray) -> np.ndarray:
        phi = self.space.values(self.disc.centers[elements], self.disc.h[elements], x)
        return np.einsum("bqa,bia->bqi", phi, self.coefficients[elements])

    def gradients(self, elements: np.ndarray, x: np.ndarray) -> np.ndarray:
        """grad[..., i, j] = d u_i / d x_j."""
        dphi = self.space.gradients(self.disc.centers[elements], self.disc.h[elements], x)
        return np.einsum("bqaj,bia->bqij", dphi, self.coefficients[elements])


@dataclass
class PostField:
    """u*_h together with its continuous average u^a_h in the Lagrange space of degree `degree`."""

    u_star: LocalDisplacement
    degree: int
    nodes: np.ndarray    # (nt, n_local) global node ids
    u_avg: np.ndarray    # (n_nodes, 2)

    @property
    def disc(self) -> Discretization:
        return self.u_star.disc

    def _basis(self, elements: np.ndarray, x: np.ndarray):
        ref = self.disc.reference_coordinates(elements, x)
        vals, grads = pk_basis_eval(self.degree, ref)
        return vals, np.einsum("bqnr,brj->bqnj", grads, self.disc.geometry.inverse[elements])

    def avg_values(self, elements: np.ndarray, x: np.ndarray) -> np.ndarray:
        vals, _ = self._basis(elements, x)
        return np.einsum("bqn,bni->bqi", vals, self.u_avg[self.nodes[elements]])

    def avg_gradients(self, elements: np.ndarray, x: np.ndarray) -> np.ndarray:
        _, grads = self._basis(elements, x)
        return np.einsum("bqnj,bni->bqij", grads, self.u_avg[self.nodes[elements]])

    def avg_strain(self, elements: np.ndarray, x: np.ndarray) -> np.ndarray:
        grad = self.avg_gradients(elements, x)
        return symmetric_part(grad)


def rotation_tensor(q: np.ndarray) -> np.ndarray:
    """q J with J = [[0, 1], [-1, 0]]."""
    out = np.zeros(np.shape(q) + (2, 2))
    out[..., 0, 1] = q
    out[..., 1, 0] = -q
    return out


def local_postprocess(sol: MixedSolution) -> LocalDisplacement:
    """Per element: P_K u* = u_h and (grad u*, grad v) = (C sigma_h + rho_h, grad v) on the complement."""
    disc = sol.disc
    degree = disc.family.post_degree
    space = ScaledMonomials(degree)
    m = space.dim
    coefficients = np.zeros((disc.mesh.n_triangles, 2, m))
    for el in disc.chunks():
        pts, w = disc.element_rule(el)
        centers, h = disc.centers[el], disc.h[el]
        basis = disc.stress_basis(el)
        sigma, _ = disc.stress_at(sol.sigma, basis, el, pts)
        grad_target = sol.material.compliance_apply(sigma) + rotation_tensor(disc.rotation_at(sol.rho, el, pts))

        phi = space.values(centers, h, pts)
        dphi = space.gradients(centers, h, pts)
        psi = disc.displacement_values(el, pts)
        mu = psi.shape[-1]
        stiffness = np.einsum("bq,bqaj,bqcj->bac", w, dphi, dphi)
        moments = np.einsum("bq,bqc,bqa->bca", w, psi, phi)
        mass = np.einsum("bq,bqc,bqd->bcd", w, psi, psi)
        kkt = np.zeros((len(el), m + mu, m + mu))
        kkt[:, :m, :m] = stiffness
        kkt[:, m:, :m] = moments
        kkt[:, :m, m:] = np.swapaxes(moments, 1, 2)
        rhs = np.zeros((len(el), m + mu, 2))
        rhs[:, :m] = np.einsum("bq,bqij,bqaj->bai", w, grad_target, dphi)
        rhs[:, m:] = np.einsum("bcd,bid->bci", mass, sol.u[disc.layout.displacement_dofs[el]])
        try:
            solution = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError as e:
            raise SolverError(f"Singular local postprocessing system: {e}", {"first_element": int(el[0])})
        coefficients[el] = np.swapaxes(solution[:, :m], 1, 2)
    return LocalDisplacement(disc, degree, coefficients)


def lagrange_node_numbering(mesh: Mesh2D, p: int) -> np.ndarray:
    """Global ids of the degree-p Lagrange nodes of every element, ordered as lagrange_nodes(p)."""
    nt, nv, ne = mesh.n_triangles, mesh.n_vertices, mesh.n_edges
    tri = mesh.triangles
    cols = [tri]
    positions = np.arange(1, p)
    for e in range(3):
        a, b = tri[:, LOCAL_EDGES[e, 0]], tri[:, LOCAL_EDGES[e, 1]]
        pos = np.where((a < b)[:, None], positions[None, :], p - positions[None, :])
        cols.append(nv + mesh.tri_edges[:, e, None] * (p - 1) + pos - 1)
    n_in = (p - 1) * (p - 2) // 2
    cols.append(nv + ne * (p - 1) + np.arange(nt)[:, None] * n_in + np.arange(n_in))
    return np.concatenate(cols, axis=1).astype(np.int64)


def oswald_average(u_star: LocalDisplacement, mesh: Optional[Mesh2D] = None) -> PostField:
    """Average u*_h at every Lagrange node over the elements sharing it; zero on Dirichlet nodes."""
    disc = u_star.disc
    mesh = mesh or disc.mesh
    p = max(u_star.degree, 1)
    nodes = lagrange_node_numbering(mesh, p)
    n_nodes = mesh.n_vertices + mesh.n_edges * (p - 1) + mesh.n_triangles * (p - 1) * (p - 2) // 2
    ref = lagrange_nodes(p)
    all_el = np.arange(mesh.n_triangles)
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    x = v0[:, None, :] + np.einsum("bij,qj->bqi", disc.geometry.jacobian, ref)
    values = u_star.values(all_el, x)

    sums = np.zeros((n_nodes, 2))
    np.add.at(sums, nodes.ravel(), values.reshape(-1, 2))
    counts = np.bincount(nodes.ravel(), minlength=n_nodes)
    u_avg = sums / counts[:, None]

    if mesh.has_dirichlet:
        u_avg[mesh.dirichlet_vertices] = 0.0
        edge_nodes = mesh.n_vertices + mesh.dirichlet_edges[:, None] * (p - 1) + np.arange(p - 1)
        u_avg[edge_nodes.ravel()] = 0.0
    logger.debug(f"oswald_average: {n_nodes} nodes of degree {p}")
    return PostField(u_star=u_star, degree=p, nodes=nodes, u_avg=u_avg)


def postprocess(sol: MixedSolution) -> PostField:
    return oswald_average(local_postprocess(sol))
