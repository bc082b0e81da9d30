"""Assembly and direct solution of the mixed saddle-point system.

Unknown vector layout: [sigma | rho | u], followed by three rigid-body
multipliers when the mesh has no Dirichlet edge. Neumann data is imposed by
pinning the normal-trace moments of sigma on traction edges.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from config import FamilyConfig, SolverSettings, get_settings
from errors import IncompatibleLoadError, SolverError, ValidationError
from fe_core import Discretization, edge_l2_project, edge_rule
from material import Material
from mesh import Mesh2D

logger = logging.getLogger(__name__)

BodyLoad = Callable[[np.ndarray], np.ndarray]
# traction g(points, outward normals) -> vectors
Traction = Callable[[np.ndarray, np.ndarray], np.ndarray]

RESIDUAL_FAILURE = 1e-6


def zero_load(x: np.ndarray) -> np.ndarray:
    return np.zeros(np.shape(x))


@dataclass
class MixedSystem:
    disc: Discretization
    material: Material
    matrix: sp.csr_matrix
    rhs: np.ndarray
    pinned: np.ndarray
    pinned_values: np.ndarray
    body_load: BodyLoad
    tractions: Dict[str, Traction]
    constraints: Optional[sp.csr_matrix] = None
    rigid_load: Optional[np.ndarray] = None   # (f, r) + <g, r> per rigid-body mode
    rigid_scale: float = 0.0

    @property
    def layout(self):
        return self.disc.layout

    @property
    def mesh(self) -> Mesh2D:
        return self.disc.mesh


@dataclass
class MixedSolution:
    disc: Discretization
    material: Material
    sigma: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    body_load: BodyLoad
    tractions: Dict[str, Traction]
    residual: float = 0.0
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def mesh(self) -> Mesh2D:
        return self.disc.mesh

    @property
    def layout(self):
        return self.disc.layout

    @property
    def family(self) -> FamilyConfig:
        return self.disc.family


@dataclass(frozen=True)
class DiscreteIdentities:
    equilibrium: float     # max_K ||div sigma_h + P_h f||_{0,K}
    weak_symmetry: float   # max over rotation basis functions of |(sigma_h, eta)| / ||eta||
    load_norm: float       # ||f||_0
    stress_norm: float     # ||sigma_h||_0


def traction_values(disc: Discretization, tractions: Dict[str, Traction], edges: np.ndarray, s: np.ndarray):
    """Traction at edge parameters s on the given boundary edges, (n_edges, ns, 2), plus points."""
    mesh = disc.mesh
    x = mesh.vertices
    ends = mesh.edges[edges]
    pts = x[ends[:, 0], None, :] + s[None, :, None] * (x[ends[:, 1]] - x[ends[:, 0]])[:, None, :]
    normals = np.broadcast_to(disc.geometry.edge_normal[edges][:, None, :], pts.shape)
    values = np.zeros(pts.shape)
    labels = [mesh.edge_labels[g] for g in edges]
    for label in sorted(set(labels)):
        if label not in tractions:
            raise ValidationError(f"No traction given for boundary label '{label}'", {"label": label})
        sel = np.array([lab == label for lab in labels])
        values[sel] = np.asarray(tractions[label](pts[sel], normals[sel]), dtype=float).reshape(pts[sel].shape)
    return values, pts


def neumann_moments(disc: Discretization, tractions: Dict[str, Traction], order: int):
    """Pinned stress DOFs int_0^1 g_i L_j ds on every Neumann edge."""
    edges = disc.mesh.neumann_edges
    if len(edges) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    proj = edge_l2_project(lambda s: traction_values(disc, tractions, edges, s)[0],
                           disc.layout.edge_moments - 1, order)
    moments = np.swapaxes(proj.moments, 1, 2)
    dofs = np.stack([disc.layout.edge_dofs(g) for g in edges])
    return dofs.ravel(), moments.ravel()


def _rigid_modes(x: np.ndarray) -> np.ndarray:
    """Rigid-body modes (1,0), (0,1), (-y,x) at points, shape (..., 3, 2)."""
    one, zero = np.ones(x.shape[:-1]), np.zeros(x.shape[:-1])
    return np.stack([np.stack([one, zero], -1), np.stack([zero, one], -1),
                     np.stack([-x[..., 1], x[..., 0]], -1)], axis=-2)


def assemble(mesh: Mesh2D, material: Material, cfg: FamilyConfig, f: Optional[BodyLoad] = None,
             g: Optional[Dict[str, Traction]] = None, disc: Optional[Discretization] = None,
             settings: Optional[SolverSettings] = None) -> MixedSystem:
    settings = settings or get_settings()
    f = f or zero_load
    g = dict(g or {})
    disc = disc or Discretization(mesh, cfg)
    layout = disc.layout
    n = layout.n_total
    off_r, off_u = layout.rotation_offset, layout.displacement_offset

    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    rigid_load = np.zeros(3)
    rigid_scale = 0.0
    constraint_blocks = []

    def add(r, c, v):
        rr, cc = np.broadcast_arrays(r, c)
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(v.ravel())

    for el in disc.chunks():
        B = len(el)
        pts, w = disc.element_rule(el)
        basis = disc.stress_basis(el)
        S = basis.values(pts)
        div = basis.divergences(pts)
        phi = disc.displacement_values(el, pts)
        psi = disc.rotation_values(el, pts)
        mu = phi.shape[-1]

        a_loc = np.einsum("bq,bqnij,bqmij->bnm", w, material.compliance_apply(S), S)
        bdiv = np.einsum("bq,bqni,bqa->bian", w, div, phi).reshape(B, 2 * mu, -1)
        brot = np.einsum("bq,bqn,bqa->ban", w, S[..., 0, 1] - S[..., 1, 0], psi)

        sd = layout.stress_dofs[el]
        rd = off_r + layout.rotation_dofs[el]
        ud = off_u + layout.displacement_dofs[el].reshape(B, 2 * mu)
        add(sd[:, :, None], sd[:, None, :], a_loc)
        add(ud[:, :, None], sd[:, None, :], bdiv)
        add(sd[:, :, None], ud[:, None, :], np.swapaxes(bdiv, 1, 2))
        add(rd[:, :, None], sd[:, None, :], brot)
        add(sd[:, :, None], rd[:, None, :], np.swapaxes(brot, 1, 2))

        fv = np.asarray(f(pts), dtype=float).reshape(pts.shape)
        np.add.at(rhs, ud, -np.einsum("bq,bqi,bqa->bia", w, fv, phi).reshape(B, 2 * mu))

        if not mesh.has_dirichlet:
            modes = _rigid_modes(pts)                                 # (B, nq, 3, 2)
            constraint_blocks.append((ud, np.einsum("bq,bqri,bqa->bria", w, modes, phi).reshape(B, 3, 2 * mu)))
            rigid_load += np.einsum("bq,bqri,bqi->r", w, modes, fv)
            rigid_scale += float(np.einsum("bq,bqr->", w, np.linalg.norm(modes, axis=-1) * np.linalg.norm(fv, axis=-1)[..., None]))

    matrix = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    pinned, pinned_values = neumann_moments(disc, g, settings.boundary_quad_order)

    constraints = None
    if not mesh.has_dirichlet:
        c_rows, c_cols, c_vals = [], [], []
        for ud, block in constraint_blocks:
            r = np.broadcast_to(np.arange(3)[None, :, None], block.shape)
            c = np.broadcast_to(ud[:, None, :], block.shape)
            c_rows.append(r.ravel())
            c_cols.append(c.ravel())
            c_vals.append(block.ravel())
        constraints = sp.coo_matrix((np.concatenate(c_vals), (np.concatenate(c_rows), np.concatenate(c_cols))),
                                    shape=(3, n)).tocsr()
        edges = mesh.neumann_edges
        if len(edges):
            rule = edge_rule(settings.boundary_quad_order)
            values, pts = traction_values(disc, g, edges, rule.points)
            modes = _rigid_modes(pts)
            jac = disc.geometry.edge_length[edges]
            rigid_load += np.einsum("e,q,eqri,eqi->r", jac, rule.weights, modes, values)
            rigid_scale += float(np.einsum("e,q,eqr->", jac, rule.weights,
                                           np.linalg.norm(modes, axis=-1) * np.linalg.norm(values, axis=-1)[..., None]))

    logger.debug(f"assembled {cfg.label}: n={n}, nnz={matrix.nnz}, pinned={len(pinned)}, "
                 f"constraints={'yes' if constraints is not None else 'no'}")
    return MixedSystem(disc=disc, material=material, matrix=matrix, rhs=rhs, pinned=pinned,
                       pinned_values=pinned_values, body_load=f, tractions=g, constraints=constraints,
                       rigid_load=rigid_load if constraints is not None else None, rigid_scale=rigid_scale)


def check_load_compatibility(system: MixedSystem, tol: Optional[float] = None) -> None:
    """Net force and moment of a pure-traction load must vanish."""
    if system.rigid_load is None:
        return
    tol = tol if tol is not None else get_settings().compatibility_tol
    defect = float(np.max(np.abs(system.rigid_load)))
    if defect > tol * max(system.rigid_scale, 1e-300) and defect > 1e-300:
        raise IncompatibleLoadError("Load is not balanced against rigid-body modes",
                                    {"net_force_x": system.rigid_load[0], "net_force_y": system.rigid_load[1],
                                     "net_moment": system.rigid_load[2], "scale": system.rigid_scale})


def solve_saddle(system: MixedSystem, settings: Optional[SolverSettings] = None) -> MixedSolution:
    settings = settings or get_settings()
    check_load_compatibility(system, settings.compatibility_tol)
    layout = system.layout
    n = layout.n_total
    free = np.ones(n, dtype=bool)
    free[system.pinned] = False
    x = np.zeros(n)
    x[system.pinned] = system.pinned_values

    K = system.matrix
    k_free = K[free][:, free]
    b = system.rhs[free] - K[free][:, ~free] @ x[~free]
    n_mult = 0
    if system.constraints is not None:
        c_free = system.constraints[:, free]
        k_free = sp.bmat([[k_free, c_free.T], [c_free, None]])
        b = np.concatenate([b, np.zeros(3)])
        n_mult = 3
    k_free = sp.csc_matrix(k_free)

    try:
        lu = splu(k_free)
    except RuntimeError as e:
        cause = ("rigid-body constraints" if system.constraints is not None
                 else "DOF layout or boundary tags (no Dirichlet edge and no constraints?)")
        raise SolverError(f"Singular factorization, check {cause}: {e}", {"n": k_free.shape[0]})

    y = lu.solve(b)
    y += lu.solve(b - k_free @ y)
    b_norm = np.linalg.norm(b)
    residual = float(np.linalg.norm(b - k_free @ y) / b_norm) if b_norm > 0 else float(np.linalg.norm(k_free @ y))
    if not np.isfinite(residual) or residual > RESIDUAL_FAILURE:
        raise SolverError("Linear solve failed", {"relative_residual": residual})
    if residual > settings.residual_tol:
        logger.warning(f"Relative residual {residual:.3e} exceeds {settings.residual_tol:.1e}")
    logger.debug(f"solved n={k_free.shape[0]}, relative residual {residual:.3e}")

    x[free] = y[:int(free.sum())]
    return MixedSolution(
        disc=system.disc, material=system.material,
        sigma=x[:layout.n_S], rho=x[layout.rotation_offset:layout.displacement_offset],
        u=x[layout.displacement_offset:], body_load=system.body_load, tractions=system.tractions,
        residual=residual, multipliers=y[len(y) - n_mult:] if n_mult else np.zeros(0),
    )


def project_load(disc: Discretization, f: BodyLoad, elements: np.ndarray, pts: np.ndarray, w: np.ndarray):
    """Coefficients (B, 2, m) of the elementwise L2 projection of f onto [P_{k-1}]^2."""
    phi = disc.displacement_values(elements, pts)
    mass = np.einsum("bq,bqa,bqc->bac", w, phi, phi)
    fv = np.asarray(f(pts), dtype=float).reshape(pts.shape)
    rhs = np.einsum("bq,bqi,bqa->bai", w, fv, phi)
    return np.swapaxes(np.linalg.solve(mass, rhs), 1, 2), phi, fv


def verify_discrete_identities(sol: MixedSolution, f: Optional[BodyLoad] = None) -> DiscreteIdentities:
    f = f or sol.body_load
    disc = sol.disc
    equilibrium = weak = f_sq = s_sq = 0.0
    for el in disc.chunks():
        pts, w = disc.element_rule(el)
        basis = disc.stress_basis(el)
        sigma, div = disc.stress_at(sol.sigma, basis, el, pts)
        coef, phi, fv = project_load(disc, f, el, pts, w)
        pf = np.einsum("bqa,bia->bqi", phi, coef)
        local = np.sqrt(np.einsum("bq,bqi->b", w, (div + pf) ** 2))
        equilibrium = max(equilibrium, float(local.max()))
        psi = disc.rotation_values(el, pts)
        moments = np.einsum("bq,bq,bqa->ba", w, sigma[..., 0, 1] - sigma[..., 1, 0], psi)
        norms = np.sqrt(2.0 * np.einsum("bq,bqa->ba", w, psi ** 2))
        weak = max(weak, float(np.max(np.abs(moments) / norms)))
        f_sq += float(np.einsum("bq,bqi->", w, fv ** 2))
        s_sq += float(np.einsum("bq,bqij->", w, sigma ** 2))
    return DiscreteIdentities(equilibrium, weak, float(np.sqrt(f_sq)), float(np.sqrt(s_sq)))


def dump_system(system: MixedSystem, path: Union[str, Path]) -> None:
    """Write the assembled matrix as 0-based 'i j value' lines."""
    coo = system.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{i} {j} {v:.17g}\n")
    logger.info(f"wrote {coo.nnz} matrix entries to {path}")
