"""A posteriori estimators (hypercircle and incompressibility-robust), oscillation and exact errors."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Protocol, Tuple, Union

import numpy as np
import pandas as pd

from assembly import BodyLoad, MixedSolution, Traction, project_load, traction_values
from config import get_settings
from fe_core import Discretization, edge_l2_project, edge_rule, graded_quadrature
from material import Material, asymmetry, symmetric_part
from postprocess import PostField, rotation_tensor

logger = logging.getLogger(__name__)

GOLDEN = (np.sqrt(5.0) + 1.0) / 2.0


class ExactSolution(Protocol):
    singular_point: Optional[np.ndarray]
    norms: Optional[Tuple[float, float]]    # reference (||sigma||_C, ||sigma||_0), computed on the mesh if None

    def stress(self, x: np.ndarray) -> np.ndarray: ...

    def strain(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class Oscillation:
    osc_f: float
    osc_g: float
    local_f: np.ndarray   # squared contributions per element
    local_g: np.ndarray   # squared contributions of Neumann edges, attributed to their element


@dataclass(frozen=True)
class EstimatorPart:
    """One estimator: raw value with oscillation, the weighted sum without it and per-element indicators."""

    name: str
    raw: float
    weighted: float
    local: np.ndarray
    terms: Dict[str, float]


@dataclass(frozen=True)
class ExactErrors:
    e_C_sigma: float
    e_C_u: float
    e_mean: float
    e_inc_sigma: float
    e_inc_u: float
    norm_C: float
    norm_0: float
    mean_error: float     # ||sigma - (sigma_h + A eps(u_a)) / 2||_C, not normalized


@dataclass
class EstimateReport:
    eta_local: np.ndarray
    eta_inc_local: np.ndarray
    eta: float            # relative, (T1/2 + phi T2) / ||sigma||_C
    eta_inc: float        # relative, (sqrt(mu) I1 + I2 / sqrt(mu)) / (||sigma||_0 / sqrt(mu))
    eta_raw: float
    eta_inc_raw: float
    osc_f: float
    osc_g: float
    norm_C: float
    norm_0: float
    sigma_h_C: float
    sigma_h_0: float
    hypercircle: EstimatorPart
    incompressible: EstimatorPart
    exact: Optional[ExactErrors] = None
    mu: float = 1.0

    def renormalize(self, norm_C: float, norm_0: float) -> None:
        """Rescale the relative estimators to new reference norms."""
        self.eta = self.hypercircle.weighted / norm_C
        self.eta_inc = self.incompressible.weighted / (norm_0 / np.sqrt(self.mu))
        self.norm_C, self.norm_0 = norm_C, norm_0

    @property
    def effectivity(self) -> Optional[float]:
        if self.exact is None or self.exact.mean_error == 0:
            return None
        return self.eta_raw / self.exact.mean_error


def integrate(disc: Discretization, integrand: Callable[[np.ndarray, np.ndarray], np.ndarray],
              order: Optional[int] = None, singular_point: Optional[np.ndarray] = None,
              levels: int = 4) -> np.ndarray:
    """Per-element integrals of integrand(elements, points) -> (B, nq, n_fields), shape (nt, n_fields).

    Elements with a vertex at singular_point use a rule graded toward that vertex.
    """
    mesh = disc.mesh
    order = order if order is not None else disc.quad_order
    graded = {}
    if singular_point is not None:
        hit = np.linalg.norm(mesh.vertices - np.asarray(singular_point), axis=1) < 1e-12 * max(disc.h.max(), 1.0)
        for v in np.nonzero(hit)[0]:
            for t, c in zip(*np.nonzero(mesh.triangles == v)):
                graded[int(t)] = int(c)
    out = None
    for el in disc.chunks():
        el = el[[int(t) not in graded for t in el]]
        if len(el) == 0:
            continue
        pts, w = disc.element_rule(el, order)
        vals = integrand(el, pts)
        if out is None:
            out = np.zeros((mesh.n_triangles, vals.shape[-1]))
        out[el] = np.einsum("bq,bqk->bk", w, vals)
    for t in sorted(graded):
        pts, w = graded_quadrature(mesh.vertices[mesh.triangles[t]], graded[t], order, levels)
        vals = integrand(np.array([t]), pts[None])
        if out is None:
            out = np.zeros((mesh.n_triangles, vals.shape[-1]))
        out[t] = w @ vals[0]
    return out


def compliance_norm(disc: Discretization, material: Material, stress: Callable[[np.ndarray], np.ndarray],
                    order: Optional[int] = None, singular_point: Optional[np.ndarray] = None,
                    levels: int = 4) -> float:
    """||tau||_C of an analytic stress field over the mesh."""
    def integrand(el, x):
        tau = stress(x)
        return material.compliance_inner(tau, tau)[..., None]
    return float(np.sqrt(integrate(disc, integrand, order, singular_point, levels).sum()))


def l2_norm(disc: Discretization, field_fn: Callable[[np.ndarray], np.ndarray], order: Optional[int] = None,
            singular_point: Optional[np.ndarray] = None, levels: int = 4) -> float:
    def integrand(el, x):
        v = np.asarray(field_fn(x), dtype=float)
        return (v ** 2).reshape(v.shape[:2] + (-1,)).sum(axis=-1)[..., None]
    return float(np.sqrt(integrate(disc, integrand, order, singular_point, levels).sum()))


def _discrete_terms(sol: MixedSolution, post: PostField) -> Dict[str, np.ndarray]:
    """Local squared norms of every estimator ingredient and of sigma_h."""
    disc, material = sol.disc, sol.material
    nt = disc.mesh.n_triangles
    names = ("energy", "skew_C", "consistency", "skew_0", "sigma_C", "sigma_0")
    out = {name: np.zeros(nt) for name in names}
    for el in disc.chunks():
        pts, w = disc.element_rule(el)
        basis = disc.stress_basis(el)
        sigma, _ = disc.stress_at(sol.sigma, basis, el, pts)
        grad = post.avg_gradients(el, pts)
        strain = symmetric_part(grad)
        q = disc.rotation_at(sol.rho, el, pts)
        diff = sigma - material.elasticity_apply(strain, check_symmetry=False)
        skew = asymmetry(sigma)
        consistency = material.compliance_apply(sigma) + rotation_tensor(q) - grad
        fields = {
            "energy": material.compliance_inner(diff, diff),
            "skew_C": material.compliance_inner(skew, skew),
            "consistency": np.einsum("bqij,bqij->bq", consistency, consistency),
            "skew_0": np.einsum("bqij,bqij->bq", skew, skew),
            "sigma_C": material.compliance_inner(sigma, sigma),
            "sigma_0": np.einsum("bqij,bqij->bq", sigma, sigma),
        }
        for name, values in fields.items():
            out[name][el] = np.einsum("bq,bq->b", w, values)
    return out


def oscillation(f: BodyLoad, g: Dict[str, Traction], disc: Discretization, order: Optional[int] = None) -> Oscillation:
    """osc(f) = (sum h_K^2 ||f - P_K f||^2)^(1/2), osc(g) = (sum h_E ||g - Q_E g||^2)^(1/2), constant 1."""
    mesh = disc.mesh
    local_f = np.zeros(mesh.n_triangles)
    for el in disc.chunks():
        pts, w = disc.element_rule(el)
        coef, phi, fv = project_load(disc, f, el, pts, w)
        res = fv - np.einsum("bqa,bia->bqi", phi, coef)
        local_f[el] = disc.h[el] ** 2 * np.einsum("bq,bqi->b", w, res ** 2)

    local_g = np.zeros(mesh.n_triangles)
    edges = mesh.neumann_edges
    if len(edges):
        order = order if order is not None else get_settings().boundary_quad_order
        rule = edge_rule(order)
        values, _ = traction_values(disc, g, edges, rule.points)
        proj = edge_l2_project(lambda s: traction_values(disc, g, edges, s)[0], disc.family.neumann_degree, order)
        res = values - proj(rule.points)
        length = disc.geometry.edge_length[edges]
        per_edge = length * length * np.einsum("q,eqi->e", rule.weights, res ** 2)
        np.add.at(local_g, mesh.edge_tris[edges, 0], per_edge)
    return Oscillation(float(np.sqrt(local_f.sum())), float(np.sqrt(local_g.sum())), local_f, local_g)


def hypercircle_estimate(sol: MixedSolution, post: PostField, material: Optional[Material] = None,
                         f: Optional[BodyLoad] = None, g: Optional[Dict[str, Traction]] = None,
                         terms: Optional[Dict[str, np.ndarray]] = None,
                         osc: Optional[Oscillation] = None) -> EstimatorPart:
    """1/2 ||sigma_h - A eps(u_a)||_C + (sqrt5 + 1)/2 ||sigma_h - sigma_h^T||_C + osc(f) + osc(g)."""
    if material is not None and material != sol.material:
        sol = MixedSolution(sol.disc, material, sol.sigma, sol.rho, sol.u, sol.body_load, sol.tractions)
        terms = None
    terms = terms if terms is not None else _discrete_terms(sol, post)
    osc = osc or oscillation(f or sol.body_load, g if g is not None else sol.tractions, sol.disc)
    t1 = float(np.sqrt(terms["energy"].sum()))
    t2 = float(np.sqrt(terms["skew_C"].sum()))
    weighted = 0.5 * t1 + GOLDEN * t2
    local = np.sqrt(0.25 * terms["energy"] + GOLDEN ** 2 * terms["skew_C"] + osc.local_f + osc.local_g)
    return EstimatorPart("eta", weighted + osc.osc_f + osc.osc_g, weighted, local,
                         {"energy": t1, "skew": t2})


def incompressible_estimate(sol: MixedSolution, post: PostField, material: Optional[Material] = None,
                            f: Optional[BodyLoad] = None, g: Optional[Dict[str, Traction]] = None,
                            terms: Optional[Dict[str, np.ndarray]] = None,
                            osc: Optional[Oscillation] = None) -> EstimatorPart:
    """mu^(1/2) ||C sigma_h + rho_h - grad u_a||_0 + mu^(-1/2) ||sigma_h - sigma_h^T||_0 + osc(f) + osc(g)."""
    if material is not None and material != sol.material:
        sol = MixedSolution(sol.disc, material, sol.sigma, sol.rho, sol.u, sol.body_load, sol.tractions)
        terms = None
    mu = sol.material.mu
    terms = terms if terms is not None else _discrete_terms(sol, post)
    osc = osc or oscillation(f or sol.body_load, g if g is not None else sol.tractions, sol.disc)
    i1 = float(np.sqrt(terms["consistency"].sum()))
    i2 = float(np.sqrt(terms["skew_0"].sum()))
    weighted = np.sqrt(mu) * i1 + i2 / np.sqrt(mu)
    local = np.sqrt(mu * terms["consistency"] + terms["skew_0"] / mu + osc.local_f + osc.local_g)
    return EstimatorPart("eta_inc", float(weighted) + osc.osc_f + osc.osc_g, float(weighted), local,
                         {"consistency": i1, "skew": i2})


def exact_errors(sol: MixedSolution, post: PostField, exact: ExactSolution, material: Optional[Material] = None,
                 levels: int = 4, order: Optional[int] = None) -> ExactErrors:
    material = material or sol.material
    disc = sol.disc
    order = order if order is not None else min(disc.quad_order + 4, 20)

    def integrand(el, x):
        basis = disc.stress_basis(el)
        sigma_h, _ = disc.stress_at(sol.sigma, basis, el, x)
        sigma = np.asarray(exact.stress(x), dtype=float)
        strain = np.asarray(exact.strain(x), dtype=float)
        strain_a = post.avg_strain(el, x)
        a_eps = material.elasticity_apply(strain_a, check_symmetry=False)
        e_sigma = sigma - sigma_h
        e_u = sigma - a_eps
        e_mean = sigma - 0.5 * (sigma_h + a_eps)
        e_strain = strain - strain_a
        return np.stack([
            material.compliance_inner(e_sigma, e_sigma),
            material.compliance_inner(e_u, e_u),
            material.compliance_inner(e_mean, e_mean),
            np.einsum("bqij,bqij->bq", e_sigma, e_sigma),
            np.einsum("bqij,bqij->bq", e_strain, e_strain),
            material.compliance_inner(sigma, sigma),
            np.einsum("bqij,bqij->bq", sigma, sigma),
        ], axis=-1)

    totals = np.sqrt(integrate(disc, integrand, order, getattr(exact, "singular_point", None), levels).sum(axis=0))
    norm_C, norm_0 = getattr(exact, "norms", None) or (totals[5], totals[6])
    return ExactErrors(
        e_C_sigma=float(totals[0] / norm_C), e_C_u=float(totals[1] / norm_C), e_mean=float(totals[2] / norm_C),
        e_inc_sigma=float(totals[3] / norm_0), e_inc_u=float(material.mu * totals[4] / norm_0),
        norm_C=float(norm_C), norm_0=float(norm_0), mean_error=float(totals[2]),
    )


def estimate(sol: MixedSolution, post: PostField, exact: Optional[ExactSolution] = None,
             levels: int = 4) -> EstimateReport:
    """Both estimators, oscillation and (when available) exact errors in one report."""
    terms = _discrete_terms(sol, post)
    osc = oscillation(sol.body_load, sol.tractions, sol.disc)
    eta = hypercircle_estimate(sol, post, terms=terms, osc=osc)
    eta_inc = incompressible_estimate(sol, post, terms=terms, osc=osc)
    sigma_h_C = float(np.sqrt(terms["sigma_C"].sum()))
    sigma_h_0 = float(np.sqrt(terms["sigma_0"].sum()))
    errors = exact_errors(sol, post, exact, levels=levels) if exact is not None else None
    norm_C = errors.norm_C if errors else sigma_h_C
    norm_0 = errors.norm_0 if errors else sigma_h_0
    mu = sol.material.mu
    report = EstimateReport(
        eta_local=eta.local, eta_inc_local=eta_inc.local,
        eta=eta.weighted / norm_C if norm_C > 0 else 0.0,
        eta_inc=eta_inc.weighted * np.sqrt(mu) / norm_0 if norm_0 > 0 else 0.0,
        eta_raw=eta.raw, eta_inc_raw=eta_inc.raw, osc_f=osc.osc_f, osc_g=osc.osc_g,
        norm_C=norm_C, norm_0=norm_0, sigma_h_C=sigma_h_C, sigma_h_0=sigma_h_0,
        hypercircle=eta, incompressible=eta_inc, exact=errors, mu=mu,
    )
    if report.effectivity is not None:
        logger.info(f"eta={report.eta:.4e} e_mean={errors.e_mean:.4e} effectivity={report.effectivity:.3f}")
    return report


def write_indicators(report: EstimateReport, path: Union[str, Path]) -> None:
    frame = pd.DataFrame({
        "element_id": np.arange(len(report.eta_local)),
        "eta_local": report.eta_local,
        "eta_inc_local": report.eta_inc_local,
    })
    frame.to_csv(path, index=False, float_format="%.12e")
