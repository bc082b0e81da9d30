import numpy as np
import pandas as pd
import pytest

from adaptivity import Problem, solve_problem
from assembly import assemble, solve_saddle
from bench import ManufacturedExact
from config import FamilyConfig
from estimators import (GOLDEN, compliance_norm, estimate, exact_errors, hypercircle_estimate, incompressible_estimate,
                        l2_norm, oscillation, write_indicators)
from fe_core import Discretization
from material import Material
from mesh import builtin_geometry, uniform_refine
from postprocess import postprocess


def _manufactured(family, k, resolution, material=None):
    material = material or Material(mu=1.0, lam=1.0)
    exact = ManufacturedExact(material)
    mesh = builtin_geometry("unit_square", resolution)
    sol = solve_saddle(assemble(mesh, material, FamilyConfig(family=family, k=k), exact.body_load))
    return sol, postprocess(sol), exact


def test_estimators_vanish_on_patch(patch_solution):
    report = estimate(patch_solution, postprocess(patch_solution))
    print(f"{patch_solution.family.label}: eta={report.eta_raw:.2e} eta_inc={report.eta_inc_raw:.2e}")
    assert report.eta_raw < 1e-8
    assert report.eta_inc_raw < 1e-8
    assert report.osc_f == 0.0
    assert report.osc_g < 1e-12
    assert report.exact is None
    assert report.effectivity is None
    # no closed form: the relative estimators use the discrete stress norm
    assert report.norm_C == pytest.approx(report.sigma_h_C)


def test_compliance_and_l2_norms(neumann_square):
    disc = Discretization(neumann_square, FamilyConfig(family="AFW", k=2))
    material = Material(mu=1.0, lam=1.0)
    stress = lambda x: np.broadcast_to(np.diag([2.0, -2.0]), x.shape[:-1] + (2, 2))
    assert compliance_norm(disc, material, stress) == pytest.approx(2.0)
    assert l2_norm(disc, stress) == pytest.approx(np.sqrt(8.0))
    assert l2_norm(disc, lambda x: x[..., 0], singular_point=np.zeros(2)) == pytest.approx(np.sqrt(1.0 / 3.0))


def test_oscillation():
    mesh = uniform_refine(builtin_geometry("unit_square"))
    disc = Discretization(mesh, FamilyConfig(family="AFW", k=2))
    linear = oscillation(lambda x: np.stack([1.0 + x[..., 0], 2.0 - x[..., 1]], axis=-1), {}, disc)
    assert linear.osc_f == pytest.approx(0.0, abs=1e-12)
    assert linear.osc_g == 0.0
    smooth = oscillation(lambda x: np.stack([np.sin(5 * x[..., 0]), 0 * x[..., 1]], axis=-1), {}, disc)
    assert smooth.osc_f > 1e-3
    assert smooth.local_f.sum() == pytest.approx(smooth.osc_f ** 2)


def test_traction_oscillation(neumann_square):
    disc = Discretization(neumann_square, FamilyConfig(family="RAFW", k=2))
    # RAFW projects tractions onto P_1 per edge
    quadratic = {"traction": lambda x, n: np.stack([x[..., 0] ** 2, 0 * x[..., 0]], axis=-1)}
    osc = oscillation(lambda x: np.zeros(x.shape), quadratic, disc)
    assert osc.osc_g > 1e-4
    assert np.count_nonzero(osc.local_g) > 0
    linear = {"traction": lambda x, n: np.stack([x[..., 0], x[..., 1]], axis=-1)}
    assert oscillation(lambda x: np.zeros(x.shape), linear, disc).osc_g < 1e-12


@pytest.mark.parametrize("family", ["AFW", "SGG"])
def test_hypercircle_bound_is_guaranteed(family):
    # k = 3 represents the quadratic load exactly, so osc(f) = 0 and the bound holds without constants
    sol, post, exact = _manufactured(family, 3, 2)
    report = estimate(sol, post, exact)
    print(f"{family}3: eta={report.eta_raw:.4e} mean error={report.exact.mean_error:.4e} "
          f"effectivity={report.effectivity:.3f}")
    assert report.osc_f < 1e-12
    assert report.effectivity >= 1.0
    assert report.eta_raw == pytest.approx(report.hypercircle.weighted + report.osc_f + report.osc_g)


def test_estimator_parts():
    sol, post, exact = _manufactured("SGG", 2, 2)
    eta = hypercircle_estimate(sol, post)
    assert eta.weighted == pytest.approx(0.5 * eta.terms["energy"] + GOLDEN * eta.terms["skew"])
    assert eta.raw >= eta.weighted
    assert eta.local.shape == (sol.mesh.n_triangles,)
    inc = incompressible_estimate(sol, post)
    mu = sol.material.mu
    assert inc.weighted == pytest.approx(np.sqrt(mu) * inc.terms["consistency"] + inc.terms["skew"] / np.sqrt(mu))
    # local indicators square-sum to the weighted terms plus oscillation
    osc = oscillation(sol.body_load, sol.tractions, sol.disc)
    squares = 0.25 * eta.terms["energy"] ** 2 + GOLDEN ** 2 * eta.terms["skew"] ** 2 + osc.osc_f ** 2
    assert np.sum(eta.local ** 2) == pytest.approx(squares)


def test_errors_decrease_under_refinement():
    coarse = exact_errors(*_manufactured("SGG", 2, 2))
    fine = exact_errors(*_manufactured("SGG", 2, 3))
    for name in ("e_C_sigma", "e_C_u", "e_mean", "e_inc_sigma", "e_inc_u"):
        assert getattr(fine, name) < getattr(coarse, name)
    assert coarse.e_C_sigma / fine.e_C_sigma > 2.0
    assert fine.norm_C == pytest.approx(coarse.norm_C, rel=1e-10)


def test_reference_norms_take_precedence():
    sol, post, exact = _manufactured("AFW", 2, 2)
    plain = exact_errors(sol, post, exact)
    exact.norms = (2.0 * plain.norm_C, plain.norm_0)
    scaled = exact_errors(sol, post, exact)
    assert scaled.e_C_sigma == pytest.approx(0.5 * plain.e_C_sigma)
    assert scaled.e_inc_sigma == pytest.approx(plain.e_inc_sigma)
    assert scaled.mean_error == pytest.approx(plain.mean_error)


def test_renormalize():
    sol, post, exact = _manufactured("AFW", 2, 2)
    report = estimate(sol, post, exact)
    weighted = report.hypercircle.weighted
    report.renormalize(2.0, 3.0)
    assert report.eta == pytest.approx(weighted / 2.0)
    assert report.eta_inc == pytest.approx(report.incompressible.weighted * np.sqrt(report.mu) / 3.0)


def test_write_indicators(tmp_path):
    problem_mesh = builtin_geometry("unit_square")
    material = Material(mu=1.0, lam=1.0)
    exact = ManufacturedExact(material)
    sol, post = solve_problem(Problem(problem_mesh, material, body_load=exact.body_load), problem_mesh,
                              FamilyConfig(family="AFW", k=2))
    report = estimate(sol, post)
    path = tmp_path / "indicators_0.csv"
    write_indicators(report, path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["element_id", "eta_local", "eta_inc_local"]
    assert len(frame) == 2
    np.testing.assert_allclose(frame["eta_local"].to_numpy(), report.eta_local, rtol=1e-11)


def _airy_stress(x):
    # Airy stress of x^2 y^2: symmetric and divergence free
    X, Y = x[..., 0], x[..., 1]
    return np.stack([np.stack([2 * X ** 2, -4 * X * Y], -1), np.stack([-4 * X * Y, 2 * Y ** 2], -1)], -2)


def _bubble_strain(x):
    # eps(w) for w = (x(1-x)y(1-y), 0), which vanishes on the boundary of the unit square
    X, Y = x[..., 0], x[..., 1]
    dx = (1 - 2 * X) * Y * (1 - Y)
    dy = X * (1 - X) * (1 - 2 * Y)
    return np.stack([np.stack([dx, 0.5 * dy], -1), np.stack([0.5 * dy, 0 * X], -1)], -2)


@pytest.mark.parametrize("material", [Material(mu=1.0, lam=1.0), Material(mu=0.7, lam=1.9, mode="plane_stress")])
def test_hypercircle_identity_for_admissible_pairs(material):
    exact = ManufacturedExact(material)
    disc = Discretization(builtin_geometry("unit_square", 2), FamilyConfig(family="AFW", k=2))
    equilibrated = lambda x: exact.stress(x) + _airy_stress(x)
    kinematic = lambda x: exact.stress(x) + material.elasticity_apply(_bubble_strain(x))
    err_sigma = compliance_norm(disc, material, lambda x: exact.stress(x) - equilibrated(x), order=12)
    err_u = compliance_norm(disc, material, lambda x: exact.stress(x) - kinematic(x), order=12)
    gap = compliance_norm(disc, material, lambda x: equilibrated(x) - kinematic(x), order=12)
    print(f"{err_sigma ** 2 + err_u ** 2:.14f} vs {gap ** 2:.14f}")
    assert err_sigma ** 2 + err_u ** 2 == pytest.approx(gap ** 2, rel=1e-10)
    mean = compliance_norm(disc, material, lambda x: exact.stress(x) - 0.5 * (equilibrated(x) + kinematic(x)),
                           order=12)
    assert mean == pytest.approx(0.5 * gap, rel=1e-10)
