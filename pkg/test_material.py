import numpy as np
import pydantic
import pytest

from errors import ValidationError
from material import (Material, asymmetry, compliance_apply, deviatoric, elasticity_apply, from_young_poisson,
                      symmetric_part, tensor_trace)


def test_young_poisson_conversion():
    m = from_young_poisson(1.0, 0.3)
    assert m.mu == pytest.approx(5.0 / 13.0)
    assert m.lam == pytest.approx(0.3 / (1.3 * 0.4))
    assert m.nu == pytest.approx(0.3)
    assert m.young == pytest.approx(1.0)
    assert m.kappa == pytest.approx(1.8)


@pytest.mark.parametrize("E,nu", [(0.0, 0.3), (1.0, 0.5), (1.0, -0.1)])
def test_young_poisson_rejects_bad_input(E, nu):
    with pytest.raises(ValidationError):
        from_young_poisson(E, nu)


def test_compliance_inverts_elasticity():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 4, 2, 2))
    eps = 0.5 * (a + np.swapaxes(a, -1, -2))
    for m in (Material(mu=0.7, lam=3.0), Material(mu=0.7, lam=3.0, mode="plane_stress")):
        np.testing.assert_allclose(m.compliance_apply(m.elasticity_apply(eps)), eps, atol=1e-12)


def test_compliance_on_skew_and_trace():
    m = Material(mu=2.0, lam=5.0)
    skew = np.array([[0.0, 1.0], [-1.0, 0.0]])
    np.testing.assert_allclose(compliance_apply(m, skew), skew / 4.0)
    # C I = I / (2 mu + 2 lam) in two dimensions
    np.testing.assert_allclose(m.compliance_apply(np.eye(2)), np.eye(2) / 14.0)


def test_compliance_stays_bounded_near_incompressibility():
    m = from_young_poisson(1.0, 0.4999)
    tau = np.array([[1.0, 0.3], [0.3, -2.0]])
    dev = tau - 0.5 * np.trace(tau) * np.eye(2)
    limit = dev / (2 * m.mu)
    np.testing.assert_allclose(m.compliance_apply(tau), limit, atol=1e-3)


def test_plane_stress_lambda():
    m = Material(mu=1.0, lam=2.0, mode="plane_stress")
    assert m.lambda_eff == pytest.approx(2 * 1.0 * 2.0 / (2.0 + 2.0))
    np.testing.assert_allclose(elasticity_apply(m, np.eye(2)), (2.0 + 2 * 1.0) * np.eye(2))


def test_elasticity_requires_symmetric_strain():
    m = Material(mu=1.0, lam=1.0)
    with pytest.raises(ValidationError):
        m.elasticity_apply(np.array([[0.0, 1.0], [0.0, 0.0]]))
    m.elasticity_apply(np.array([[0.0, 1.0], [0.0, 0.0]]), check_symmetry=False)


def test_material_validation():
    with pytest.raises(pydantic.ValidationError):
        Material(mu=0.0, lam=1.0)
    with pytest.raises(pydantic.ValidationError):
        Material(mu=1.0, lam=-1.0)
    with pytest.raises(pydantic.ValidationError):
        Material(mu=1.0, lam=1e12)


def test_compliance_inner_is_energy():
    m = Material(mu=1.0, lam=1.0)
    sigma = np.array([[2.0, 0.0], [0.0, -2.0]])
    # C sigma = diag(1, -1)
    assert m.compliance_inner(sigma, sigma) == pytest.approx(4.0)


@pytest.mark.parametrize("nu", [0.3, 0.4999])
@pytest.mark.parametrize("mode", ["plane_strain", "plane_stress"])
def test_deviatoric_split_matches_compliance(nu, mode):
    m = from_young_poisson(1.0, nu, mode)
    tau = np.random.default_rng(11).normal(size=(200, 2, 2))
    dev_part, vol_part = m.compliance_split(tau)
    np.testing.assert_allclose(dev_part + vol_part, m.compliance_inner(tau, tau), rtol=1e-12)
    np.testing.assert_allclose(deviatoric(tau).trace(axis1=-2, axis2=-1), 0.0, atol=1e-14)
    # the volumetric weight stays bounded as lambda grows; the deviatoric one does not depend on it
    assert np.all(vol_part <= tensor_trace(tau) ** 2 / (4 * m.mu) * (1 + 1e-12))
    np.testing.assert_allclose(dev_part, np.einsum("...ij,...ij->...", deviatoric(tau), deviatoric(tau)) / (2 * m.mu))


@pytest.mark.parametrize("nu", [0.0, 0.3, 0.4999])
def test_compliance_is_symmetric_positive_definite(nu):
    m = from_young_poisson(2.5, nu)
    rng = np.random.default_rng(5)
    sigma, tau = rng.normal(size=(2, 200, 2, 2))
    np.testing.assert_allclose(m.compliance_inner(tau, sigma), m.compliance_inner(sigma, tau), rtol=1e-12)
    assert np.all(m.compliance_inner(tau, tau) > 0)
    # the smallest eigenvalue is the volumetric one, 1 / (2 (mu + lam))
    floor = 1.0 / (2 * (m.mu + m.lambda_eff))
    assert np.all(m.compliance_inner(tau, tau) >= floor * np.einsum("...ij,...ij->...", tau, tau) * (1 - 1e-12))


def test_tensor_helpers():
    t = np.array([[1.0, 2.0], [5.0, -3.0]])
    assert tensor_trace(t) == pytest.approx(-2.0)
    np.testing.assert_allclose(deviatoric(t), [[2.0, 2.0], [5.0, -2.0]])
    np.testing.assert_allclose(symmetric_part(t), [[1.0, 3.5], [3.5, -3.0]])
    np.testing.assert_allclose(asymmetry(t), [[0.0, -3.0], [3.0, 0.0]])
