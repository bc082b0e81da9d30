from math import factorial

import numpy as np
import pytest
from scipy.integrate import quad

from config import FamilyConfig
from errors import ValidationError
from fe_core import (build_dof_layout, curl_bubble_space, edge_l2_project, edge_rule, graded_quadrature,
                     lagrange_nodes, local_stress_dimension, pk_basis_eval, quadrature_rules, shifted_legendre,
                     stress_basis_eval, triangle_rule)
from mesh import builtin_geometry

CELL = np.array([[0.1, -0.2], [1.3, 0.1], [0.4, 0.9]])


def _cell_rule(cell, order):
    rule = triangle_rule(order)
    jac = np.stack([cell[1] - cell[0], cell[2] - cell[0]], axis=1)
    return cell[0] + rule.points @ jac.T, rule.weights * abs(np.linalg.det(jac))


def _edge_moments(basis, degree):
    """M[(e, i, j), n] = int_0^1 (tau_n n_e)_i L_j ds for the single cell in the basis."""
    rule = edge_rule(2 * degree + 4)
    traces = basis.normal_traces(rule.points)[0]            # (3, ns, n, 2)
    leg = shifted_legendre(degree, rule.points)
    moments = np.einsum("s,esni,sj->eijn", rule.weights, traces, leg)
    return moments


@pytest.mark.parametrize("order", [1, 4, 7, 12])
def test_triangle_rule_exactness(order):
    rule = triangle_rule(order)
    assert rule.weights.sum() == pytest.approx(0.5)
    for a in range(order + 1):
        for b in range(order + 1 - a):
            exact = factorial(a) * factorial(b) / factorial(a + b + 2)
            approx = np.sum(rule.weights * rule.points[:, 0] ** a * rule.points[:, 1] ** b)
            assert approx == pytest.approx(exact, rel=1e-12, abs=1e-15)


def test_edge_rule_exactness():
    rule = edge_rule(9)
    for p in range(10):
        assert np.sum(rule.weights * rule.points ** p) == pytest.approx(1.0 / (p + 1))


def test_quadrature_rules_range():
    assert quadrature_rules(20).triangle.order == 20
    with pytest.raises(ValidationError):
        quadrature_rules(0)
    with pytest.raises(ValidationError):
        quadrature_rules(21)


def test_graded_quadrature():
    pts, w = graded_quadrature(CELL, 1, 6, levels=5)
    area = 0.5 * abs(np.linalg.det(np.stack([CELL[1] - CELL[0], CELL[2] - CELL[0]], axis=1)))
    assert w.sum() == pytest.approx(area)
    ref_pts, ref_w = _cell_rule(CELL, 6)
    f = lambda x: x[:, 0] ** 3 * x[:, 1] + x[:, 1] ** 2
    assert np.sum(w * f(pts)) == pytest.approx(np.sum(ref_w * f(ref_pts)), rel=1e-12)
    # no point lands on the singular corner
    assert np.min(np.linalg.norm(pts - CELL[1], axis=1)) > 0


def test_graded_quadrature_singular_integrand():
    # int over the unit right triangle of r^(-1/2) around the origin
    cell = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    pts, w = graded_quadrature(cell, 0, 12, levels=12)
    r = np.linalg.norm(pts, axis=1)
    # int_0^{pi/2} int_0^{R(t)} r^(1/2) dr dt with R(t) = 1 / (cos t + sin t)
    exact, _ = quad(lambda t: (2.0 / 3.0) * (np.cos(t) + np.sin(t)) ** -1.5, 0.0, np.pi / 2, epsabs=1e-13)
    assert np.sum(w / np.sqrt(r)) == pytest.approx(exact, rel=1e-5)


def test_lagrange_basis_is_nodal():
    for p in (1, 2, 3):
        nodes = lagrange_nodes(p)
        values, grads = pk_basis_eval(p, nodes)
        np.testing.assert_allclose(values, np.eye(len(nodes)), atol=1e-12)
        np.testing.assert_allclose(grads.sum(axis=1), 0.0, atol=1e-11)


@pytest.mark.parametrize("family,k", [("AFW", 2), ("AFW", 3), ("RAFW", 2), ("RAFW", 3), ("SGG", 2), ("SGG", 3)])
def test_edge_dofs_are_dual_to_basis(family, k):
    cfg = FamilyConfig(family=family, k=k)
    basis = stress_basis_eval(cfg, CELL)
    assert basis.size == local_stress_dimension(cfg)
    nl = cfg.neumann_degree + 1
    assert basis.n_edge == 3 * 2 * nl
    moments = _edge_moments(basis, cfg.neumann_degree).reshape(3 * 2 * nl, basis.size)
    np.testing.assert_allclose(moments[:, :basis.n_edge], np.eye(basis.n_edge), atol=1e-9)
    np.testing.assert_allclose(moments[:, basis.n_edge:], 0.0, atol=1e-9)


@pytest.mark.parametrize("family,k", [("AFW", 2), ("RAFW", 2), ("SGG", 2), ("SGG", 3)])
def test_divergence_satisfies_green_identity(family, k):
    # int div tau . x + int tr tau = int_dK (tau n) . x
    basis = stress_basis_eval(FamilyConfig(family=family, k=k), CELL)
    pts, w = _cell_rule(CELL, 2 * k + 4)
    values = basis.values(pts[None])[0]
    divs = basis.divergences(pts[None])[0]
    lhs = np.einsum("q,qni,qi->n", w, divs, pts) + np.einsum("q,qnii->n", w, values)

    rule = edge_rule(2 * k + 4)
    starts, ends = basis.edge_starts[0], basis.edge_ends[0]
    edge_pts = starts[:, None, :] + rule.points[None, :, None] * (ends - starts)[:, None, :]
    lengths = np.linalg.norm(ends - starts, axis=1)
    traces = basis.normal_traces(rule.points)[0]
    rhs = np.einsum("e,s,esni,esi->n", lengths, rule.weights, traces, edge_pts)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_rafw_drops_top_trace_mode():
    k = 3
    basis = stress_basis_eval(FamilyConfig(family="RAFW", k=k), CELL)
    moments = _edge_moments(basis, k)
    np.testing.assert_allclose(moments[:, :, k, :], 0.0, atol=1e-9)
    # the full AFW space keeps that mode
    afw = stress_basis_eval(FamilyConfig(family="AFW", k=k), CELL)
    assert np.abs(_edge_moments(afw, k)[:, :, k, :]).max() > 1e-3


@pytest.mark.parametrize("k", [2, 3])
def test_curl_bubbles_are_divergence_free_with_zero_traces(k):
    bubbles = curl_bubble_space(k, CELL)
    assert bubbles.size == (k + 1) * (k + 2) // 2 - 1
    pts, _ = _cell_rule(CELL, 6)
    np.testing.assert_allclose(bubbles.divergences(pts[None]), 0.0, atol=1e-10)
    np.testing.assert_allclose(bubbles.normal_traces(np.linspace(0.0, 1.0, 7)), 0.0, atol=1e-12)


def test_sgg_bubbles_are_not_symmetric():
    basis = stress_basis_eval(FamilyConfig(family="SGG", k=2), CELL)
    assert basis.n_bubble == 3
    pts, w = _cell_rule(CELL, 8)
    values = basis.values(pts[None])[0, :, -basis.n_bubble:]
    skew = values[..., 0, 1] - values[..., 1, 0]
    gram = np.einsum("q,qn,qm->nm", w, skew, skew)
    assert np.linalg.matrix_rank(gram, tol=1e-10 * np.abs(gram).max()) == 3


def test_batched_basis_matches_single_cells():
    cfg = FamilyConfig(family="SGG", k=2)
    other = CELL * 0.5 + np.array([2.0, 1.0])
    batch = stress_basis_eval(cfg, np.stack([CELL, other]))
    single = stress_basis_eval(cfg, other)
    x = other.mean(axis=0)[None, None, :]
    np.testing.assert_allclose(batch.values(np.stack([CELL.mean(axis=0)[None], x[0]]))[1], single.values(x)[0],
                               atol=1e-10)


def test_bad_cell_orientation():
    with pytest.raises(ValidationError):
        stress_basis_eval(FamilyConfig(family="AFW", k=2), CELL[[0, 2, 1]])


def test_dof_layout_counts():
    mesh = builtin_geometry("unit_square")
    layout = build_dof_layout(mesh, FamilyConfig(family="AFW", k=2))
    assert (layout.n_S, layout.n_R, layout.n_V) == (42, 6, 12)
    assert layout.n_total == 60
    assert layout.stress_dofs.shape == (2, 24)
    # the diagonal is shared: both triangles reference its six DOFs
    shared = np.intersect1d(layout.stress_dofs[0], layout.stress_dofs[1])
    assert len(shared) == 6

    sgg = build_dof_layout(mesh, FamilyConfig(family="SGG", k=2))
    assert sgg.n_S == 42 + 2 * 3
    rafw = build_dof_layout(mesh, FamilyConfig(family="RAFW", k=2))
    assert rafw.n_S == 5 * 4 + 2 * (24 - 6 - 12)


def test_edge_projection_reproduces_polynomials():
    g = lambda s: np.stack([1.0 + 2.0 * s - s ** 2, s ** 2], axis=-1)
    proj = edge_l2_project(g, 2)
    s = np.linspace(0.0, 1.0, 5)
    np.testing.assert_allclose(proj(s), g(s), atol=1e-12)
    # a lower degree projection is orthogonal to constants
    low = edge_l2_project(lambda s: np.stack([s ** 3, 0 * s], axis=-1), 1)
    rule = edge_rule(8)
    residual = rule.points ** 3 - low(rule.points)[:, 0]
    assert np.sum(rule.weights * residual) == pytest.approx(0.0, abs=1e-13)


def test_edge_projection_of_quadratic_onto_lines():
    proj = edge_l2_project(lambda s: np.stack([s ** 2, 0 * s], axis=-1), 1)
    np.testing.assert_allclose(proj.coefficients, [[1.0 / 3.0, 0.0], [0.5, 0.0]], atol=1e-14)
    s = np.linspace(0.0, 1.0, 9)
    np.testing.assert_allclose(proj(s), np.stack([s - 1.0 / 6.0, 0 * s], axis=-1), atol=1e-14)
    np.testing.assert_allclose(proj.moments, [[1.0 / 3.0, 0.0], [1.0 / 6.0, 0.0]], atol=1e-14)


def test_batched_edge_projection_matches_single_edges():
    slopes = np.array([0.5, -2.0, 3.0])

    def batch(s):
        return np.stack([np.outer(slopes, np.sin(3 * s)), np.outer(slopes ** 2, s ** 4)], axis=-1)

    proj = edge_l2_project(batch, 2)
    assert proj.coefficients.shape == (3, 3, 2)
    s = np.linspace(0.0, 1.0, 6)
    for e, a in enumerate(slopes):
        single = edge_l2_project(lambda t: np.stack([a * np.sin(3 * t), a ** 2 * t ** 4], axis=-1), 2)
        np.testing.assert_allclose(proj.coefficients[e], single.coefficients, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(proj(s)[e], single(s), rtol=1e-13, atol=1e-15)


def _random_cells(n, seed):
    """Positively oriented cells with bounded aspect ratio over four orders of magnitude in size."""
    rng = np.random.default_rng(seed)
    ref = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    cells = []
    while len(cells) < n:
        jac = rng.normal(size=(2, 2))
        if np.linalg.det(jac) <= 0 or np.linalg.cond(jac) > 20:
            continue
        scale = 10.0 ** rng.uniform(-2, 2)
        cells.append(rng.uniform(-5, 5, size=2) + scale * ref @ jac.T)
    return np.array(cells)


@pytest.mark.parametrize("k", [2, 3])
def test_curl_bubbles_on_random_cells(k):
    cells = _random_cells(100, seed=k)
    bubbles = curl_bubble_space(k, cells)
    rule = triangle_rule(2 * k + 2)
    jac = np.stack([cells[:, 1] - cells[:, 0], cells[:, 2] - cells[:, 0]], axis=-1)
    pts = cells[:, None, 0, :] + np.einsum("bij,qj->bqi", jac, rule.points)
    values = bubbles.values(pts)
    scale = np.abs(values).max(axis=(1, 2, 3, 4))
    assert np.all(scale > 0)
    divs = np.abs(bubbles.divergences(pts)).max(axis=(1, 2, 3))
    traces = np.abs(bubbles.normal_traces(np.linspace(0.0, 1.0, 7))).max(axis=(1, 2, 3, 4))
    print(f"k={k}: max relative divergence {np.max(divs * bubbles.h / scale):.1e}, "
          f"max relative trace {np.max(traces / scale):.1e}")
    assert np.all(divs * bubbles.h <= 1e-11 * scale)
    assert np.all(traces <= 1e-11 * scale)


@pytest.mark.parametrize("family,k", [("AFW", 2), ("RAFW", 3), ("SGG", 3)])
def test_stress_basis_is_scale_equivariant(family, k):
    cfg = FamilyConfig(family=family, k=k)
    small = stress_basis_eval(cfg, CELL)
    large = stress_basis_eval(cfg, 2.0 * CELL)
    np.testing.assert_array_equal(large.coefficients, small.coefficients)
    np.testing.assert_array_equal(2.0 * large.divergence, small.divergence)
    pts, _ = _cell_rule(CELL, 4)
    np.testing.assert_array_equal(large.values(2.0 * pts[None]), small.values(pts[None]))
