import numpy as np
import pytest

from assembly import assemble, solve_saddle
from config import FamilyConfig
from material import Material
from mesh import builtin_geometry, retag_boundary, uniform_refine

# u = (x, -y) with mu = lam = 1 gives sigma = diag(2, -2)
PATCH_STRESS = np.array([[2.0, 0.0], [0.0, -2.0]])


def patch_traction(x, normals):
    return np.einsum("ij,...j->...i", PATCH_STRESS, normals)


@pytest.fixture
def unit_material():
    return Material(mu=1.0, lam=1.0)


@pytest.fixture
def neumann_square():
    """Unit square, refined once, with every boundary edge under traction."""
    mesh = uniform_refine(builtin_geometry("unit_square"))
    return retag_boundary(mesh, lambda p, q: "traction")


@pytest.fixture(params=[("AFW", 2), ("RAFW", 2), ("SGG", 2), ("SGG", 3)], ids=lambda p: f"{p[0]}{p[1]}")
def family(request):
    name, k = request.param
    return FamilyConfig(family=name, k=k)


@pytest.fixture
def patch_solution(neumann_square, unit_material, family):
    system = assemble(neumann_square, unit_material, family, g={"traction": patch_traction})
    return solve_saddle(system)
