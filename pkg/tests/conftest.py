import numpy as np
import pytest

from shapeforge.fem import FemContext
from shapeforge.mesh import DomainSpec, load_base_fixture, structured_mesh


@pytest.fixture(scope="session")
def base_mesh():
    return load_base_fixture()


@pytest.fixture(scope="session")
def base_ctx(base_mesh):
    return FemContext(base_mesh)


def make_small_mesh():
    """A 48-triangle version of the tunnel geometry, small enough for dense
    linear algebra and finite-difference sweeps."""
    xl = np.concatenate([np.linspace(-7.0, -0.5, 3),
                         np.linspace(-0.5, 0.5, 2)[1:],
                         np.linspace(0.5, 7.0, 3)[1:]])
    yl = np.concatenate([np.linspace(-3.0, -0.5, 3),
                         np.linspace(-0.5, 0.5, 2)[1:],
                         np.linspace(0.5, 3.0, 3)[1:]])
    return structured_mesh(DomainSpec(), xl, yl)


@pytest.fixture(scope="session")
def small_mesh():
    return make_small_mesh()


@pytest.fixture(scope="session")
def small_ctx(small_mesh):
    return FemContext(small_mesh)
