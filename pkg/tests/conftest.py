import pytest

from meshinspect.mesh import Mesh
from meshinspect.synthgen import icosphere


TETRA_OFF = """OFF
4 4 6
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""


@pytest.fixture(scope="session")
def ico3():
    return icosphere(3)


@pytest.fixture(scope="session")
def ico1():
    return icosphere(1)


@pytest.fixture
def tetra_path(tmp_path):
    p = tmp_path / "tetra.off"
    p.write_text(TETRA_OFF)
    return p


@pytest.fixture
def square():
    return Mesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])


def rigid(rng, scale=50.0):
    from meshinspect.registration import RigidTransform, random_rotation

    return RigidTransform(random_rotation(rng), rng.uniform(-scale, scale, 3))
