import numpy as np
import pytest

from svpc.dynamics import RigExtrinsics, WorldConstants


def random_quat(rng, size=None):
    """Uniform random unit quaternion(s) via the subgroup algorithm."""
    shape = () if size is None else (size,)
    u1, u2, u3 = rng.random((3,) + shape)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    q = np.stack(
        [
            a * np.sin(2 * np.pi * u2),
            a * np.cos(2 * np.pi * u2),
            b * np.sin(2 * np.pi * u3),
            b * np.cos(2 * np.pi * u3),
        ],
        axis=-1,
    )
    return np.where(q[..., :1] < 0, -q, q)


def random_unit_vec(rng, size=None):
    shape = (3,) if size is None else (size, 3)
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# camera z forward (body x), camera x -> -body y, camera y -> -body z
Q_BC_FORWARD = np.array([0.5, -0.5, 0.5, -0.5])


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def world():
    return WorldConstants()


@pytest.fixture
def rig():
    return RigExtrinsics(p_cb_b=np.array([0.1, 0.0, 0.0]), q_bc=Q_BC_FORWARD)


@pytest.fixture
def identity_rig():
    return RigExtrinsics(p_cb_b=np.zeros(3), q_bc=np.array([1.0, 0, 0, 0]))
