import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mbdepth.errors import BehindCameraError, InvalidDepthError, InvalidPoseError
from mbdepth.geometry import (
    Intrinsics,
    Pose,
    compose,
    exact_pose,
    homogeneous,
    pixel_grid,
    pose_inverse,
    project,
    project_valid,
    rodrigues,
    small_angle_pose,
    transform_point,
    unproject,
)

K = Intrinsics(1000.0, 1000.0, 720.0, 540.0)
small = st.floats(-1e-2, 1e-2, allow_nan=False)
vec3 = st.tuples(small, small, small).map(np.array)


def random_pose(rng, rot=0.1, trans=0.05):
    return exact_pose(rng.uniform(-rot, rot, 3), rng.uniform(-trans, trans, 3))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, np.inf, 0.0)
    assert K.scaled(0.5, 0.25).as_tuple() == (500.0, 250.0, 360.0, 135.0)


def test_exact_pose_checks_orthonormality():
    with pytest.raises(InvalidPoseError):
        Pose(np.eye(3) * 1.01, np.zeros(3))
    Pose(np.eye(3) * 1.01, np.zeros(3), approximate=True)


def test_small_angle_zero_is_identity():
    assert small_angle_pose(np.zeros(3), np.zeros(3)).is_identity()


def test_small_angle_layout():
    p = small_angle_pose([0, 0, 0.001], [0, 0, 0])
    np.testing.assert_array_equal(p.rotation, [[1, -0.001, 0], [0.001, 1, 0], [0, 0, 1]])
    assert p.approximate


def test_small_angle_vs_rodrigues_example():
    r = np.array([0.001, 0, 0])
    err = np.max(np.abs(small_angle_pose(r, np.zeros(3)).rotation - rodrigues(r)))
    assert err < 5e-7


@given(vec3)
def test_small_angle_error_bound(r):
    bound = 5 * float(r @ r)
    err = np.max(np.abs(small_angle_pose(r, np.zeros(3)).rotation - rodrigues(r)))
    assert err <= bound + 1e-18


def test_rodrigues_is_rotation(rng):
    for _ in range(20):
        R = rodrigues(rng.normal(size=3))
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1) < 1e-12


def test_inverse_identity_and_translation():
    assert pose_inverse(Pose.identity()).is_identity()
    inv = pose_inverse(Pose(np.eye(3), [0.001, 0, 0]))
    np.testing.assert_array_equal(inv.rotation, np.eye(3))
    np.testing.assert_allclose(inv.translation, [-0.001, 0, 0])


def test_inverse_roundtrip(rng):
    for _ in range(50):
        p = random_pose(rng, rot=1.0, trans=1.0)
        assert np.max(np.abs(compose(p, pose_inverse(p)).matrix - np.eye(4))) < 1e-9


def test_inverse_of_approximate_pose(rng):
    p = small_angle_pose(rng.uniform(-0.01, 0.01, 3), rng.uniform(-0.01, 0.01, 3))
    q = pose_inverse(p)
    assert q.approximate
    np.testing.assert_allclose(compose(p, q).matrix, np.eye(4), atol=1e-12)


def test_inverse_of_singular_approximate_pose():
    with pytest.raises(InvalidPoseError):
        pose_inverse(Pose(np.zeros((3, 3)), np.zeros(3), approximate=True))


def test_transform_examples():
    X = np.array([0.1, -0.2, 0.3])
    np.testing.assert_array_equal(transform_point(Pose.identity(), X), X)
    np.testing.assert_allclose(transform_point(Pose(np.eye(3), [0.001, 0, 0]), [0, 0, 0.3]), [0.001, 0, 0.3])
    p = small_angle_pose([0, 0, 0.001], [0, 0, 0])
    np.testing.assert_allclose(transform_point(p, [0.1, 0, 0.3]), [0.1, 0.0001, 0.3], atol=1e-15)


def test_transform_matches_homogeneous_product(rng):
    for _ in range(20):
        p = random_pose(rng)
        X = rng.normal(size=(10, 3))
        via_matrix = (homogeneous(X) @ p.matrix.T)[:, :3]
        np.testing.assert_array_equal(homogeneous(transform_point(p, X))[:, 3], 1.0)
        np.testing.assert_allclose(transform_point(p, X), via_matrix, rtol=0, atol=1e-15)


def test_rigidity(rng):
    p = random_pose(rng, rot=2.0, trans=1.0)
    X = rng.normal(size=(50, 3))
    Y = transform_point(p, X)
    d0 = np.linalg.norm(X[:, None] - X[None], axis=2)
    d1 = np.linalg.norm(Y[:, None] - Y[None], axis=2)
    assert np.max(np.abs(d0 - d1)) < 1e-9


def test_project_examples():
    np.testing.assert_allclose(project([0, 0, 0.5], K), [720.0, 540.0])
    assert project([0.1, 0, 0.5], K)[0] == pytest.approx(920.0)


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project([0, 0, -0.1], K)
    uv, ok = project_valid(np.array([[0, 0, 1.0], [0, 0, 0.0]]), K)
    assert ok.tolist() == [True, False]
    assert np.all(np.isnan(uv[1]))


def test_unproject_examples():
    np.testing.assert_allclose(unproject([720.0, 540.0], 0.4, K), [0, 0, 0.4])
    np.testing.assert_allclose(unproject([1720.0, 540.0], 2.0, K), [2, 0, 2])
    with pytest.raises(InvalidDepthError):
        unproject([0, 0], 0.0, K)


def test_roundtrip_1e5(rng):
    n = 100_000
    uv = np.column_stack([rng.uniform(0, 1439, n), rng.uniform(0, 1079, n)])
    z = rng.uniform(0.1, 1.0, n)
    assert np.max(np.abs(project(unproject(uv, z, K), K) - uv)) < 1e-9


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0.05, 5.0))
def test_project_unproject_project(x, y, z):
    uv = project([x, y, z], K)
    np.testing.assert_allclose(project(unproject(uv, z, K), K), uv, rtol=0, atol=1e-9)


def test_pixel_grid_order():
    g = pixel_grid(2, 3)
    assert g.shape == (2, 3, 2)
    assert tuple(g[1, 2]) == (2.0, 1.0)
