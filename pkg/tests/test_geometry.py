import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from incremental_nerf.errors import DegenerateInputError
from incremental_nerf.geometry import (CameraPose, Intrinsics, PoseDelta, camera_ray,
                                       camera_rays, is_rotation, left_jacobian, log_rotation,
                                       rodrigues, rotation_geodesic, skew, so3_project)

vec3 = arrays(np.float64, 3, elements=st.floats(-10, 10, allow_nan=False))


def unit_k():
    return Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


def test_rodrigues_zero_is_identity():
    assert np.array_equal(rodrigues(np.zeros(3)), np.eye(3))


def test_rodrigues_quarter_turn_about_z():
    r = rodrigues([0.0, 0.0, np.pi / 2])
    np.testing.assert_allclose(r @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


def test_rodrigues_inverse_pair():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        np.testing.assert_allclose(rodrigues(a) @ rodrigues(-a), np.eye(3), atol=1e-12)


def test_rodrigues_rejects_non_finite():
    with pytest.raises(ValueError):
        rodrigues([np.nan, 0.0, 0.0])
    with pytest.raises(ValueError):
        rodrigues([1.0, 2.0])


def test_rodrigues_small_angle_branch_matches_series():
    a = np.array([3e-9, -2e-9, 1e-9])
    np.testing.assert_allclose(rodrigues(a), np.eye(3) + skew(a), atol=1e-16)


@given(vec3)
def test_rodrigues_is_rotation(a):
    assert is_rotation(rodrigues(a), tol=1e-9)


@given(vec3.filter(lambda a: np.linalg.norm(a) > 1e-3))
def test_rodrigues_period(a):
    axis = a / np.linalg.norm(a)
    np.testing.assert_allclose(rodrigues(a + 2 * np.pi * axis), rodrigues(a), atol=1e-9)


@given(arrays(np.float64, 3, elements=st.floats(-1.8, 1.8)))
def test_log_inverts_rodrigues(a):
    np.testing.assert_allclose(log_rotation(rodrigues(a)), a, atol=1e-9)


def test_left_jacobian_against_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.normal(size=3)
        w = rng.normal(size=3)
        analytic = -skew(rodrigues(a) @ w) @ left_jacobian(a)
        fd = np.zeros((3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1e-6
            fd[:, j] = (rodrigues(a + e) @ w - rodrigues(a - e) @ w) / 2e-6
        np.testing.assert_allclose(analytic, fd, atol=1e-8)


def test_so3_project_examples():
    r = rodrigues([0.3, -0.2, 0.9])
    np.testing.assert_allclose(so3_project(r), r, atol=1e-12)
    np.testing.assert_allclose(so3_project(2 * np.eye(3)), np.eye(3), atol=1e-15)
    with pytest.raises(DegenerateInputError):
        so3_project(np.diag([1.0, 1.0, 0.0]))


def test_so3_project_of_two_rotation_mean_is_close():
    rng = np.random.default_rng(1)
    for eps in (1e-3, 1e-2, 0.1):
        r = rodrigues(rng.normal(size=3))
        m = 0.5 * (r + r @ rodrigues([0.0, 0.0, eps]))
        p = so3_project(m)
        # the midpoint on the geodesic is at eps / 2
        np.testing.assert_allclose(p, r @ rodrigues([0.0, 0.0, eps / 2]), atol=1e-12)
        assert rotation_geodesic(p, r) <= eps


@given(arrays(np.float64, (3, 3), elements=st.floats(-5, 5)))
def test_so3_project_idempotent(m):
    try:
        p = so3_project(m)
    except DegenerateInputError:
        return
    assert is_rotation(p, tol=1e-9)
    np.testing.assert_allclose(so3_project(p), p, atol=1e-12)


def test_camera_ray_examples():
    k = unit_k()
    ray = camera_ray(CameraPose(), k, 49.5, 49.5)
    np.testing.assert_allclose(ray.dir, [0.0, 0.0, -1.0], atol=1e-15)
    flipped = CameraPose(rodrigues([0.0, np.pi, 0.0]), np.zeros(3))
    np.testing.assert_allclose(camera_ray(flipped, k, 49.5, 49.5).dir, [0, 0, 1], atol=1e-15)
    expected = np.array([0.5, -0.5, -1.0]) / np.linalg.norm([0.5, -0.5, -1.0])
    np.testing.assert_allclose(camera_ray(CameraPose(), k, 99.5, 99.5).dir, expected, atol=1e-15)


def test_camera_ray_origin_is_centre():
    pose = CameraPose(rodrigues([0.1, 0.2, 0.3]), [1.0, -2.0, 0.5])
    assert np.array_equal(camera_ray(pose, unit_k(), 3, 7).origin, pose.trans)


def test_camera_ray_out_of_range():
    with pytest.raises(ValueError):
        camera_ray(CameraPose(), unit_k(), 100, 0)
    with pytest.raises(ValueError):
        camera_ray(CameraPose(), unit_k(), 0, -1)


@given(vec3, st.integers(0, 49), st.integers(0, 49))
def test_camera_rays_unit_and_mirrored(a, u, v):
    k = unit_k()
    pose = CameraPose(rodrigues(a), np.zeros(3))
    _, d = camera_rays(CameraPose(), k, np.array([u, 99 - u]), np.array([v, 99 - v]))
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(d[0, :2], -d[1, :2], atol=1e-15)
    assert d[0, 2] == d[1, 2]
    _, dr = camera_rays(pose, k, np.array([u]), np.array([v]))
    assert abs(np.linalg.norm(dr) - 1.0) < 1e-12


def test_rotation_geodesic_examples():
    r = rodrigues([0.4, 0.1, -0.3])
    assert rotation_geodesic(r, r) == pytest.approx(0.0, abs=1e-7)
    assert rotation_geodesic(np.eye(3), rodrigues([0, 0, np.pi / 2])) == pytest.approx(np.pi / 2)
    a = np.array([1.0, 2.0, -1.0])
    a *= 0.3 / np.linalg.norm(a)
    assert abs(rotation_geodesic(np.eye(3), rodrigues(a)) - 0.3) < 1e-10


def test_pose_and_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraPose(2 * np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        Intrinsics(-1.0, 1.0, 0.0, 0.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 4.0, 0.0, 4, 4)
    with pytest.raises(ValueError):
        PoseDelta([4.0, 0.0, 0.0])
    k = Intrinsics.from_fov(48, 48, 40.0)
    assert Intrinsics.from_dict(k.to_dict()) == k


def test_compose_delta_and_look_at():
    base = CameraPose.look_at([3.0, 0.0, 1.0], np.zeros(3))
    # the optical axis points at the target
    np.testing.assert_allclose(-base.rot[:, 2], -base.trans / np.linalg.norm(base.trans))
    delta = PoseDelta([0.0, 0.0, 0.1], [0.5, 0.0, 0.0])
    moved = base.compose_delta(delta)
    np.testing.assert_allclose(moved.rot, rodrigues([0, 0, 0.1]) @ base.rot)
    np.testing.assert_allclose(moved.trans, base.trans + [0.5, 0, 0])
    assert np.array_equal(PoseDelta.from_vector(delta.as_vector()).a, delta.a)
