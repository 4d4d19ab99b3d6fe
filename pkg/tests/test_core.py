import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsurf.core import (CameraIntrinsics, DomainError, Pose, Surfel, SurfelMap, pixel_rays, project,
                        project_points, ray_through_pixel, unproject)

from conftest import random_pose


def test_intrinsics_validation():
    with pytest.raises(DomainError):
        CameraIntrinsics(0.0, 1.0, 1, 1, 4, 4)
    with pytest.raises(DomainError):
        CameraIntrinsics(1.0, 1.0, 4, 1, 4, 4)
    with pytest.raises(DomainError):
        CameraIntrinsics(1.0, 1.0, 1, -0.5, 4, 4)


def test_pose_validation_rejects_non_orthonormal():
    with pytest.raises(DomainError):
        Pose(np.diag([1.0, 1.0, 1.01]), np.zeros(3)).validate()
    with pytest.raises(DomainError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).validate()
    Pose.identity().validate()


def test_principal_ray_is_forward(vga):
    ray = ray_through_pixel(vga, Pose.identity(), (320, 240))
    np.testing.assert_allclose(ray.direction, [0, 0, 1])
    np.testing.assert_allclose(ray.origin, 0)


def test_offset_pixel_direction(vga):
    ray = ray_through_pixel(vga, Pose.identity(), (420, 240))
    expect = np.array([0.2, 0, 1]) / np.linalg.norm([0.2, 0, 1])
    np.testing.assert_allclose(ray.direction, expect, atol=1e-12)


def test_translation_moves_origin_only(vga):
    t = np.array([1.0, -2.0, 0.5])
    a = ray_through_pixel(vga, Pose.identity(), (17, 300))
    b = ray_through_pixel(vga, Pose(np.eye(3), t), (17, 300))
    np.testing.assert_allclose(b.origin, t)
    np.testing.assert_allclose(b.direction, a.direction)


def test_out_of_bounds_pixel(vga):
    with pytest.raises(DomainError):
        ray_through_pixel(vga, Pose.identity(), (640, 0))
    with pytest.raises(DomainError):
        ray_through_pixel(vga, Pose.identity(), (-1, 0))


def test_unproject_examples(vga):
    np.testing.assert_allclose(unproject(vga, Pose.identity(), (320, 240), 2.0), [0, 0, 2])
    np.testing.assert_allclose(unproject(vga, Pose.identity(), (420, 240), 2.0), [0.4, 0, 2])
    with pytest.raises(DomainError):
        unproject(vga, Pose.identity(), (1, 1), 0.0)


def test_project_examples(vga):
    (u, v), z = project(vga, Pose.identity(), (0, 0, 2))
    assert (u, v, z) == (320, 240, 2)
    (u, v), z = project(vga, Pose.identity(), (0.4, 0, 2))
    assert np.allclose((u, v, z), (420, 240, 2))
    assert project(vga, Pose.identity(), (0, 0, -1)) is None


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_project_unproject_roundtrip(seed):
    rng = np.random.default_rng(seed)
    w, h = int(rng.integers(2, 800)), int(rng.integers(2, 600))
    intr = CameraIntrinsics(rng.uniform(50, 900), rng.uniform(50, 900), rng.uniform(0, w - 1e-3),
                            rng.uniform(0, h - 1e-3), w, h)
    pose = random_pose(rng, 3.0)
    px = (rng.uniform(0, w - 1), rng.uniform(0, h - 1))
    d = rng.uniform(0.05, 20)
    (u, v), z = project(intr, pose, unproject(intr, pose, px, d))
    np.testing.assert_allclose([u, v, z], [px[0], px[1], d], rtol=1e-5, atol=1e-7)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_pose_composition_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    left = a.compose(b).compose(c).matrix()
    right = a.compose(b.compose(c)).matrix()
    np.testing.assert_allclose(left, right, atol=1e-6)
    np.testing.assert_allclose(a.compose(a.inverse()).matrix(), np.eye(4), atol=1e-9)


def test_pixel_rays_match_scalar(rng):
    intr = CameraIntrinsics(30.0, 35.0, 7.5, 5.0, 16, 12)
    pose = random_pose(rng)
    origin, dirs = pixel_rays(intr, pose)
    for v, u in [(0, 0), (11, 15), (5, 9)]:
        ray = ray_through_pixel(intr, pose, (u, v))
        np.testing.assert_allclose(dirs[v, u], ray.direction, atol=1e-12)
        np.testing.assert_allclose(origin, ray.origin)


def test_project_points_behind(vga):
    uv, z = project_points(vga, Pose.identity(), np.array([[0, 0, 2.0], [0, 0, -1.0]]))
    np.testing.assert_allclose(uv[0], [320, 240])
    assert np.isnan(uv[1]).all() and z[1] == -1


def test_look_at_points_forward():
    pose = Pose.look_at((0, 0, 0), (1, 0, 0))
    pose.validate()
    np.testing.assert_allclose(pose.rotation[:, 2], [1, 0, 0], atol=1e-12)


def _surfel(i=None, f=4):
    return Surfel(i, np.zeros(3), np.array([0, 0, 1.0]), 0.1, 1.0, np.arange(f, dtype=float))


def test_map_ids_are_stable_and_unique():
    m = SurfelMap(feature_dim=4)
    a = m.add(_surfel())
    b = m.add(_surfel())
    assert (a, b) == (0, 1) and m.next_id == 2
    m.validate()
    with pytest.raises(DomainError):
        m.add(_surfel(1))
    assert m.row_of(1) == 1
    assert m.surfel(0).id == 0
    assert [s.id for s in m] == [0, 1]


def test_map_feature_dim_enforced():
    m = SurfelMap(feature_dim=4)
    with pytest.raises(DomainError):
        m.add(_surfel(f=5))


def test_map_validate_catches_bad_normals():
    m = SurfelMap(feature_dim=2, dtype=np.float64)
    m.append([0, 0, 0], [0, 0, 2.0], 0.1, 1.0, [0, 0])
    with pytest.raises(DomainError):
        m.validate()


def test_map_copy_equals_and_digest():
    m = SurfelMap(feature_dim=4)
    for _ in range(3):
        m.add(_surfel())
    c = m.copy()
    assert c.equals(m) and c.geometry_digest() == m.geometry_digest()
    c.features[0, 0] += 1
    assert not c.equals(m) and c.geometry_digest() == m.geometry_digest()
    c.radii[0] += 1
    assert c.geometry_digest() != m.geometry_digest()
