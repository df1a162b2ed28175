import numpy as np
import pytest
from hypothesis import given, strategies as st

from bindesc.data import geometry as G
from oracles import rotation_from_axis_angle
from scenes import nadir, plane_depth, plane_scene


def test_quaternion_round_trip(rng):
    for _ in range(10):
        R = rotation_from_axis_angle(rng.standard_normal(3), rng.uniform(0, 180))
        p = G.Pose.from_matrix(R, np.zeros(3))
        np.testing.assert_allclose(p.R, R, atol=1e-12)


def test_non_unit_quaternion_rejected():
    with pytest.raises(ValueError):
        G.Pose([1.0, 0.1, 0, 0], np.zeros(3))


@pytest.mark.parametrize("deg,kept", [(59.0, True), (60.0, True), (61.0, False)])
def test_perspective_filter(deg, kept):
    a = G.Pose([1.0, 0, 0, 0], np.zeros(3))
    b = G.Pose.from_matrix(rotation_from_axis_angle([0.3, -1, 0.2], deg), np.zeros(3))
    assert G.rotation_angle_deg(a.q, b.q) == pytest.approx(deg, abs=1e-9)
    assert G.perspective_filter(a, b, 60.0) is kept


@given(st.floats(0, 179), st.integers(0, 2 ** 31 - 1))
def test_rotation_angle_sign_invariant(deg, seed):
    r = np.random.default_rng(seed)
    q = G.Pose.from_matrix(rotation_from_axis_angle(r.standard_normal(3), deg), np.zeros(3)).q
    e = np.array([1.0, 0, 0, 0])
    assert G.rotation_angle_deg(e, q) == pytest.approx(G.rotation_angle_deg(e, -q), abs=1e-9)
    assert G.rotation_angle_deg(e, q) == pytest.approx(deg, abs=1e-5)


def test_project_backproject_round_trip(rng):
    K = G.Intrinsics(120, 110, 64, 60)
    pose = G.Pose.from_matrix(rotation_from_axis_angle([1, 2, 3], 20), [0.1, -0.3, 4.0])
    X = rng.uniform(-1, 1, (20, 3))
    x, y, z = G.project(X, K, pose)
    np.testing.assert_allclose(G.backproject(x, y, z, K, pose), X, atol=1e-12)


def test_look_at_points_at_target():
    p = G.look_at([1.0, 2.0, 10.0], [0.5, 2.5, 0.0], 0.3)
    z_axis = p.R[2]
    d = np.array([0.5, 2.5, 0.0]) - [1.0, 2.0, 10.0]
    np.testing.assert_allclose(z_axis, d / np.linalg.norm(d), atol=1e-12)
    np.testing.assert_allclose(p.center, [1.0, 2.0, 10.0], atol=1e-12)


def test_transfer_on_plane_matches_projection():
    pa = nadir([0.0, 0.0, 10.0])
    pb = G.look_at([1.0, 0.5, 9.0], [0.3, 0.2, 0.0], 0.2)
    sc = plane_scene([pa, pb])
    xa, ya = np.array([30.0, 64.0, 100.5]), np.array([40.0, 63.5, 90.0])
    tr = G.project_keypoints(xa, ya, sc.depths[0], pa, pb, sc.intrinsics[0], sc.intrinsics[1],
                             sc.depths[1])
    Xw = G.backproject(xa, ya, np.full(3, 10.0), sc.intrinsics[0], pa)
    np.testing.assert_allclose(Xw[:, 2], 0, atol=1e-9)
    x, y, _ = G.project(Xw, sc.intrinsics[1], pb)
    assert tr.valid.all()
    np.testing.assert_allclose(tr.x, x, atol=1e-6)
    np.testing.assert_allclose(tr.y, y, atol=1e-6)


def test_transfer_reason_codes():
    pa = nadir([0.0, 0.0, 10.0])
    pb = nadir([30.0, 0.0, 10.0])     # disjoint footprint
    sc = plane_scene([pa, pb])
    depth_a = sc.depths[0].copy()
    depth_a[0, 0] = -1
    tr = G.project_keypoints([0.0, 64.0], [0.0, 64.0], depth_a, pa, pb, sc.intrinsics[0],
                             sc.intrinsics[1], sc.depths[1])
    assert tr.reason.tolist() == [1, 3]
    # occlusion: B's raster says something is in front of the point
    pb = nadir([0.5, 0.0, 10.0])
    sc = plane_scene([pa, pb])
    blocked = sc.depths[1] * 0.5
    tr = G.project_keypoints([64.0], [64.0], sc.depths[0], pa, pb, sc.intrinsics[0],
                             sc.intrinsics[1], blocked)
    assert tr.reason.tolist() == [4]


def test_transfer_behind_camera():
    pa = nadir([0.0, 0.0, 10.0])
    # B looks away from the ground: the point is behind it
    pb = G.look_at([0.0, 0.0, 10.0], [0.0, 0.0, 20.0], 0.0)
    sc = plane_scene([pa])
    tr = G.project_keypoints([64.0], [64.0], sc.depths[0], pa, pb, sc.intrinsics[0],
                             sc.intrinsics[0])
    assert tr.reason.tolist() == [2]


def test_gsd():
    K = G.Intrinsics(200, 200, 0, 0)
    assert G.gsd(10.0, K) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        G.gsd(-1.0, K)


def test_bilinear_sample_outside_is_nan():
    img = np.arange(12.0).reshape(3, 4)
    v = G.bilinear_sample(img, [0.5, 3.0, 3.01, -0.1], [0.5, 2.0, 0.0, 0.0])
    assert v[0] == pytest.approx((0 + 1 + 4 + 5) / 4)
    assert v[1] == 11
    assert np.isnan(v[2]) and np.isnan(v[3])


def test_plane_depth_nadir_constant():
    p = nadir([0.0, 0.0, 7.0])
    K = G.Intrinsics(50, 50, 31.5, 31.5)
    np.testing.assert_allclose(plane_depth(K, p, 64, 64), 7.0)
