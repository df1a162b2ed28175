import numpy as np
import pytest

from bindesc.data import archive as A
from bindesc.data import correspond as C
from bindesc.data import geometry as G
from bindesc.data import patches as P
from bindesc.data import pipeline as PL
from bindesc.data import scene as S
from bindesc.detect import Keypoint
from oracles import rotation_from_axis_angle
from scenes import nadir, plane_scene


def kps(xy, eta=2.0):
    return [Keypoint(float(x), float(y), eta, 1.0) for x, y in xy]


@pytest.fixture(scope="module")
def two_view():
    pa = nadir([0.0, 0.0, 10.0])
    pb = G.look_at([0.8, -0.4, 9.0], [0.2, 0.1, 0.0], 0.15)
    return plane_scene([pa, pb])


def _transfer(scene, x, y):
    tr = G.project_keypoints([x], [y], scene.depths[0], scene.poses[0], scene.poses[1],
                             scene.intrinsics[0], scene.intrinsics[1], scene.depths[1])
    assert tr.valid[0]
    return tr.x[0], tr.y[0]


# --- correspondences ----------------------------------------------------------

@pytest.mark.parametrize("offset,kept", [(0.0, True), (2.9, True), (2.999, True), (3.5, False)])
def test_reprojection_radius(two_view, offset, kept):
    xb, yb = _transfer(two_view, 60.0, 70.0)
    corr = C.build_correspondences(kps([(60, 70)]), kps([(xb + offset * 0.6, yb - offset * 0.8)]),
                                   two_view, 0, 1)
    assert (len(corr) == 1) is kept
    assert corr.stats["rejected_3px"] == (0 if kept else 1)


def test_identical_views_match_with_zero_residual():
    p = nadir([0.0, 0.0, 10.0])
    sc = plane_scene([p, p])
    pts = [(10.5, 20.0), (64.0, 64.0), (100.0, 30.25)]
    corr = C.build_correspondences(kps(pts), kps(pts), sc, 0, 1)
    np.testing.assert_array_equal(corr.idx_a, [0, 1, 2])
    np.testing.assert_array_equal(corr.idx_b, [0, 1, 2])
    np.testing.assert_allclose(corr.residual, 0, atol=1e-6)
    np.testing.assert_allclose(corr.gt_ratio, 1.0)


def test_bijective_on_duplicates(two_view):
    xb, yb = _transfer(two_view, 60.0, 70.0)
    # three A keypoints all within the radius of the same B keypoint
    a = kps([(60.0, 70.0), (60.0, 70.0), (61.0, 70.5)])
    corr = C.build_correspondences(a, kps([(xb, yb)]), two_view, 0, 1)
    assert len(corr) == 1
    assert corr.idx_a[0] == 0              # smallest residual, then lowest index
    assert corr.stats["rejected_bijective"] == 2


def test_correspondences_are_one_to_one(two_view, rng):
    a = kps(rng.uniform(10, 118, (200, 2)))
    b = kps(rng.uniform(10, 118, (200, 2)))
    corr = C.build_correspondences(a, b, two_view, 0, 1, radius=6.0)
    assert len(np.unique(corr.idx_a)) == len(corr)
    assert len(np.unique(corr.idx_b)) == len(corr)


def test_planar_residual_self_consistent(two_view, rng):
    xa = rng.uniform(20, 108, 40)
    ya = rng.uniform(20, 108, 40)
    tr = G.project_keypoints(xa, ya, two_view.depths[0], two_view.poses[0], two_view.poses[1],
                             two_view.intrinsics[0], two_view.intrinsics[1])
    v = tr.valid
    corr = C.build_correspondences(kps(np.c_[xa[v], ya[v]]), kps(np.c_[tr.x[v], tr.y[v]]),
                                   two_view, 0, 1)
    assert len(corr) == v.sum()
    assert corr.residual.max() < 1e-3


def test_empty_keypoints(two_view):
    corr = C.build_correspondences([], kps([(1, 1)]), two_view, 0, 1)
    assert len(corr) == 0


def test_gt_ratio_is_gsd_ratio():
    # B twice as high: B's ground sample is twice as large, so B's scale halves
    sc = plane_scene([nadir([0, 0, 5.0]), nadir([0, 0, 10.0])])
    xb, yb = _transfer(sc, 40.0, 50.0)
    corr = C.build_correspondences(kps([(40, 50)], 2.0), kps([(xb, yb)], 1.0), sc, 0, 1)
    assert corr.gt_ratio[0] == pytest.approx(0.5)
    assert corr.est_ratio[0] == pytest.approx(0.5)


@pytest.mark.parametrize("gt,est,kept", [
    (1.0, 1.3, False), (2.0, 2.2, True), (1.0, 0.74, False), (1.0, 0.76, True),
    (1.0, 1.25, True), (1.0, 1.26, False)])
def test_scale_consistent(gt, est, kept):
    assert bool(C.scale_consistent([gt], [est])[0]) is kept


def test_scale_rejects_bad_gsd():
    with pytest.raises(ValueError):
        C.scale_consistent([0.0], [1.0])
    with pytest.raises(ValueError):
        C.scale_consistent([np.nan], [1.0])


def test_scale_filter_reference_either_side():
    # 26% off in one direction is ~35% off in the other: rejected for both references
    corr = C.CorrespondenceSet(np.arange(2), np.arange(2), np.zeros(2), np.ones(2),
                               np.array([0.74, 1.1]), np.zeros((2, 3)), {})
    for seed in range(8):
        out = C.scale_filter(corr, np.random.default_rng(seed))
        np.testing.assert_array_equal(out.idx_a, [1])
        assert out.stats["rejected_scale"] == 1


# --- patches ------------------------------------------------------------------

def test_dog_window_identity_resolution(rng):
    img = rng.random((64, 64))
    side = P.window_side(2.0, "dog")
    assert side == 32.0
    patch, fill = P.extract_patch(img, 31.5, 27.5, side)
    assert fill == 0
    np.testing.assert_allclose(patch, img[12:44, 16:48], atol=1e-12)


def test_fast_window_side():
    assert P.window_side(1.0, "fast") == 31.0
    with pytest.raises(ValueError):
        P.window_side(1.0, "harris")


def test_checkerboard_crop_oracle():
    yy, xx = np.mgrid[0:80, 0:80]
    board = (((yy // 4) + (xx // 4)) % 2).astype(float)
    patch, _ = P.extract_patch(board, 40.5, 39.5, 32.0)
    np.testing.assert_array_equal(patch, board[24:56, 25:57])


def test_constant_image_constant_patch():
    patch, _ = P.extract_patch(np.full((50, 50), 0.3), 20.0, 22.0, 48.0)
    np.testing.assert_allclose(patch, 0.3)


def test_edge_fill_and_rejection():
    img = np.arange(64 * 64, dtype=float).reshape(64, 64)
    patch, fill = P.extract_patch(img, 2.5, 31.5, 32.0)
    assert 0.25 < fill < 0.5 and patch is None
    patch, fill = P.extract_patch(img, 13.5, 31.5, 32.0, max_fill=1.0)
    assert fill == pytest.approx(2 / 32)      # grid columns at x = -2 and -1
    np.testing.assert_array_equal(patch[:, :2], np.repeat(patch[:, 2:3], 2, axis=1))
    with pytest.raises(P.WindowError):
        P.extract_patch(img, -100.0, 30.0, 32.0)
    with pytest.raises(P.WindowError):
        P.extract_patch(img, 30.0, 30.0, 0.0)


# --- scenes -----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_cfg():
    return S.SceneConfig(size=96, n_craters=100, supersample=1)


def test_scene_deterministic(tiny_cfg):
    a = S.synth_scene(5, "heightfield", tiny_cfg)
    b = S.synth_scene(5, "heightfield", tiny_cfg)
    for x, y in zip(a.images + a.depths, b.images + b.depths):
        assert x.tobytes() == y.tobytes()


def test_relative_rotation_within_limit(tiny_cfg):
    for seed in range(4):
        sc = S.synth_scene(seed, "planar", tiny_cfg)
        for i in range(sc.n_views):
            for j in range(i):
                assert G.rotation_angle_deg(sc.poses[i].q, sc.poses[j].q) <= 60.0


def test_light_changes_intensity_not_depth(tiny_cfg):
    a = S.synth_scene(3, "heightfield", tiny_cfg, light=[0.0, 0.6, 0.8])
    b = S.synth_scene(3, "heightfield", tiny_cfg, light=[0.6, 0.0, 0.8])
    np.testing.assert_array_equal(a.depths[0], b.depths[0])
    assert np.abs(a.images[0] - b.images[0]).max() > 0.01


def test_planar_scene_transfer_exact(tiny_cfg):
    sc = S.synth_scene(2, "planar", tiny_cfg)
    g = np.arange(8.0, 88.0, 8.0)
    xa, ya = [a.ravel() for a in np.meshgrid(g, g)]
    tr = G.project_keypoints(xa, ya, sc.depths[0], sc.poses[0], sc.poses[1], sc.intrinsics[0],
                             sc.intrinsics[1])
    v = tr.valid
    assert v.sum() > 10
    # the ground points are on z = 0, so reprojection is exact
    np.testing.assert_allclose(tr.world[v, 2], 0, atol=1e-6)
    x, y, _ = G.project(tr.world[v], sc.intrinsics[1], sc.poses[1])
    np.testing.assert_allclose(np.c_[tr.x[v], tr.y[v]], np.c_[x, y], atol=1e-6)


def test_scene_io_round_trip(tmp_path, tiny_cfg):
    sc = S.synth_scene(1, "planar", tiny_cfg)
    S.save_scene(sc, tmp_path, fmt="png")
    back = S.load_scene(tmp_path)
    assert back.n_views == sc.n_views
    for i in range(sc.n_views):
        np.testing.assert_allclose(back.images[i], sc.images[i], atol=0.5 / 255 + 1e-12)
        np.testing.assert_allclose(back.depths[i], sc.depths[i].astype(np.float32), rtol=0)
        np.testing.assert_allclose(back.poses[i].R, sc.poses[i].R, atol=1e-12)
    assert back.intrinsics[0] == sc.intrinsics[0]


def test_depth_file_sentinel_and_corruption(tmp_path):
    d = np.array([[1.0, np.nan], [-3.0, 2.5]])
    S.write_depth(tmp_path / "d.depth", d)
    back = S.read_depth(tmp_path / "d.depth")
    np.testing.assert_array_equal(back, [[1.0, -1.0], [-1.0, 2.5]])
    raw = (tmp_path / "d.depth").read_bytes()
    (tmp_path / "t.depth").write_bytes(raw[:-2])
    with pytest.raises(ValueError):
        S.read_depth(tmp_path / "t.depth")
    (tmp_path / "m.depth").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        S.read_depth(tmp_path / "m.depth")


def test_image_and_depth_extent_mismatch():
    with pytest.raises(ValueError):
        S.MultiViewScene([np.zeros((4, 4))], [None], [None], [np.zeros((4, 5))])


# --- archive ----------------------------------------------------------------

def _toy_archive(n=1030, rng=None):
    rng = rng or np.random.default_rng(0)
    pairs = np.zeros(n, A.PAIR_DTYPE)
    pairs["patch_a"] = 2 * np.arange(n)
    pairs["patch_b"] = 2 * np.arange(n) + 1
    pairs["point"] = np.arange(n)
    pairs["gt_ratio"] = 1.0
    pairs["est_ratio"] = rng.uniform(0.8, 1.2, n)
    pairs["residual"] = rng.uniform(0, 3, n)
    pairs["angle"] = rng.uniform(0, 60, n)
    pairs["split"] = (np.arange(n) % 5 == 0)
    patches = rng.integers(0, 256, (2 * n, 32, 32), dtype=np.uint8)
    return A.PatchArchive(patches, pairs, {"note": "toy"})


def test_archive_round_trip(tmp_path):
    ar = _toy_archive()
    A.archive_write(tmp_path / "a.dpat", ar)
    back = A.archive_read(tmp_path / "a.dpat")
    assert back.patches.tobytes() == ar.patches.tobytes()
    assert back.pairs.tobytes() == ar.pairs.tobytes()
    assert back.meta == ar.meta


def test_archive_rejects_corruption(tmp_path):
    path = tmp_path / "a.dpat"
    A.archive_write(path, _toy_archive(20))
    raw = bytearray(path.read_bytes())
    cases = {"trunc": bytes(raw[:-5]), "short": bytes(raw[:6])}
    flipped = bytearray(raw)
    flipped[200] ^= 1
    cases["flip"] = bytes(flipped)
    ver = bytearray(raw)
    ver[4] = 9
    cases["version"] = bytes(ver)
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(A.ArchiveError):
            A.archive_read(tmp_path / name)


@pytest.mark.parametrize("field,value", [("residual", 3.5), ("angle", 61.0),
                                         ("est_ratio", 0.74)])
def test_archive_validate_constraints(field, value):
    ar = _toy_archive(20)
    ar.pairs[3][field] = value
    with pytest.raises(A.ArchiveError):
        ar.validate()


def test_archive_rejects_shared_point():
    ar = _toy_archive(20)
    ar.pairs["point"][5] = ar.pairs["point"][10]      # both split 0
    with pytest.raises(A.ArchiveError):
        ar.validate()


def test_sampler_epoch_coverage():
    ar = _toy_archive(1280)           # 1024 train pairs
    s = A.BatchSampler(ar, "train", 512, seed=3)
    assert len(s) == 2
    got = np.concatenate(list(s.epoch(0)))
    np.testing.assert_array_equal(np.sort(got), s.indices)
    assert not np.array_equal(got, np.concatenate(list(s.epoch(1))))
    np.testing.assert_array_equal(got, np.concatenate(list(A.BatchSampler(ar, "train", 512, 3).epoch(0))))


def test_sample_batch_shapes():
    ar = _toy_archive(1030)
    a, b, idx = A.sample_batch(ar, np.random.default_rng(0), 512)
    assert a.shape == b.shape == (512, 1, 32, 32)
    assert len(np.unique(idx)) == 512
    assert np.all(ar.pairs["split"][idx] == 0)
    with pytest.raises(A.ArchiveError):
        A.sample_batch(ar, np.random.default_rng(0), 512, split="test")


def test_small_pipeline_deterministic_and_valid():
    cfg = PL.GenConfig(n_scenes=2, image_size=128, test_fraction=0.5)
    a1, st = PL.generate_archive(cfg)
    a2, _ = PL.generate_archive(cfg)
    assert a1.patches.tobytes() == a2.patches.tobytes()
    assert a1.pairs.tobytes() == a2.pairs.tobytes()
    assert st["pairs"] == len(a1.pairs) > 0
    a1.validate()
    assert set(np.unique(a1.pairs["split"])) <= {0, 1}
