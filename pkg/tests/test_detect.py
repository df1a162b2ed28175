import numpy as np
import pytest

from bindesc import detect as D
from bindesc.data import patches as P


def naive_segment_test(nb, threshold, arc=9):
    """Arc test on one 7x7 neighbourhood, straight from the definition."""
    c = nb[3, 3]
    ring = [nb[3 + dy, 3 + dx] for dx, dy in D.CIRCLE]
    for sign in (1, -1):
        flags = [sign * (v - c) > threshold for v in ring]
        for start in range(16):
            if all(flags[(start + i) % 16] for i in range(arc)):
                return True
    return False


def blob(size, s, cx, cy, amp=0.6):
    yy, xx = np.mgrid[0:size, 0:size]
    return 0.2 + amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))


def test_constant_image_no_keypoints():
    img = np.full((64, 64), 0.4)
    assert D.dog_detect(img) == []
    assert D.fast_detect(img) == []


def test_dog_rejects_small_image():
    with pytest.raises(ValueError):
        D.dog_detect(np.zeros((20, 64)))


@pytest.mark.parametrize("s", [2.5, 4.0, 6.0])
def test_dog_blob_scale(s):
    img = blob(128, s, 61.3, 66.8)
    kps = D.dog_detect(img)
    top = kps[0]
    assert abs(top.x - 61.3) < 1.0 and abs(top.y - 66.8) < 1.0
    assert top.eta == pytest.approx(s, rel=0.2)


def test_dog_scale_covariance(rng):
    # the 50 strongest keypoints of the half-size image reappear in the full
    # image at twice the coordinates and about twice the scale
    from scipy import ndimage
    img = ndimage.gaussian_filter(rng.random((256, 256)), 4.0)
    img = (img - img.min()) / np.ptp(img)
    full = D.dog_detect(img, D.DetectorConfig(contrast=0.01, max_keypoints=10 ** 6))
    small = D.dog_detect(ndimage.gaussian_filter(img, 1.0)[::2, ::2],
                         D.DetectorConfig(contrast=0.01, max_keypoints=50))
    assert len(small) == 50
    F = np.array([(k.x, k.y, k.eta) for k in full])
    hits = 0
    for k in small:
        same_scale = np.abs(np.log2(F[:, 2] / (2 * k.eta))) < 0.5
        d = np.hypot(F[:, 0] - 2 * k.x, F[:, 1] - 2 * k.y)[same_scale]
        hits += bool(len(d) and d.min() <= 2.0)
    assert hits >= 25


def test_fast_square_corners():
    img = np.full((64, 64), 0.1)
    img[20:41, 15:46] = 0.9
    kps = D.fast_detect(img, D.DetectorConfig(fast_octaves=1))
    corners = np.array([(15, 20), (45, 20), (15, 40), (45, 40)])
    got = np.array([(k.x, k.y) for k in kps])
    for c in corners:
        assert np.min(np.abs(got - c).max(axis=1)) <= 1
    # every detection is near one of the corners
    for g in got:
        assert np.min(np.abs(corners - g).max(axis=1)) <= 1


def test_fast_octave_scale():
    img = np.full((128, 128), 0.1)
    img[40:89, 30:99] = 0.9
    kps = D.fast_detect(img, D.DetectorConfig(fast_octaves=3))
    assert {k.octave for k in kps} >= {0, 1}
    for k in kps:
        assert k.eta == 2.0 ** k.octave


def test_segment_test_matches_naive(rng):
    n = 1200
    thr = 0.15
    nbs = rng.random((n, 7, 7))
    # bias half the samples towards arcs so both outcomes are exercised
    for i in range(0, n, 2):
        start = rng.integers(16)
        for j in range(rng.integers(7, 13)):
            dx, dy = D.CIRCLE[(start + j) % 16]
            nbs[i, 3 + dy, 3 + dx] = nbs[i, 3, 3] + rng.choice([-1, 1]) * rng.uniform(0.2, 0.5)
    got, expect = [], []
    for nb in nbs:
        corner, _ = D.segment_test(nb, thr)
        got.append(bool(corner[3, 3]))
        expect.append(naive_segment_test(nb, thr))
    assert got == expect
    assert 100 < sum(expect) < n - 100


def test_segment_score_is_arc_sum():
    nb = np.zeros((7, 7))
    vals = np.linspace(0.3, 0.6, 10)
    for j, v in enumerate(vals):
        dx, dy = D.CIRCLE[(5 + j) % 16]
        nb[3 + dy, 3 + dx] = v
    corner, score = D.segment_test(nb, 0.1)
    assert corner[3, 3]
    assert score[3, 3] == pytest.approx(vals.sum())


@pytest.fixture(scope="module")
def texture():
    from scipy import ndimage
    rng = np.random.default_rng(7)
    img = ndimage.gaussian_filter(rng.random((160, 160)), 1.5)
    return (img - img.min()) / np.ptp(img)


@pytest.mark.parametrize("kind", ["dog", "fast"])
def test_detect_and_extract_cap_and_order(texture, kind):
    cfg = D.DetectorConfig(contrast=0.01, max_keypoints=30)
    kps, patches = D.detect_and_extract(texture, kind, cfg)
    assert 0 < len(kps) <= 30
    assert patches.shape == (len(kps), 32, 32)
    scores = [k.score for k in kps]
    assert scores == sorted(scores, reverse=True)
    for k, p in zip(kps, patches):
        assert 0 < k.x < 159 and 0 < k.y < 159
        ref, fill = P.extract_patch(texture, k.x, k.y, P.window_side(k.eta, kind))
        assert fill <= P.MAX_FILL
        np.testing.assert_array_equal(p, ref)


def test_detection_deterministic(texture):
    cfg = D.DetectorConfig(contrast=0.01)
    assert D.dog_detect(texture, cfg) == D.dog_detect(texture, cfg)
    assert D.fast_detect(texture, cfg) == D.fast_detect(texture, cfg)


def test_keypoint_csv_round_trip(tmp_path, texture):
    kps = D.dog_detect(texture, D.DetectorConfig(contrast=0.01, max_keypoints=20))
    D.write_keypoints_csv(tmp_path / "k.csv", kps)
    assert D.read_keypoints_csv(tmp_path / "k.csv") == kps


def test_bad_config():
    with pytest.raises(ValueError):
        D.DetectorConfig(contrast=0)
    with pytest.raises(ValueError):
        D.DetectorConfig(max_keypoints=0)
    with pytest.raises(ValueError):
        D.detect(np.zeros((40, 40)), "sift")
