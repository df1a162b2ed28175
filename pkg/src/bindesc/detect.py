"""Keypoint detectors: difference-of-Gaussians and FAST-9.

Images are float arrays with intensities in [0, 1].  Keypoints carry an
``eta`` scale: the Gaussian sigma of the detection for DoG, and
``2**octave`` for FAST.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from bindesc.data import patches as P

INPUT_BLUR = 0.5

# 16-pixel Bresenham circle of radius 3, clockwise from 12 o'clock (dx, dy)
CIRCLE = np.array([(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
                   (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)])


@dataclass
class Keypoint:
    x: float
    y: float
    eta: float
    score: float
    octave: int = 0


@dataclass
class DetectorConfig:
    # DoG
    octaves: int | None = None       # None: down to a 16 px top level
    intervals: int = 3
    sigma0: float = 1.6
    contrast: float = 0.03
    edge_ratio: float = 10.0
    # FAST
    arc: int = 9
    fast_threshold: float = 0.08
    fast_octaves: int = 4
    # shared
    max_keypoints: int = 1000
    nms_radius: int = 1

    def __post_init__(self):
        if self.contrast <= 0 or self.edge_ratio <= 0 or self.fast_threshold <= 0:
            raise ValueError("detector thresholds must be positive")
        if self.max_keypoints < 1:
            raise ValueError("max_keypoints must be at least 1")
        if self.intervals < 1 or self.sigma0 <= INPUT_BLUR:
            raise ValueError("bad scale-space parameters")


def _rank(kps, n):
    # strongest first; equal scores ordered by (y, x)
    kps = sorted(kps, key=lambda k: (-k.score, k.y, k.x))
    return kps[:n]


# ---------------------------------------------------------------------------
# Difference of Gaussians
# ---------------------------------------------------------------------------

def gaussian_pyramid(image, cfg: DetectorConfig):
    """List over octaves of (S+3, h, w) Gaussian stacks."""
    img = np.asarray(image, dtype=np.float64)
    S = cfg.intervals
    n_oct = cfg.octaves
    if n_oct is None:
        n_oct = max(1, int(np.floor(np.log2(min(img.shape) / 16))) + 1)
    k = 2.0 ** (1.0 / S)
    sig = [cfg.sigma0 * k ** i for i in range(S + 3)]
    base = ndimage.gaussian_filter(img, np.sqrt(sig[0] ** 2 - INPUT_BLUR ** 2), mode="nearest")
    pyr = []
    for _ in range(n_oct):
        if min(base.shape) < 8:
            break
        stack = [base]
        for i in range(1, S + 3):
            inc = np.sqrt(sig[i] ** 2 - sig[i - 1] ** 2)
            stack.append(ndimage.gaussian_filter(stack[-1], inc, mode="nearest"))
        stack = np.stack(stack)
        pyr.append(stack)
        base = stack[S][::2, ::2]
    return pyr


def _derivatives(D, s, y, x):
    # gradient and Hessian of the DoG stack at integer sites (vectorised)
    c = D[s, y, x]
    dx = 0.5 * (D[s, y, x + 1] - D[s, y, x - 1])
    dy = 0.5 * (D[s, y + 1, x] - D[s, y - 1, x])
    ds = 0.5 * (D[s + 1, y, x] - D[s - 1, y, x])
    dxx = D[s, y, x + 1] + D[s, y, x - 1] - 2 * c
    dyy = D[s, y + 1, x] + D[s, y - 1, x] - 2 * c
    dss = D[s + 1, y, x] + D[s - 1, y, x] - 2 * c
    dxy = 0.25 * (D[s, y + 1, x + 1] - D[s, y + 1, x - 1] - D[s, y - 1, x + 1] + D[s, y - 1, x - 1])
    dxs = 0.25 * (D[s + 1, y, x + 1] - D[s + 1, y, x - 1] - D[s - 1, y, x + 1] + D[s - 1, y, x - 1])
    dys = 0.25 * (D[s + 1, y + 1, x] - D[s + 1, y - 1, x] - D[s - 1, y + 1, x] + D[s - 1, y - 1, x])
    g = np.stack([dx, dy, ds], axis=-1)
    H = np.stack([np.stack([dxx, dxy, dxs], -1), np.stack([dxy, dyy, dys], -1),
                  np.stack([dxs, dys, dss], -1)], axis=-2)
    return c, g, H


def _solve(H, g):
    det = np.linalg.det(H)
    ok = np.abs(det) > 1e-18
    sol = np.zeros(g.shape)
    if ok.any():
        sol[ok] = -np.linalg.solve(H[ok], g[ok][..., None])[..., 0]
    return sol, ok


def dog_detect(image, cfg: DetectorConfig | None = None):
    """Scale-space extrema of the DoG stack with quadratic refinement."""
    cfg = cfg or DetectorConfig()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 32:
        raise ValueError(f"DoG needs a 2-D image of at least 32x32, got {img.shape}")
    S = cfg.intervals
    border = 5
    kps = []
    for o, G in enumerate(gaussian_pyramid(img, cfg)):
        D = G[1:] - G[:-1]
        ns, h, w = D.shape
        if h <= 2 * border or w <= 2 * border:
            break
        mx = ndimage.maximum_filter(D, size=3, mode="nearest")
        mn = ndimage.minimum_filter(D, size=3, mode="nearest")
        cand = ((D == mx) | (D == mn)) & (np.abs(D) > 0.5 * cfg.contrast)
        cand[[0, -1]] = False
        cand[:, :border] = cand[:, -border:] = False
        cand[:, :, :border] = cand[:, :, -border:] = False
        s, y, x = np.nonzero(cand)
        alive = np.ones(len(s), bool)
        for _ in range(5):
            idx = np.flatnonzero(alive)
            if len(idx) == 0:
                break
            c, g, H = _derivatives(D, s[idx], y[idx], x[idx])
            sol, ok = _solve(H, g)
            alive[idx[~ok]] = False
            move = ok & (np.abs(sol) > 0.5).any(axis=1)
            if not move.any():
                break
            mi = idx[move]
            step = np.round(sol[move]).astype(int)
            x[mi] += step[:, 0]
            y[mi] += step[:, 1]
            s[mi] += step[:, 2]
            inside = ((s[mi] >= 1) & (s[mi] <= ns - 2) & (y[mi] >= border) & (y[mi] < h - border)
                      & (x[mi] >= border) & (x[mi] < w - border))
            alive[mi[~inside]] = False
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            continue
        c, g, H = _derivatives(D, s[idx], y[idx], x[idx])
        sol, ok = _solve(H, g)
        resp = c + 0.5 * np.sum(g * sol, axis=1)
        tr = H[:, 0, 0] + H[:, 1, 1]
        det = H[:, 0, 0] * H[:, 1, 1] - H[:, 0, 1] ** 2
        r = cfg.edge_ratio
        good = ((np.abs(resp) >= cfg.contrast) & (det > 0)
                & (tr * tr * r < (r + 1) ** 2 * det) & ok & (np.abs(sol) <= 0.5).all(axis=1))
        scale = 2.0 ** o
        H0, W0 = img.shape
        for j in np.flatnonzero(good):
            i = idx[j]
            kx = (x[i] + sol[j, 0]) * scale
            ky = (y[i] + sol[j, 1]) * scale
            if not (0 < kx < W0 - 1 and 0 < ky < H0 - 1):
                continue
            # the pair (sigma, k sigma) is summarised by its geometric midpoint
            eta = cfg.sigma0 * 2.0 ** ((s[i] + sol[j, 2] + 0.5) / S) * scale
            kps.append(Keypoint(float(kx), float(ky), float(eta), float(abs(resp[j])), o))
    return _rank(kps, cfg.max_keypoints)


# ---------------------------------------------------------------------------
# FAST
# ---------------------------------------------------------------------------

def segment_test(image, threshold, arc=9):
    """Per-pixel FAST segment test.

    Returns ``(corner, score)`` over the full image (a 3 px border is never a
    corner).  The score sums |I_circle - I_centre| over the longest run of
    circle pixels that are all brighter (or all darker) than the centre by
    more than ``threshold``.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    corner = np.zeros((h, w), bool)
    score = np.zeros((h, w))
    if h < 7 or w < 7:
        return corner, score
    c = img[3:h - 3, 3:w - 3]
    ring = np.stack([img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] for dx, dy in CIRCLE])
    diff = ring - c
    best_len = np.zeros(c.shape, int)
    best_score = np.zeros(c.shape)
    for flags in (diff > threshold, diff < -threshold):
        f2 = np.concatenate([flags, flags])          # unroll the circle once
        a2 = np.concatenate([np.abs(diff), np.abs(diff)]) * f2
        run = np.zeros(c.shape, int)
        runs = np.empty(f2.shape, int)
        for i in range(32):
            run = np.where(f2[i], run + 1, 0)
            runs[i] = run
        runs = np.minimum(runs, 16)
        end = np.argmax(runs, axis=0)
        length = np.take_along_axis(runs, end[None], 0)[0]
        csum = np.concatenate([np.zeros((1,) + c.shape), np.cumsum(a2, axis=0)])
        s = (np.take_along_axis(csum, (end + 1)[None], 0)[0]
             - np.take_along_axis(csum, (end + 1 - length)[None], 0)[0])
        better = length > best_len
        best_len = np.where(better, length, best_len)
        best_score = np.where(better, s, best_score)
    inner = best_len >= arc
    corner[3:h - 3, 3:w - 3] = inner
    score[3:h - 3, 3:w - 3] = np.where(inner, best_score, 0.0)
    return corner, score


def _halve(img):
    return ndimage.gaussian_filter(img, 1.0, mode="nearest")[::2, ::2]


def fast_detect(image, cfg: DetectorConfig | None = None):
    cfg = cfg or DetectorConfig()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("FAST needs a 2-D image")
    H0, W0 = img.shape
    kps = []
    level = img
    for o in range(cfg.fast_octaves):
        if min(level.shape) < 7:
            break
        corner, score = segment_test(level, cfg.fast_threshold, cfg.arc)
        size = 2 * cfg.nms_radius + 1
        peak = score == ndimage.maximum_filter(score, size=size, mode="constant")
        ys, xs = np.nonzero(corner & peak)
        scale = 2.0 ** o
        for y, x in zip(ys, xs):
            kx, ky = x * scale, y * scale
            if 0 < kx < W0 - 1 and 0 < ky < H0 - 1:
                kps.append(Keypoint(float(kx), float(ky), scale, float(score[y, x]), o))
        level = _halve(level)
    return _rank(kps, cfg.max_keypoints)


# ---------------------------------------------------------------------------
# Detection + extraction
# ---------------------------------------------------------------------------

def detect(image, kind, cfg=None):
    if kind == "dog":
        return dog_detect(image, cfg)
    if kind == "fast":
        return fast_detect(image, cfg)
    raise ValueError(f"unknown detector kind {kind!r}")


def detect_and_extract(image, kind="dog", cfg: DetectorConfig | None = None, max_fill=P.MAX_FILL):
    """Detect, then cut 32x32 patches (16 eta for DoG, 31 eta for FAST).

    Keypoints whose window needs more than ``max_fill`` edge replication are
    dropped before the ``max_keypoints`` cap is applied.  Returns
    ``(keypoints, patches)`` with float patches of shape (N, 32, 32).
    """
    cfg = cfg or DetectorConfig()
    uncapped = DetectorConfig(**{**asdict(cfg), "max_keypoints": 10 ** 9})
    kps = detect(image, kind, uncapped)
    sides = [P.window_side(k.eta, kind) for k in kps]
    crops, _ = P.extract_patches(image, [k.x for k in kps], [k.y for k in kps], sides,
                                 max_fill=max_fill)
    keep = [i for i, c in enumerate(crops) if c is not None][: cfg.max_keypoints]
    out = np.stack([crops[i] for i in keep]) if keep else np.zeros((0, P.PATCH_SIZE, P.PATCH_SIZE))
    return [kps[i] for i in keep], out


def write_keypoints_csv(path, kps):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["x", "y", "eta", "score", "octave"])
        for k in kps:
            wr.writerow([repr(k.x), repr(k.y), repr(k.eta), repr(k.score), k.octave])


def read_keypoints_csv(path):
    with open(path, newline="") as f:
        return [Keypoint(float(r["x"]), float(r["y"]), float(r["eta"]), float(r["score"]),
                         int(r["octave"])) for r in csv.DictReader(f)]
