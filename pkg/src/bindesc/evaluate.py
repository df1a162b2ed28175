"""Matching and evaluation: mutual-NN matching, FPR95, stereo metrics,
essential-matrix RANSAC and pose AUC."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from bindesc import _kernels
from bindesc import binquant as bq
from bindesc.data import correspond as C
from bindesc.data import geometry as G

AUC_THRESHOLDS = (5.0, 10.0, 20.0)


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Distances and matching
# ---------------------------------------------------------------------------

def distance_matrix(a, b, metric="euclidean"):
    """All-pairs distances.  ``hamming`` takes packed BitTensors and returns
    raw bit counts (monotone in the normalized distance)."""
    if metric == "hamming":
        if not (isinstance(a, bq.BitTensor) and isinstance(b, bq.BitTensor)):
            raise MetricError("hamming matching needs packed binary descriptors")
        if a.row_len != b.row_len:
            raise MetricError("descriptor lengths differ")
        return _kernels.hamming_matrix(np.ascontiguousarray(a.words), np.ascontiguousarray(b.words))
    if metric != "euclidean":
        raise MetricError(f"unknown metric {metric!r}")
    if isinstance(a, bq.BitTensor) or isinstance(b, bq.BitTensor):
        raise MetricError("packed descriptors need the hamming metric")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise MetricError("descriptor lengths differ")
    sq = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def _rows(d):
    return d.shape[0] if isinstance(d, bq.BitTensor) else len(d)


@dataclass
class Matches:
    idx_a: np.ndarray
    idx_b: np.ndarray
    dist: np.ndarray

    def __len__(self):
        return len(self.idx_a)


def match_descriptors(desc_a, desc_b, metric="euclidean"):
    """Mutual nearest neighbours (ties resolve to the lowest index)."""
    if _rows(desc_a) == 0 or _rows(desc_b) == 0:
        raise MetricError("empty descriptor set")
    D = distance_matrix(desc_a, desc_b, metric)
    ab = np.argmin(D, axis=1)
    ba = np.argmin(D, axis=0)
    ia = np.flatnonzero(ba[ab] == np.arange(len(ab)))
    ib = ab[ia]
    dist = D[ia, ib].astype(np.float64)
    if metric == "hamming":
        dist = 2.0 * np.sqrt(dist) / np.sqrt(desc_a.row_len)
    return Matches(ia, ib, dist)


def pair_distances(a, b, metric="euclidean"):
    """Row-wise distance between two aligned descriptor sets."""
    if metric == "hamming":
        if a.shape != b.shape:
            raise MetricError("descriptor sets differ in shape")
        h = np.bitwise_count(a.words ^ b.words).sum(axis=1)
        return 2.0 * np.sqrt(h) / np.sqrt(a.row_len)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.linalg.norm(a - b, axis=1)


# ---------------------------------------------------------------------------
# Patch verification
# ---------------------------------------------------------------------------

@dataclass
class VerificationSet:
    positive: np.ndarray
    negative: np.ndarray


def fpr95(v: VerificationSet, min_positives=20):
    """Fraction of negatives at or below the 95 % recall distance."""
    pos = np.asarray(v.positive, dtype=np.float64)
    neg = np.asarray(v.negative, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("FPR95 needs positives and negatives")
    if len(pos) < min_positives:
        raise MetricError(f"FPR95 needs at least {min_positives} positives, got {len(pos)}")
    thr = np.percentile(pos, 95.0)
    return float(np.mean(neg <= thr))


def derangement(n, rng):
    """Uniform-ish permutation without fixed points (n >= 2)."""
    if n < 2:
        raise MetricError("need at least 2 items")
    p = rng.permutation(n)
    fixed = np.flatnonzero(p == np.arange(n))
    for i in fixed:
        # swap with a neighbour; both end up displaced
        j = (i + 1) % n
        p[i], p[j] = p[j], p[i]
    return p


def verification_set(desc_a, desc_b, rng, metric="euclidean"):
    """Row i of A with row i of B are positives; A_i with B_pi(i) negatives."""
    n = _rows(desc_a)
    perm = derangement(n, rng)
    pos = pair_distances(desc_a, desc_b, metric)
    if metric == "hamming":
        b_perm = bq.BitTensor(desc_b.words[perm], desc_b.shape, desc_b.pad_bits)
    else:
        b_perm = np.asarray(desc_b)[perm]
    neg = pair_distances(desc_a, b_perm, metric)
    return VerificationSet(pos, neg)


# ---------------------------------------------------------------------------
# Stereo metrics
# ---------------------------------------------------------------------------

def stereo_metrics(correct, putative, ground_truth, correct_nonmatches, features):
    """precision, recall, accuracy; None where a denominator is zero."""
    if correct > putative:
        raise MetricError("more correct matches than putative ones")
    ratio = (lambda a, b: None if b == 0 else a / b)
    return {"precision": ratio(correct, putative), "recall": ratio(correct, ground_truth),
            "accuracy": ratio(correct + correct_nonmatches, features)}


# ---------------------------------------------------------------------------
# Relative pose
# ---------------------------------------------------------------------------

def _normalize_points(x):
    c = x.mean(axis=0)
    s = np.sqrt(2) / max(np.mean(np.linalg.norm(x - c, axis=1)), 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return (x - c) * s, T


def eight_point(x1, x2):
    """Essential matrix from >= 8 normalized-coordinate correspondences."""
    n1, T1 = _normalize_points(x1)
    n2, T2 = _normalize_points(x2)
    # column order matches E.ravel(): row i of E multiplies x2[i]
    A = np.column_stack([n2[:, 0] * n1[:, 0], n2[:, 0] * n1[:, 1], n2[:, 0],
                         n2[:, 1] * n1[:, 0], n2[:, 1] * n1[:, 1], n2[:, 1],
                         n1[:, 0], n1[:, 1], np.ones(len(n1))])
    _, _, vt = np.linalg.svd(A)
    E = T2.T @ vt[-1].reshape(3, 3) @ T1
    U, _, Vt = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def sampson(E, x1, x2):
    """Root Sampson error of each correspondence (normalized image units)."""
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.sum(h2 * Ex1, axis=1) ** 2
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def triangulate(R, t, x1, x2):
    """Linear triangulation with P1 = [I|0], P2 = [R|t]; returns (n, 3)."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t[:, None]])
    A = np.stack([x1[:, 0:1] * P1[2] - P1[0], x1[:, 1:2] * P1[2] - P1[1],
                  x2[:, 0:1] * P2[2] - P2[0], x2[:, 1:2] * P2[2] - P2[1]], axis=1)
    _, _, vt = np.linalg.svd(A)
    X = vt[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return X[:, :3] / X[:, 3:4]


def decompose(E, x1, x2):
    """Pick (R, t) of the four factorizations with most points in front."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    best, best_n = None, -1
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            X = triangulate(R, t, x1, x2)
            z2 = X @ R[2] + t[2]
            n = int(np.sum((X[:, 2] > 0) & (z2 > 0)))
            if n > best_n:
                best, best_n = (R, t / np.linalg.norm(t)), n
    return best[0], best[1], best_n


@dataclass
class PoseResult:
    R: np.ndarray | None
    t: np.ndarray | None
    inliers: np.ndarray | None
    success: bool


def estimate_relative_pose(pts_a, pts_b, K_a, K_b=None, seed=0, threshold=1e-3,
                           max_iters=2000, confidence=0.999):
    """RANSAC over the normalized 8-point solver; pose maps A's frame to B's.

    ``pts_*`` are pixel coordinates (n, 2).  Fewer than 8 matches or no model
    with 8 inliers yields ``success=False``.
    """
    K_b = K_b or K_a
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    n = len(pts_a)
    if n < 8:
        return PoseResult(None, None, None, False)
    x1 = (pts_a - [K_a.cx, K_a.cy]) / [K_a.fx, K_a.fy]
    x2 = (pts_b - [K_b.cx, K_b.cy]) / [K_b.fx, K_b.fy]
    rng = np.random.default_rng(seed)
    best_inl, best_E, best_cost = None, None, np.inf
    iters, need = 0, max_iters
    while iters < min(need, max_iters):
        iters += 1
        sample = rng.choice(n, 8, replace=False)
        E = eight_point(x1[sample], x2[sample])
        err = sampson(E, x1, x2)
        # truncated L1: inliers pay their distance, everything else the threshold.
        # An inlier count (or a squared cost) prefers a slightly bent model that
        # swallows one near-line outlier over the exact one.
        cost = float(np.sum(np.minimum(err, threshold)))
        if cost < best_cost:
            best_cost, best_E, best_inl = cost, E, err <= threshold
            w = best_inl.sum() / n
            if w >= 1.0:
                need = 0
            elif w > 0:
                need = int(np.ceil(np.log(1 - confidence) / np.log(max(1 - w ** 8, 1e-300))))
    if best_inl.sum() < 8:
        return PoseResult(None, None, None, False)
    # the least-squares refit on the inliers competes with the minimal-sample model
    refit = eight_point(x1[best_inl], x2[best_inl])
    E = min((best_E, refit), key=lambda m: _consensus_cost(m, x1, x2, threshold))
    inl = sampson(E, x1, x2) <= threshold
    if inl.sum() < 8:
        E, inl = best_E, best_inl
    R, t, _ = decompose(E, x1[inl], x2[inl])
    return PoseResult(R, t, inl, True)


def _consensus_cost(E, x1, x2, threshold):
    return float(np.sum(np.minimum(sampson(E, x1, x2), threshold)))


def rotation_error_deg(R_est, R_gt):
    c = (np.trace(R_est @ R_gt.T) - 1) / 2
    return float(np.degrees(np.arccos(np.clip(c, -1, 1))))


def translation_error_deg(t_est, t_gt):
    a = t_est / np.linalg.norm(t_est)
    b = t_gt / np.linalg.norm(t_gt)
    return float(np.degrees(np.arccos(np.clip(a @ b, -1, 1))))


def relative_pose(pose_a: G.Pose, pose_b: G.Pose):
    """Ground-truth (R, t) taking A-camera coordinates to B-camera coordinates."""
    R = pose_b.R @ pose_a.R.T
    return R, pose_b.t - R @ pose_a.t


def pose_error_deg(res: PoseResult, R_gt, t_gt):
    if not res.success:
        return np.inf
    return max(rotation_error_deg(res.R, R_gt), translation_error_deg(res.t, t_gt))


def pose_auc(errors, thresholds=AUC_THRESHOLDS):
    """Area under the cumulative error curve on [0, theta], divided by theta.

    The empirical curve is a step function, whose exact integral is
    mean(max(0, 1 - e / theta)); failures (inf) contribute nothing.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise MetricError("no pose errors")
    e = np.where(np.isnan(e), np.inf, e)
    return {float(th): float(np.mean(np.clip(1.0 - e / th, 0.0, None))) for th in thresholds}


# ---------------------------------------------------------------------------
# Stereo pair evaluation
# ---------------------------------------------------------------------------

@dataclass
class MatchReport:
    pair: str
    matches: list                        # [idx_a, idx_b, distance]
    correct: list                        # bool per match
    n_correct: int
    n_putative: int
    n_ground_truth: int
    n_features: int
    precision: float | None
    recall: float | None
    accuracy: float | None
    R: list | None = None
    t: list | None = None
    pose_error_deg: float = float("inf")
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["pose_error_deg"] = None if not np.isfinite(self.pose_error_deg) else self.pose_error_deg
        return d


def evaluate_pair(kps_a, kps_b, desc_a, desc_b, scene, view_a, view_b, metric="euclidean",
                  seed=0, radius=C.MATCH_RADIUS, name=None):
    """Match two views, score the matches against depth/pose ground truth,
    and estimate the relative pose from the putative matches."""
    m = match_descriptors(desc_a, desc_b, metric)
    xa = np.array([k.x for k in kps_a])
    ya = np.array([k.y for k in kps_a])
    xb = np.array([k.x for k in kps_b])
    yb = np.array([k.y for k in kps_b])
    K_a, K_b = scene.intrinsics[view_a], scene.intrinsics[view_b]
    tr = G.project_keypoints(xa, ya, scene.depths[view_a], scene.poses[view_a],
                             scene.poses[view_b], K_a, K_b, scene.depths[view_b])
    err = np.hypot(tr.x[m.idx_a] - xb[m.idx_b], tr.y[m.idx_a] - yb[m.idx_b])
    correct = tr.valid[m.idx_a] & (err <= radius)
    gt = C.build_correspondences(kps_a, kps_b, scene, view_a, view_b, radius)
    has_gt = np.zeros(len(kps_a), bool)
    has_gt[gt.idx_a] = True
    matched = np.zeros(len(kps_a), bool)
    matched[m.idx_a] = True
    nonmatch_ok = int(np.sum(~matched & ~has_gt))
    met = stereo_metrics(int(correct.sum()), len(m), len(gt), nonmatch_ok, len(kps_a))

    pose = estimate_relative_pose(np.column_stack([xa[m.idx_a], ya[m.idx_a]]),
                                  np.column_stack([xb[m.idx_b], yb[m.idx_b]]), K_a, K_b, seed)
    R_gt, t_gt = relative_pose(scene.poses[view_a], scene.poses[view_b])
    perr = pose_error_deg(pose, R_gt, t_gt)
    return MatchReport(name or f"{view_a}-{view_b}",
                       [[int(a), int(b), float(d)] for a, b, d in zip(m.idx_a, m.idx_b, m.dist)],
                       correct.tolist(), int(correct.sum()), len(m), len(gt), len(kps_a),
                       met["precision"], met["recall"], met["accuracy"],
                       None if pose.R is None else pose.R.tolist(),
                       None if pose.t is None else pose.t.tolist(), perr)


def aggregate(reports, thresholds=AUC_THRESHOLDS):
    """Table-style summary: mean #matches, P, R, A and pose AUCs."""
    def mean(key):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        return float(np.mean(vals)) if vals else None

    auc = pose_auc([r.pose_error_deg for r in reports], thresholds) if reports else {}
    out = {"pairs": len(reports), "matches": mean("n_putative"), "precision": mean("precision"),
           "recall": mean("recall"), "accuracy": mean("accuracy")}
    for th, v in auc.items():
        out[f"auc@{th:g}"] = v
    return out


def write_report(path, reports, extra=None):
    doc = {"pairs": [r.to_dict() for r in reports], "aggregate": aggregate(reports),
           **(extra or {})}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
    return doc
