"""Ground-truth keypoint correspondences between two views of a scene."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from bindesc.data import geometry as G

MATCH_RADIUS = 3.0
SCALE_TOL = 0.25


@dataclass
class CorrespondenceSet:
    idx_a: np.ndarray
    idx_b: np.ndarray
    residual: np.ndarray      # px between projected A keypoint and its B match
    gt_ratio: np.ndarray      # gsd_A / gsd_B: expected eta_B / eta_A
    est_ratio: np.ndarray     # eta_B / eta_A
    world: np.ndarray         # (n, 3) world point of the A keypoint
    stats: dict

    def __len__(self):
        return len(self.idx_a)

    def subset(self, keep):
        keep = np.asarray(keep)
        return CorrespondenceSet(self.idx_a[keep], self.idx_b[keep], self.residual[keep],
                                 self.gt_ratio[keep], self.est_ratio[keep], self.world[keep],
                                 dict(self.stats))


def _xy_eta(kps):
    if len(kps) == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    if hasattr(kps, "x"):  # structured arrays / KeypointSet
        return np.asarray(kps.x, float), np.asarray(kps.y, float), np.asarray(kps.eta, float)
    return (np.array([k.x for k in kps], float), np.array([k.y for k in kps], float),
            np.array([k.eta for k in kps], float))


def build_correspondences(kps_a, kps_b, scene, view_a, view_b, radius=MATCH_RADIUS,
                          occlusion_tol=G.OCCLUSION_TOL):
    """Match A keypoints to B keypoints through depth + pose, one-to-one.

    Each A keypoint is transferred into B and paired with the nearest B
    keypoint within ``radius`` px.  When several A keypoints claim the same
    B keypoint only the one with the smallest residual survives (ties go to
    the lower A index), which makes the result a partial bijection.
    """
    xa, ya, eta_a = _xy_eta(kps_a)
    xb, yb, eta_b = _xy_eta(kps_b)
    K_a, K_b = scene.intrinsics[view_a], scene.intrinsics[view_b]
    stats = {"keypoints_a": len(xa), "keypoints_b": len(xb)}
    empty = CorrespondenceSet(*(np.zeros(0, int),) * 2, *(np.zeros(0),) * 3, np.zeros((0, 3)),
                              stats)
    if len(xa) == 0 or len(xb) == 0:
        stats.update(projected=0, rejected_3px=0, rejected_bijective=0)
        return empty
    tr = G.project_keypoints(xa, ya, scene.depths[view_a], scene.poses[view_a],
                             scene.poses[view_b], K_a, K_b, scene.depths[view_b], occlusion_tol)
    stats["projected"] = int(tr.valid.sum())
    stats["rejected_view"] = int((~tr.valid).sum())
    cand = np.flatnonzero(tr.valid)
    tree = cKDTree(np.stack([xb, yb], axis=1))
    dist, nn = tree.query(np.stack([tr.x[cand], tr.y[cand]], axis=1))
    near = dist <= radius
    stats["rejected_3px"] = int((~near).sum())
    cand, dist, nn = cand[near], dist[near], nn[near]

    # one A keypoint per B keypoint: smallest residual, then lowest A index
    order = np.lexsort((cand, dist, nn))
    first = np.ones(len(order), bool)
    first[1:] = nn[order][1:] != nn[order][:-1]
    keep = np.sort(order[first])
    stats["rejected_bijective"] = int(len(cand) - len(keep))
    ia, ib, res = cand[keep], nn[keep], dist[keep]

    gsd_a = G.gsd(tr.depth_a[ia], K_a)
    gsd_b = G.gsd(tr.depth_b[ia], K_b)
    return CorrespondenceSet(ia, ib, res, gsd_a / gsd_b, eta_b[ib] / eta_a[ia], tr.world[ia],
                             stats)


def scale_consistent(gt_ratio, est_ratio, tol=SCALE_TOL):
    """True where the estimated relative scale is within ``tol`` of ground truth."""
    gt = np.asarray(gt_ratio, dtype=np.float64)
    est = np.asarray(est_ratio, dtype=np.float64)
    if np.any(~(gt > 0)) or not np.all(np.isfinite(gt)):
        raise ValueError("ground-truth scale ratio must be positive and finite")
    return np.abs(est / gt - 1.0) <= tol + 1e-12


def scale_filter(corr: CorrespondenceSet, rng, tol=SCALE_TOL):
    """Drop pairs whose detector scale disagrees with the GSD ratio.

    Ratios are taken relative to a reference patch picked at random per
    pair, so the tolerance applies to either est/gt or its reciprocal.
    """
    if len(corr) == 0:
        out = corr.subset(np.zeros(0, int))
        out.stats["rejected_scale"] = 0
        return out
    ref_b = rng.random(len(corr)) < 0.5
    gt = np.where(ref_b, 1.0 / corr.gt_ratio, corr.gt_ratio)
    est = np.where(ref_b, 1.0 / corr.est_ratio, corr.est_ratio)
    keep = scale_consistent(gt, est, tol)
    out = corr.subset(np.flatnonzero(keep))
    out.stats["rejected_scale"] = int((~keep).sum())
    return out
