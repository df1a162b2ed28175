"""Scenes -> detections -> filtered correspondences -> patch archive."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from bindesc import detect as D
from bindesc.data import archive as A
from bindesc.data import correspond as C
from bindesc.data import geometry as G
from bindesc.data import patches as P
from bindesc.data.scene import SceneConfig, synth_scene


@dataclass
class GenConfig:
    n_scenes: int = 60
    modes: tuple = ("planar", "heightfield")
    seed: int = 0
    test_fraction: float = 0.2
    image_size: int = 384
    detector: dict = field(default_factory=lambda: {"contrast": 0.01, "max_keypoints": 2000})
    max_angle: float = 60.0
    radius: float = C.MATCH_RADIUS
    scale_tol: float = C.SCALE_TOL
    max_fill: float = P.MAX_FILL

    def scene_plan(self):
        """(scene id, seed, mode, split) for every scene.

        Test scenes are a deterministic subset so no 3D point crosses splits.
        """
        rng = np.random.default_rng([self.seed, 1])
        n_test = int(round(self.test_fraction * self.n_scenes))
        test = set(rng.permutation(self.n_scenes)[:n_test].tolist()) if n_test else set()
        return [(i, self.seed * 100003 + i, self.modes[i % len(self.modes)],
                 "test" if i in test else "train") for i in range(self.n_scenes)]


def _new_stats():
    keys = ("view_pairs", "rejected_perspective", "candidates", "rejected_view", "rejected_3px",
            "rejected_bijective", "rejected_scale", "rejected_fill", "rejected_duplicate", "pairs")
    return dict.fromkeys(keys, 0)


def scene_pairs(scene, kps, split_code, scene_id, cfg: GenConfig, stats):
    """All surviving pairs of one scene as (pair records, patch list)."""
    rng = np.random.default_rng([cfg.seed, scene_id, 7])
    used = [np.zeros(len(k), bool) for k in kps]
    points = []
    records, patches = [], []
    for va, vb in itertools.combinations(range(scene.n_views), 2):
        stats["view_pairs"] += 1
        angle = G.rotation_angle_deg(scene.poses[va].q, scene.poses[vb].q)
        if angle > cfg.max_angle:
            stats["rejected_perspective"] += 1
            continue
        corr = C.build_correspondences(kps[va], kps[vb], scene, va, vb, cfg.radius)
        stats["candidates"] += len(kps[va])
        for key in ("rejected_view", "rejected_3px", "rejected_bijective"):
            stats[key] += corr.stats.get(key, 0)
        corr = C.scale_filter(corr, rng, cfg.scale_tol)
        stats["rejected_scale"] += corr.stats["rejected_scale"]
        if len(corr) == 0:
            continue
        ka = [kps[va][i] for i in corr.idx_a]
        kb = [kps[vb][i] for i in corr.idx_b]
        pa, _ = P.extract_patches(scene.images[va], [k.x for k in ka], [k.y for k in ka],
                                  [P.window_side(k.eta, "dog") for k in ka], max_fill=cfg.max_fill)
        pb, _ = P.extract_patches(scene.images[vb], [k.x for k in kb], [k.y for k in kb],
                                  [P.window_side(k.eta, "dog") for k in kb], max_fill=cfg.max_fill)
        # a 3D point is kept once: no keypoint is reused, and a pair whose
        # world point lies within the match radius of an earlier one is dropped
        for j in range(len(corr)):
            ia, ib = corr.idx_a[j], corr.idx_b[j]
            if pa[j] is None or pb[j] is None:
                stats["rejected_fill"] += 1
                continue
            w = corr.world[j]
            dup = used[va][ia] or used[vb][ib]
            if not dup and points:
                r = _world_radius(scene, va, ka[j], cfg)
                dup = bool(np.any(np.linalg.norm(np.asarray(points) - w, axis=1) <= r))
            if dup:
                stats["rejected_duplicate"] += 1
                continue
            used[va][ia] = used[vb][ib] = True
            points.append(w)
            records.append({
                "scene": scene_id, "view_a": va, "view_b": vb, "xa": ka[j].x, "ya": ka[j].y,
                "xb": kb[j].x, "yb": kb[j].y, "eta_a": ka[j].eta, "eta_b": kb[j].eta,
                "gt_ratio": corr.gt_ratio[j], "est_ratio": corr.est_ratio[j],
                "residual": corr.residual[j], "angle": angle, "split": split_code})
            patches.append((P.to_uint8(pa[j]), P.to_uint8(pb[j])))
    stats["pairs"] += len(records)
    return records, patches


def _world_radius(scene, view, kp, cfg):
    # the match radius expressed on the ground at this keypoint
    K = scene.intrinsics[view]
    d = G.bilinear_sample(scene.depths[view], kp.x, kp.y)
    return cfg.radius * float(d) / K.fx if np.isfinite(d) else 0.0


def generate_archive(cfg: GenConfig, progress=None):
    """Build the archive described by ``cfg``; returns (PatchArchive, stats)."""
    det_cfg = D.DetectorConfig(**cfg.detector)
    scene_cfg = SceneConfig(size=cfg.image_size)
    stats = _new_stats()
    all_records, all_patches = [], []
    for scene_id, seed, mode, split in cfg.scene_plan():
        scene = synth_scene(seed, mode, scene_cfg)
        kps = [D.dog_detect(img, det_cfg) for img in scene.images]
        recs, pats = scene_pairs(scene, kps, A.SPLITS.index(split), scene_id, cfg, stats)
        all_records += recs
        all_patches += pats
        if progress:
            progress(scene_id, len(all_records))
    pairs = np.zeros(len(all_records), A.PAIR_DTYPE)
    for i, r in enumerate(all_records):
        for k in A.PAIR_DTYPE.names:
            if k in r:
                pairs[i][k] = r[k]
        pairs[i]["patch_a"] = 2 * i
        pairs[i]["patch_b"] = 2 * i + 1
        pairs[i]["point"] = i
    patches = (np.stack([p for ab in all_patches for p in ab]) if all_patches
               else np.zeros((0, A.PATCH, A.PATCH), np.uint8))
    meta = {"generator": asdict(cfg), "stats": stats, "splits": list(A.SPLITS),
            "pose_convention": "world-to-camera, quaternion wxyz"}
    meta["generator"]["modes"] = list(cfg.modes)
    return A.PatchArchive(patches, pairs, meta), stats


def cached_archive(cfg: GenConfig, progress=None):
    """Path of the archive for ``cfg`` in the cache, generating it on a miss."""
    from bindesc.cache import cached_path

    key = asdict(cfg)
    key["modes"] = list(cfg.modes)
    path = cached_path("archives", key, ".dpat")
    if not path.exists():
        ar, _ = generate_archive(cfg, progress)
        tmp = path.with_suffix(".tmp")
        A.archive_write(tmp, ar)
        tmp.replace(path)
    return path
