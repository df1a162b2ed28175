"""Pinhole cameras, quaternion poses and keypoint transfer between views.

Conventions: poses map world to camera (X_c = R X_w + t), quaternions are
scalar-first (w, x, y, z), the camera looks along +Z, and pixel (0, 0) is the
centre of the top-left pixel.  Depth means camera-frame Z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

QUAT_TOL = 1e-9
OCCLUSION_TOL = 0.05


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass
class Pose:
    q: np.ndarray  # (w, x, y, z), world -> camera
    t: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        check_unit_quaternion(self.q)

    @classmethod
    def from_matrix(cls, R, t):
        x, y, z, w = Rotation.from_matrix(R).as_quat()
        q = np.array([w, x, y, z])
        return cls(q / np.linalg.norm(q), t)

    @property
    def R(self):
        w, x, y, z = self.q
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    @property
    def center(self):
        return -self.R.T @ self.t

    def to_dict(self):
        return {"q": self.q.tolist(), "t": self.t.tolist()}


def check_unit_quaternion(q):
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > QUAT_TOL:
        raise ValueError(f"quaternion norm {n!r} is not 1")


def rotation_angle_deg(qa, qb):
    """Angle of the rotation taking orientation qa to qb: 2 acos |<qa, qb>|."""
    check_unit_quaternion(qa)
    check_unit_quaternion(qb)
    c = min(1.0, abs(float(np.dot(qa, qb))))
    return float(np.degrees(2.0 * np.arccos(c)))


def perspective_filter(pose_a: Pose, pose_b: Pose, threshold_deg=60.0):
    """True when the pair is kept (relative rotation not above the threshold)."""
    return rotation_angle_deg(pose_a.q, pose_b.q) <= threshold_deg


def bilinear_sample(img, x, y):
    """Sample ``img`` at float coordinates; NaN outside [0, W-1] x [0, H-1]."""
    img = np.asarray(img, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w = img.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    v = (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x1] * fx * (1 - fy)
         + img[y1, x0] * (1 - fx) * fy + img[y1, x1] * fx * fy)
    return np.where(inside, v, np.nan)


def backproject(x, y, depth, K: Intrinsics, pose: Pose):
    """Pixel + camera depth -> world points (N, 3)."""
    x, y, depth = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (x, y, depth))
    pc = np.stack([(x - K.cx) / K.fx * depth, (y - K.cy) / K.fy * depth, depth], axis=1)
    return (pc - pose.t) @ pose.R  # R^T (pc - t)


def project(Xw, K: Intrinsics, pose: Pose):
    """World points -> (x, y, camera depth)."""
    pc = np.atleast_2d(Xw) @ pose.R.T + pose.t
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = K.fx * pc[:, 0] / z + K.cx
        y = K.fy * pc[:, 1] / z + K.cy
    return x, y, z


@dataclass
class Transfer:
    x: np.ndarray
    y: np.ndarray
    valid: np.ndarray        # projected inside B, in front, unoccluded
    world: np.ndarray        # (N, 3); NaN where A's depth was invalid
    depth_a: np.ndarray
    depth_b: np.ndarray      # camera-Z of the point in B
    reason: np.ndarray       # 0 ok, 1 invalid depth, 2 behind, 3 outside, 4 occluded


def project_keypoints(xa, ya, depth_a, pose_a: Pose, pose_b: Pose, K_a: Intrinsics,
                      K_b: Intrinsics, depth_b=None, occlusion_tol=OCCLUSION_TOL):
    """Transfer pixels of view A into view B through A's depth map.

    ``depth_a``/``depth_b`` are depth rasters (invalid entries non-positive
    or non-finite).  When ``depth_b`` is given, points whose depth disagrees
    with B's raster by more than ``occlusion_tol`` (relative) are rejected.
    """
    xa = np.atleast_1d(np.asarray(xa, dtype=np.float64))
    ya = np.atleast_1d(np.asarray(ya, dtype=np.float64))
    da = _sample_depth(depth_a, xa, ya)
    reason = np.zeros(len(xa), np.int8)
    reason[~(da > 0)] = 1
    Xw = backproject(xa, ya, np.where(reason == 0, da, 1.0), K_a, pose_a)
    Xw[reason != 0] = np.nan
    xb, yb, zb = project(Xw, K_b, pose_b)
    behind = (reason == 0) & ~(zb > 0)
    reason[behind] = 2
    h, w = depth_b.shape if depth_b is not None else (None, None)
    if depth_b is not None:
        outside = (reason == 0) & ~((xb >= 0) & (xb <= w - 1) & (yb >= 0) & (yb <= h - 1))
        reason[outside] = 3
        db = _sample_depth(depth_b, np.where(reason == 0, xb, 0), np.where(reason == 0, yb, 0))
        with np.errstate(invalid="ignore"):
            occluded = (reason == 0) & ~(np.abs(db - zb) <= occlusion_tol * zb)
        reason[occluded] = 4
    return Transfer(xb, yb, reason == 0, Xw, da, zb, reason)


def project_keypoint(kp, depth_a, pose_a, pose_b, K_a, K_b=None, depth_b=None):
    """Single-keypoint transfer; returns (x, y) in B or None when out of view."""
    K_b = K_b or K_a
    x, y = (kp.x, kp.y) if hasattr(kp, "x") else kp
    tr = project_keypoints([x], [y], depth_a, pose_a, pose_b, K_a, K_b, depth_b)
    if not tr.valid[0]:
        return None
    return float(tr.x[0]), float(tr.y[0])


def _sample_depth(depth, x, y):
    # invalid texels poison the bilinear mix so partial footprints are rejected
    d = np.asarray(depth, dtype=np.float64)
    d = np.where(np.isfinite(d) & (d > 0), d, np.nan)
    return bilinear_sample(d, x, y)


def gsd(depth, K: Intrinsics):
    """Ground sample distance of a pixel at camera depth ``depth``."""
    f = 0.5 * (K.fx + K.fy)
    if f <= 0:
        raise ValueError("focal length must be positive")
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise ValueError("GSD needs positive depth")
    return depth / f


def look_at(center, target, heading):
    """World->camera pose for a camera at ``center`` looking at ``target``.

    ``heading`` (radians) picks the image x axis as the ground direction
    (cos h, sin h, 0) projected orthogonally to the viewing ray.
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    a = np.array([np.cos(heading), np.sin(heading), 0.0])
    x = a - (a @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose.from_matrix(R, -R @ center)
