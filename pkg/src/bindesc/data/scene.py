"""Multi-view scenes: a procedural generator and an on-disk layout.

Two generators are provided.  ``planar`` textures the plane z = 0 with
1/f noise and renders it exactly through the pinhole model.
``heightfield`` raycasts a cratered random terrain z = H(x, y) with
Lambertian shading.  Planar scenes carry the same crater relief painted on
as fixed shading.  Both return per-pixel camera depth.

Directory layout (one scene per directory)::

    poses.json       {"images": [{"file", "depth", "q": [w,x,y,z],
                                  "t": [x,y,z], "intrinsics": {...}}, ...]}
    <name>.pgm|png   8- or 16-bit grayscale
    <name>.depth     b"DPTH", u32 width, u32 height, f32 sentinel, f32 LE raster
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from bindesc.data.geometry import Intrinsics, Pose, look_at

DEPTH_MAGIC = b"DPTH"
DEPTH_SENTINEL = -1.0
_DEPTH_HEADER = struct.Struct("<4sIIf")


@dataclass
class MultiViewScene:
    images: list            # float64 rasters in [0, 1]
    intrinsics: list
    poses: list
    depths: list            # camera-Z; DEPTH_SENTINEL where invalid
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.intrinsics) == len(self.poses) == len(self.depths) == n):
            raise ValueError("per-view lists differ in length")
        for img, d in zip(self.images, self.depths):
            if img.shape != d.shape:
                raise ValueError(f"image {img.shape} and depth {d.shape} extents differ")

    @property
    def n_views(self):
        return len(self.images)


# ---------------------------------------------------------------------------
# Procedural fields
# ---------------------------------------------------------------------------

class PeriodicField:
    """Raster over a square world tile of side ``extent``, tiled periodically
    and sampled bilinearly."""

    def __init__(self, values, extent):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.extent = float(extent)
        self.cells = self.values.shape[0]

    def __call__(self, x, y):
        u = np.asarray(x, dtype=np.float64) * (self.cells / self.extent)
        v = np.asarray(y, dtype=np.float64) * (self.cells / self.extent)
        return ndimage.map_coordinates(self.values, [v.ravel(), u.ravel()], order=1,
                                       mode="grid-wrap").reshape(np.shape(u))

    def gradient(self):
        step = self.extent / self.cells
        gy, gx = np.gradient(np.pad(self.values, 1, mode="wrap"), step)
        return (PeriodicField(gx[1:-1, 1:-1], self.extent),
                PeriodicField(gy[1:-1, 1:-1], self.extent))


def spectral_noise(rng, cells, beta, cutoff=0.5):
    """Zero-mean unit-std periodic noise with power spectrum ~ 1/f^beta."""
    f = np.fft.fftfreq(cells)
    fr = np.sqrt(f[:, None] ** 2 + np.fft.rfftfreq(cells)[None, :] ** 2)
    amp = np.zeros_like(fr)
    nz = (fr > 0) & (fr <= cutoff)
    amp[nz] = fr[nz] ** (-beta / 2)
    spec = amp * (rng.standard_normal(fr.shape) + 1j * rng.standard_normal(fr.shape))
    out = np.fft.irfft2(spec, s=(cells, cells))
    return (out - out.mean()) / out.std()


def crater_field(rng, cells, extent, n, r_min, r_max):
    """Sum of bowl-with-rim profiles at random sites (periodic)."""
    out = np.zeros((cells, cells))
    step = extent / cells
    radii = r_min * (r_max / r_min) ** rng.random(n) ** 2  # many small, few large
    centers = rng.uniform(0, extent, (n, 2))
    for (cx, cy), r in zip(centers, radii):
        half = int(np.ceil(1.6 * r / step))
        ix = np.arange(int(cx / step) - half, int(cx / step) + half + 1)
        iy = np.arange(int(cy / step) - half, int(cy / step) + half + 1)
        dx = ix * step - cx
        dy = iy * step - cy
        rho = np.sqrt(dx[None, :] ** 2 + dy[:, None] ** 2) / r
        bowl = np.where(rho < 1, rho ** 2 - 1, 0.0) * 0.25
        rim = 0.12 * np.exp(-((rho - 1) / 0.25) ** 2)
        out[np.ix_(iy % cells, ix % cells)] += r * (bowl + rim)
    return out


def _rays(K: Intrinsics, pose: Pose, h, w, ss=1):
    # world-frame ray directions for each (sub)pixel
    off = (np.arange(ss) + 0.5) / ss - 0.5
    ys = (np.arange(h)[:, None] + off[None, :]).ravel()
    xs = (np.arange(w)[:, None] + off[None, :]).ravel()
    X, Y = np.meshgrid(xs, ys)
    d_cam = np.stack([(X - K.cx) / K.fx, (Y - K.cy) / K.fy, np.ones_like(X)], axis=-1)
    return d_cam @ pose.R  # rows: R^T d


def _downsample(a, ss):
    if ss == 1:
        return a
    h, w = a.shape[0] // ss, a.shape[1] // ss
    return a.reshape(h, ss, w, ss).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

@dataclass
class SceneConfig:
    size: int = 256
    n_views: int = 3
    focal: float = 280.0
    altitude: float = 10.0
    altitude_jitter: float = 0.2      # relative
    max_tilt_deg: float = 20.0
    max_heading_deg: float = 12.0
    max_offset: float = 1.5           # look-at target offset on the ground
    relief: float = 0.15              # smooth terrain amplitude (world units)
    n_craters: int = 900
    light_jitter_deg: float = 8.0
    supersample: int = 2


def synth_scene(seed, mode="planar", cfg: SceneConfig | None = None, light=None):
    """Deterministic multi-view scene for ``seed``.

    ``light`` overrides the scene's light direction (unit vector pointing
    towards the light); geometry depends on ``seed`` alone.
    """
    cfg = cfg or SceneConfig()
    if mode not in ("planar", "heightfield"):
        raise ValueError(f"unknown scene mode {mode!r}")
    rng = np.random.default_rng([int(seed), 0 if mode == "planar" else 1])
    geo_rng, cam_rng, light_rng = (np.random.default_rng(s) for s in rng.spawn(3))

    extent, cells = 32.0, 2048
    albedo = PeriodicField(spectral_noise(geo_rng, cells, beta=2.0), extent)
    terrain = (cfg.relief * spectral_noise(geo_rng, cells // 4, beta=4.0)).repeat(4, 0).repeat(4, 1)
    terrain = ndimage.uniform_filter(terrain, 4, mode="wrap")
    terrain += crater_field(geo_rng, cells, extent, cfg.n_craters, 0.08, 1.2)
    height = PeriodicField(terrain, extent)
    contrast = float(geo_rng.uniform(0.10, 0.16))

    K = Intrinsics(cfg.focal, cfg.focal, (cfg.size - 1) / 2, (cfg.size - 1) / 2)
    heading0 = cam_rng.uniform(0, 2 * np.pi)
    poses = []
    for _ in range(cfg.n_views):
        alt = cfg.altitude * (1 + cam_rng.uniform(-cfg.altitude_jitter, cfg.altitude_jitter))
        tilt = np.radians(cam_rng.uniform(0, cfg.max_tilt_deg))
        az = cam_rng.uniform(0, 2 * np.pi)
        target = np.append(cam_rng.uniform(-cfg.max_offset, cfg.max_offset, 2), 0.0)
        center = target + alt * np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az),
                                          np.cos(tilt)])
        heading = heading0 + np.radians(cam_rng.uniform(-cfg.max_heading_deg, cfg.max_heading_deg))
        poses.append(look_at(center, target, heading))

    elev = np.radians(light_rng.uniform(35, 65))
    azl = light_rng.uniform(0, 2 * np.pi)
    base_light = np.array([np.cos(elev) * np.cos(azl), np.cos(elev) * np.sin(azl), np.sin(elev)])

    images, depths = [], []
    for pose in poses:
        if light is not None:
            lv = np.asarray(light, dtype=np.float64)
        else:
            lv = _jitter(base_light, np.radians(cfg.light_jitter_deg), light_rng)
        if mode == "planar":
            img, dep = _render_planar(albedo, height, contrast, K, pose, cfg, base_light)
        else:
            img, dep = _render_heightfield(albedo, height, contrast, K, pose, cfg, lv)
        images.append(img)
        depths.append(dep)
    meta = {"seed": int(seed), "mode": mode, "relief": cfg.relief if mode == "heightfield" else 0.0}
    return MultiViewScene(images, [K] * cfg.n_views, poses, depths, meta)


def _jitter(v, max_angle, rng):
    axis = np.cross(v, rng.standard_normal(3))
    axis /= np.linalg.norm(axis)
    a = rng.uniform(0, max_angle)
    # Rodrigues
    return v * np.cos(a) + np.cross(axis, v) * np.sin(a) + axis * (axis @ v) * (1 - np.cos(a))


def _to_unit(tex, contrast):
    return np.clip(0.5 + contrast * tex, 0.0, 1.0)


def _shade(height, light):
    # baked Lambertian shading of a height raster
    gx, gy = height.gradient()
    nrm = np.stack([-gx.values, -gy.values, np.ones_like(gx.values)], axis=-1)
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    return PeriodicField(np.maximum(nrm @ light, 0.0), height.extent)


def _render_planar(albedo, height, contrast, K, pose, cfg, light):
    # the crater relief is painted onto the plane as a fixed shading pattern
    C = pose.center
    ss = cfg.supersample
    d = _rays(K, pose, cfg.size, cfg.size, ss)
    s = -C[2] / d[..., 2]
    X = C[0] + s * d[..., 0]
    Y = C[1] + s * d[..., 1]
    shade = _shade(height, light)
    img = _downsample(np.clip(_to_unit(albedo(X, Y), contrast) * (0.35 + 0.9 * shade(X, Y)),
                              0, 1), ss)
    dr = _rays(K, pose, cfg.size, cfg.size, 1)
    # camera-frame rays have unit z, so the hit parameter is the camera depth
    return img, -C[2] / dr[..., 2]


def _raycast(height, C, d, n_steps=64, n_bisect=22):
    """First crossing of each ray with the terrain.

    Rays are marched through the slab between the raster's extreme heights
    and the bracketing step is bisected.  Returns NaN for rays that never
    cross (none do for downward-looking cameras).
    """
    lo, hi = float(height.values.min()), float(height.values.max())
    s0 = (hi - C[2]) / d[..., 2]
    s1 = (lo - C[2]) / d[..., 2]
    a = s0.copy()
    b = np.full(s0.shape, np.nan)
    open_ = np.ones(s0.shape, bool)
    for i in range(1, n_steps + 1):
        s = s0 + (s1 - s0) * (i / n_steps)
        below = C[2] + s * d[..., 2] <= height(C[0] + s * d[..., 0], C[1] + s * d[..., 1])
        hit = below & open_
        b[hit] = s[hit]
        open_ &= ~below
        a = np.where(open_, s, a)
    b = np.where(np.isnan(b), s1, b)
    for _ in range(n_bisect):
        m = 0.5 * (a + b)
        below = C[2] + m * d[..., 2] <= height(C[0] + m * d[..., 0], C[1] + m * d[..., 1])
        b = np.where(below, m, b)
        a = np.where(below, a, m)
    return 0.5 * (a + b)


def _render_heightfield(albedo, height, contrast, K, pose, cfg, light):
    C = pose.center
    ss = cfg.supersample
    d = _rays(K, pose, cfg.size, cfg.size, ss)
    s = _raycast(height, C, d)
    X = C[0] + s * d[..., 0]
    Y = C[1] + s * d[..., 1]
    shade = _shade(height, light)
    img = _downsample(np.clip(_to_unit(albedo(X, Y), contrast) * (0.35 + 0.9 * shade(X, Y)),
                              0, 1), ss)
    dr = _rays(K, pose, cfg.size, cfg.size, 1)
    return img, _raycast(height, C, dr)


# ---------------------------------------------------------------------------
# Disk layout
# ---------------------------------------------------------------------------

def write_depth(path, depth, sentinel=DEPTH_SENTINEL):
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    d = np.where(np.isfinite(depth) & (depth > 0), depth, np.float32(sentinel)).astype("<f4")
    with open(path, "wb") as f:
        f.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, sentinel))
        f.write(d.tobytes())


def read_depth(path):
    raw = Path(path).read_bytes()
    if len(raw) < _DEPTH_HEADER.size:
        raise ValueError(f"{path}: truncated depth header")
    magic, w, h, sentinel = _DEPTH_HEADER.unpack_from(raw)
    if magic != DEPTH_MAGIC:
        raise ValueError(f"{path}: bad depth magic {magic!r}")
    body = raw[_DEPTH_HEADER.size:]
    if len(body) != 4 * w * h:
        raise ValueError(f"{path}: expected {w}x{h} floats, got {len(body)} bytes")
    d = np.frombuffer(body, "<f4").reshape(h, w).astype(np.float64)
    return np.where(d == np.float32(sentinel), DEPTH_SENTINEL, d)


def read_image(path):
    """8/16-bit grayscale PGM or PNG -> float64 in [0, 1]."""
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.ndim == 3:
        raise ValueError(f"{path}: expected a single-channel image")
    scale = 65535.0 if a.dtype == np.uint16 or a.max(initial=0) > 255 else 255.0
    return a.astype(np.float64) / scale


def write_image(path, img, bits=8):
    img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    if bits == 8:
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)
    elif bits == 16:
        Image.fromarray(np.round(img * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def save_scene(scene: MultiViewScene, directory, fmt="pgm"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, K, pose, dep) in enumerate(zip(scene.images, scene.intrinsics, scene.poses,
                                                scene.depths)):
        name = f"view{i:03d}"
        write_image(directory / f"{name}.{fmt}", img)
        write_depth(directory / f"{name}.depth", dep)
        entries.append({"file": f"{name}.{fmt}", "depth": f"{name}.depth", **pose.to_dict(),
                        "intrinsics": K.to_dict()})
    doc = {"convention": "world-to-camera, quaternion wxyz, depth = camera z",
           "meta": scene.meta, "images": entries}
    (directory / "poses.json").write_text(json.dumps(doc, indent=1))


def load_scene(directory):
    directory = Path(directory)
    doc = json.loads((directory / "poses.json").read_text())
    images, Ks, poses, depths = [], [], [], []
    for e in doc["images"]:
        images.append(read_image(directory / e["file"]))
        depths.append(read_depth(directory / e["depth"]))
        Ks.append(Intrinsics(**e["intrinsics"]))
        q = np.asarray(e["q"], dtype=np.float64)
        poses.append(Pose(q / np.linalg.norm(q), e["t"]))
    return MultiViewScene(images, Ks, poses, depths, doc.get("meta", {}))
