"""Patch archive (``DPAT``) and the training batch sampler.

File layout, little endian::

    b"DPAT"  u16 version  u32 n_patches  u32 n_pairs  u32 meta_len
    meta (UTF-8 JSON, meta_len bytes)
    patches  n_patches * 32 * 32 u8
    pairs    n_pairs * PAIR_DTYPE
    blake2b-8 digest of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bindesc.tensor import normalize_patches

MAGIC = b"DPAT"
VERSION = 1
PATCH = 32
_HEADER = struct.Struct("<4sHIII")
_DIGEST = 8

SPLITS = ("train", "test")

PAIR_DTYPE = np.dtype([
    ("patch_a", "<u4"), ("patch_b", "<u4"), ("scene", "<u4"), ("view_a", "<u2"),
    ("view_b", "<u2"), ("xa", "<f4"), ("ya", "<f4"), ("xb", "<f4"), ("yb", "<f4"),
    ("eta_a", "<f4"), ("eta_b", "<f4"), ("gt_ratio", "<f4"), ("est_ratio", "<f4"),
    ("residual", "<f4"), ("angle", "<f4"), ("point", "<u4"), ("split", "u1"),
])


class ArchiveError(ValueError):
    pass


@dataclass
class PatchArchive:
    patches: np.ndarray                   # (N, 32, 32) uint8
    pairs: np.ndarray                     # PAIR_DTYPE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.patches = np.ascontiguousarray(self.patches, dtype=np.uint8)
        self.pairs = np.ascontiguousarray(self.pairs, dtype=PAIR_DTYPE)
        if self.patches.ndim != 3 or self.patches.shape[1:] != (PATCH, PATCH):
            raise ArchiveError(f"patches must be (N, {PATCH}, {PATCH}), got {self.patches.shape}")
        n = len(self.patches)
        if len(self.pairs) and (self.pairs["patch_a"].max() >= n or self.pairs["patch_b"].max() >= n):
            raise ArchiveError("pair references a missing patch")

    def split_indices(self, split):
        code = SPLITS.index(split) if isinstance(split, str) else int(split)
        return np.flatnonzero(self.pairs["split"] == code)

    def pair_patches(self, idx, normalize=True):
        """(A, B) patch stacks for pair indices; normalized float32 (n,1,32,32)."""
        p = self.pairs[np.asarray(idx)]
        a, b = self.patches[p["patch_a"]], self.patches[p["patch_b"]]
        if normalize:
            return normalize_patches(a), normalize_patches(b)
        return a, b

    def validate(self, radius=3.0, scale_tol=0.25, max_angle=60.0):
        """Re-check the construction constraints; raises ArchiveError."""
        p = self.pairs
        if len(p) == 0:
            return
        if np.any(p["residual"] > radius + 1e-4):
            raise ArchiveError("pair beyond the reprojection radius")
        if np.any(p["angle"] > max_angle + 1e-4):
            raise ArchiveError("pair beyond the perspective limit")
        r = p["est_ratio"].astype(np.float64) / p["gt_ratio"]
        if np.any(np.minimum(np.abs(r - 1), np.abs(1 / r - 1)) > scale_tol + 1e-4):
            raise ArchiveError("pair violates the scale filter")
        for code in np.unique(p["split"]):
            pts = p["point"][p["split"] == code]
            if len(np.unique(pts)) != len(pts):
                raise ArchiveError("a 3D point appears in more than one pair of a split")
        used = np.concatenate([p["patch_a"], p["patch_b"]])
        if len(np.unique(used)) != len(used):
            raise ArchiveError("a patch is shared between pairs")


def _encode(ar: PatchArchive):
    meta = json.dumps(ar.meta, sort_keys=True).encode()
    body = (_HEADER.pack(MAGIC, VERSION, len(ar.patches), len(ar.pairs), len(meta)) + meta
            + ar.patches.tobytes() + ar.pairs.tobytes())
    return body + hashlib.blake2b(body, digest_size=_DIGEST).digest()


def archive_write(path, ar: PatchArchive):
    raw = _encode(ar)
    Path(path).write_bytes(raw)
    return hashlib.blake2b(raw, digest_size=16).hexdigest()


def archive_read(path, validate=True):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + _DIGEST:
        raise ArchiveError(f"{path}: truncated header")
    magic, version, n_patch, n_pair, n_meta = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ArchiveError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported version {version}")
    expect = _HEADER.size + n_meta + n_patch * PATCH * PATCH + n_pair * PAIR_DTYPE.itemsize
    if len(raw) != expect + _DIGEST:
        raise ArchiveError(f"{path}: expected {expect + _DIGEST} bytes, found {len(raw)}")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.blake2b(body, digest_size=_DIGEST).digest() != digest:
        raise ArchiveError(f"{path}: checksum mismatch")
    off = _HEADER.size
    meta = json.loads(body[off:off + n_meta].decode())
    off += n_meta
    patches = np.frombuffer(body, np.uint8, n_patch * PATCH * PATCH, off).reshape(-1, PATCH, PATCH)
    off += patches.nbytes
    pairs = np.frombuffer(body, PAIR_DTYPE, n_pair, off)
    ar = PatchArchive(patches.copy(), pairs.copy(), meta)
    if validate:
        ar.validate()
    return ar


def archive_checksum(path):
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=16).hexdigest()


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

class BatchSampler:
    """Epoch-wise shuffled batches of ``batch_pairs`` pairs from one split.

    Each epoch is a fresh permutation drawn from ``default_rng([seed,
    epoch])``; a trailing partial batch is dropped.  Because a 3D point is
    stored in at most one pair per split, no batch holds two observations
    of the same point.
    """

    def __init__(self, archive: PatchArchive, split="train", batch_pairs=512, seed=0):
        self.archive = archive
        self.indices = archive.split_indices(split)
        self.batch_pairs = int(batch_pairs)
        self.seed = int(seed)
        if len(self.indices) < self.batch_pairs:
            raise ArchiveError(f"split {split!r} has {len(self.indices)} pairs, "
                               f"fewer than one batch of {self.batch_pairs}")

    def __len__(self):
        return len(self.indices) // self.batch_pairs

    def epoch(self, epoch):
        rng = np.random.default_rng([self.seed, int(epoch)])
        order = self.indices[rng.permutation(len(self.indices))]
        for b in range(len(self)):
            yield order[b * self.batch_pairs:(b + 1) * self.batch_pairs]


def sample_batch(archive: PatchArchive, rng, n_pairs=512, split="train"):
    """One batch: (A patches, B patches, pair indices) with 2 * n_pairs patches."""
    idx = archive.split_indices(split)
    if len(idx) < n_pairs:
        raise ArchiveError(f"only {len(idx)} pairs available, {n_pairs} requested")
    chosen = np.sort(rng.choice(idx, n_pairs, replace=False))
    a, b = archive.pair_patches(chosen)
    return a, b, chosen
