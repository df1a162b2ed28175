"""Training objective: hybrid triplet with hardest-in-batch negatives, SOS
regularizer and the descriptor-norm consistency term.

All pair-wise work runs on the stacked matrix ``B = [d; d']`` of shape
(2n, D): rows ``0..n-1`` are the set J and rows ``n..2n-1`` the set J', row
``k`` corresponding to row ``n + k``.  Gradients are analytic with the mining
and neighbourhood selections held fixed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from bindesc import binquant as bq
from bindesc.tensor import DimensionError

DIST_EPS = 1e-12


@dataclass
class LossConfig:
    m: float = 1.2
    alpha: float = 2.0
    Z: float = 3.0
    gamma: float = 0.1
    k_sos: int = 8
    binary: bool = False

    def __post_init__(self):
        if self.m <= 0 or self.alpha <= 0 or self.Z <= 0:
            raise ValueError("m, alpha and Z must be positive")
        if self.k_sos < 1:
            raise ValueError("k_sos must be at least 1")


@dataclass
class Batch:
    """Two descriptor sets plus their pre-normalization vectors.

    ``tau[k]`` is the row of ``dp`` paired with row ``k`` of ``d``; identity
    when omitted.
    """
    d: np.ndarray
    dp: np.ndarray
    x: np.ndarray | None = None
    xp: np.ndarray | None = None
    tau: np.ndarray | None = None

    def __post_init__(self):
        self.d = np.atleast_2d(self.d)
        self.dp = np.atleast_2d(self.dp)
        if self.d.shape != self.dp.shape:
            raise DimensionError(f"set sizes differ: {self.d.shape} vs {self.dp.shape}")
        n = len(self.d)
        if self.tau is not None:
            tau = np.asarray(self.tau)
            if sorted(tau.tolist()) != list(range(n)):
                raise ValueError("pairing is not a bijection")
            self.tau = tau

    @property
    def n(self):
        return len(self.d)

    def aligned(self):
        """(d, dp, x, xp) with dp/xp reordered so row k pairs with row k."""
        if self.tau is None:
            return self.d, self.dp, self.x, self.xp
        xp = None if self.xp is None else self.xp[self.tau]
        return self.d, self.dp[self.tau], self.x, xp


@dataclass
class LossResult:
    total: float
    triplet: float
    sos: float
    r_l2: float
    grad_d: np.ndarray
    grad_dp: np.ndarray
    grad_x: np.ndarray | None = None
    grad_xp: np.ndarray | None = None
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Elementary pieces
# ---------------------------------------------------------------------------

def _dist(a, b):
    diff = a - b
    return np.sqrt(np.sum(diff * diff, axis=-1) + DIST_EPS)


def _pairwise_sq(a, b):
    sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * (a @ b.T))
    return np.maximum(sq, 0.0)


def _pairwise(a, b):
    return np.sqrt(_pairwise_sq(a, b) + DIST_EPS)


def _rank_key(sq):
    # Gram-formula round-off must not decide exact ties (binary descriptors
    # tie constantly), so neighbours are ranked on a 1e-12 grid
    return np.round(sq, 12)


def hybrid_similarity(d, dp, cfg: LossConfig | None = None, tol=1e-4):
    """(alpha (1 - d.d') + |d - d'|) / Z for unit vectors (0 when identical)."""
    cfg = cfg or LossConfig()
    d = np.asarray(d, dtype=np.float64)
    dp = np.asarray(dp, dtype=np.float64)
    for v in (d, dp):
        if np.any(np.abs(np.linalg.norm(v, axis=-1) - 1.0) > tol):
            raise ValueError("hybrid_similarity expects unit-norm descriptors")
    dot = np.sum(d * dp, axis=-1)
    return (cfg.alpha * (1.0 - dot) + np.linalg.norm(d - dp, axis=-1)) / cfg.Z


def _sim_and_grads(a, b, cfg):
    # s_H on rows plus its derivatives wrt a and b
    dist = _dist(a, b)
    s = (cfg.alpha * (1.0 - np.sum(a * b, axis=1)) + dist) / cfg.Z
    u = (a - b) / dist[:, None]
    ga = (-cfg.alpha * b + u) / cfg.Z
    gb = (-cfg.alpha * a - u) / cfg.Z
    return s, ga, gb


def binary_descriptor_distance(b, bp):
    """Normalized Hamming distance 2 sqrt(H) / sqrt(d).

    Accepts ±1 arrays (last axis is the descriptor) or packed BitTensors
    holding single rows or matching row sets.
    """
    if isinstance(b, bq.BitTensor) or isinstance(bp, bq.BitTensor):
        if not (isinstance(b, bq.BitTensor) and isinstance(bp, bq.BitTensor)):
            raise TypeError("mix of packed and unpacked descriptors")
        if b.shape != bp.shape:
            raise DimensionError(f"length mismatch: {b.shape} vs {bp.shape}")
        h = np.bitwise_count(b.words ^ bp.words).sum(axis=-1)
        dim = b.row_len
        out = 2.0 * np.sqrt(h) / np.sqrt(dim)
        return float(out[0]) if len(b.shape) == 1 else out
    b = np.asarray(b)
    bp = np.asarray(bp)
    if b.shape != bp.shape:
        raise DimensionError(f"length mismatch: {b.shape} vs {bp.shape}")
    h = np.sum(b != bp, axis=-1)
    out = 2.0 * np.sqrt(h) / np.sqrt(b.shape[-1])
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Mining and neighbourhoods
# ---------------------------------------------------------------------------

def _mine(B, n):
    """Indices into B of the negative pair chosen for every anchor pair.

    Row k's negative for d'_k is the closest row of B other than k and n+k,
    and likewise for d_k.  The smaller of the two wins; a tie picks the
    second branch.  argmin already takes the lowest index on ties.
    """
    D = _rank_key(_pairwise_sq(B[:n], B))  # row k: d_k to every row of B
    Dp = _rank_key(_pairwise_sq(B[n:], B))
    rows = np.arange(n)
    for M in (D, Dp):
        M[rows, rows] = np.inf
        M[rows, rows + n] = np.inf
    near_dp = np.argmin(Dp, axis=1)  # d_k^v (closest to d'_k)
    near_d = np.argmin(D, axis=1)    # d'_k^v (closest to d_k)
    first = Dp[rows, near_dp] < D[rows, near_d]
    a = np.where(first, near_dp, rows)
    b = np.where(first, rows + n, near_d)
    return a, b, _dist(B[a], B[b])


def hardest_negatives(batch: Batch, k: int):
    """The (negative, partner) descriptor pair the case rule selects for pair k."""
    d, dp, _, _ = batch.aligned()
    n = len(d)
    if n < 2:
        raise ValueError("hardest-negative mining needs at least 2 pairs")
    if not 0 <= k < n:
        raise IndexError(k)
    B = np.concatenate([d, dp]).astype(np.float64)
    a, b, _ = _mine(B, n)
    return B[a[k]], B[b[k]]


def _knn_mask(X, k):
    # row i: k nearest other rows (stable order, lowest index on ties)
    n = len(X)
    D = _rank_key(_pairwise_sq(X, X))
    np.fill_diagonal(D, np.inf)
    k = min(k, n - 1)
    idx = np.argsort(D, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, n), bool)
    mask[np.arange(n)[:, None], idx] = True
    return mask


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def _prep(batch, cfg):
    d, dp, x, xp = batch.aligned()
    if batch.n == 0:
        raise ValueError("empty correspondence set")
    dt = np.result_type(d, np.float32)
    d = d.astype(dt, copy=False)
    dp = dp.astype(dt, copy=False)
    scale = 1.0
    if cfg.binary:
        # ±1 vectors of length D sit at norm sqrt(D)
        scale = 1.0 / np.sqrt(d.shape[1])
    return d * scale, dp * scale, x, xp, scale


def r_l2(batch: Batch):
    _, _, x, xp = batch.aligned()
    if x is None or xp is None:
        raise ValueError("R_L2 needs the pre-normalization vectors")
    if len(x) == 0:
        raise ValueError("empty correspondence set")
    gap = np.linalg.norm(x, axis=1) - np.linalg.norm(xp, axis=1)
    return float(np.mean(gap ** 2))


def _triplet(B, n, cfg):
    rows = np.arange(n)
    a, b, _ = _mine(B, n)
    s_pos, gp_a, gp_b = _sim_and_grads(B[rows], B[rows + n], cfg)
    s_neg, gn_a, gn_b = _sim_and_grads(B[a], B[b], cfg)
    margin = cfg.m + s_pos - s_neg
    active = (margin > 0)[:, None] / n
    g = np.zeros_like(B)
    g[rows] += gp_a * active
    g[rows + n] += gp_b * active
    np.add.at(g, a, -gn_a * active)
    np.add.at(g, b, -gn_b * active)
    return float(np.mean(np.maximum(margin, 0.0))), g, {"neg_a": a, "neg_b": b}


def triplet_loss(batch: Batch, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    d, dp, _, _, _ = _prep(batch, cfg)
    if len(d) < 2:
        raise ValueError("hardest-negative mining needs at least 2 pairs")
    return _triplet(np.concatenate([d, dp]), len(d), cfg)[0]


def _sos(d, dp, cfg):
    n = len(d)
    mask = _knn_mask(d, cfg.k_sos) | _knn_mask(dp, cfg.k_sos)
    Dj = _pairwise(d, d)
    Djp = _pairwise(dp, dp)
    e = np.where(mask, Dj - Djp, 0.0)
    d2 = np.sqrt(np.sum(e * e, axis=1))
    value = float(np.mean(d2))
    # W[k, l] = d d2_k / d e_kl, scaled by the mean
    with np.errstate(invalid="ignore", divide="ignore"):
        W = np.where(d2[:, None] > 0, e / d2[:, None], 0.0) / n
    g_d = _dist_matrix_grad(d, W / Dj)
    g_dp = _dist_matrix_grad(dp, -W / Djp)
    return value, g_d, g_dp


def _dist_matrix_grad(X, C):
    # gradient of sum_kl C_kl * |x_k - x_l| given C already divided by the distance
    S = C + C.T
    return S.sum(axis=1)[:, None] * X - S @ X


def sos_reg(batch: Batch, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    d, dp, _, _, _ = _prep(batch, cfg)
    if len(d) < 2:
        warnings.warn("SOS needs at least 2 pairs; returning 0", RuntimeWarning)
        return 0.0
    return _sos(d, dp, cfg)[0]


def total_loss(batch: Batch, cfg: LossConfig | None = None) -> LossResult:
    """Triplet + SOS + gamma * R_L2 (R_L2 dropped for binary descriptors)."""
    cfg = cfg or LossConfig()
    d, dp, x, xp, scale = _prep(batch, cfg)
    n = len(d)
    if n < 2:
        raise ValueError("the loss needs at least 2 pairs")
    B = np.concatenate([d, dp])
    trip, gB, info = _triplet(B, n, cfg)
    sos, g_sd, g_sdp = _sos(d, dp, cfg)
    g_d = (gB[:n] + g_sd) * scale
    g_dp = (gB[n:] + g_sdp) * scale

    reg = 0.0
    g_x = g_xp = None
    if not cfg.binary and x is not None and xp is not None:
        nx = np.linalg.norm(x, axis=1)
        nxp = np.linalg.norm(xp, axis=1)
        gap = nx - nxp
        reg = float(np.mean(gap ** 2))
        c = (cfg.gamma * 2.0 / n) * gap
        g_x = (c / np.where(nx > 0, nx, 1.0))[:, None] * x
        g_xp = (-c / np.where(nxp > 0, nxp, 1.0))[:, None] * xp

    total = trip + sos + (0.0 if cfg.binary else cfg.gamma * reg)
    if batch.tau is not None:
        # back to the caller's row order for the second set
        inv = np.argsort(batch.tau)
        g_dp = g_dp[inv]
        if g_xp is not None:
            g_xp = g_xp[inv]
    dt = batch.d.dtype if np.issubdtype(batch.d.dtype, np.floating) else np.float64
    cast = (lambda a: None if a is None else a.astype(dt, copy=False))
    return LossResult(total, trip, sos, reg, cast(g_d), cast(g_dp), cast(g_x), cast(g_xp), info)
