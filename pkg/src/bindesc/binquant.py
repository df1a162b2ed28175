"""Sign quantization, the tanh gradient surrogate and bit-packed kernels.

Bit encoding: +1 is stored as a set bit, -1 as a clear bit, packed little
endian into 64-bit words along the last logical axis.  Bits past the end of
a row ("pad bits") are always stored as 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from bindesc import _kernels
from bindesc.tensor import DimensionError, GeometryError, conv_output_size

WORD_BITS = 64

SCALING_VARIANTS = ("none", "per_channel", "spatial_channel")


@dataclass
class QuantConfig:
    t_min: float = 0.1
    t_max: float = 10.0
    scaling_variant: str = "none"
    t: float = 0.1
    k: float = 10.0

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise ValueError("t_min must be below t_max")
        if self.scaling_variant not in SCALING_VARIANTS:
            raise ValueError(f"unknown scaling variant {self.scaling_variant!r}")

    def advance(self, epoch, n_epochs):
        self.t, self.k = schedule(epoch, n_epochs, self.t_min, self.t_max)
        return self.t, self.k


def sign_forward(x):
    """+1 where x >= 0, else -1 (zero maps to +1)."""
    x = np.asarray(x)
    if x.dtype in (np.float32, np.float64) and x.ndim:
        if x.ndim == 4 and x.transpose(0, 2, 3, 1).flags.c_contiguous:
            # keep channels-last storage intact
            return _kernels.sign_of(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
        return _kernels.sign_of(np.ascontiguousarray(x))
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    return np.where(x >= 0, 1, -1).astype(dtype)


def surrogate(x, t, k):
    """The smooth stand-in k*tanh(t*x) used for sign in gradient checks."""
    return k * np.tanh(t * x)


def surrogate_backward(grad_out, saved_x, t, k):
    if t <= 0 or k <= 0:
        raise ValueError("surrogate needs t > 0 and k > 0")
    g = np.asarray(grad_out)
    x = np.asarray(saved_x)
    dt = np.result_type(g, x)
    if not np.issubdtype(dt, np.floating):
        dt = np.dtype(np.float64)
    # in-place chain keeps this at a handful of vectorized passes
    out = np.multiply(x, dt.type(t), dtype=dt)
    np.tanh(out, out=out)
    np.multiply(out, out, out=out)
    np.subtract(dt.type(1), out, out=out)
    out *= dt.type(k * t)
    out *= g
    return out


def schedule(i, n, t_min=0.1, t_max=10.0):
    """Return (t, k) for epoch ``i`` of ``n``."""
    if n < 1:
        raise ValueError("schedule needs at least one epoch")
    if not 0 <= i <= n:
        raise ValueError(f"epoch {i} outside [0, {n}]")
    t = t_min * 10 ** ((i / n) * math.log10(t_max / t_min))
    return t, max(1.0 / t, 1.0)


def weight_standardize(w, sigma_floor=1e-12):
    """Per-filter (axis 0) zero mean, unit population std.

    Returns ``(w_hat, cache)``; cache[2] is a boolean mask of filters whose
    std fell under ``sigma_floor`` (those come back as zeros).
    """
    flat = w.reshape(w.shape[0], -1)
    if flat.shape[1] < 2:
        raise DimensionError("weight standardization needs filters with >= 2 elements")
    mu = flat.mean(axis=1, keepdims=True)
    sigma = flat.std(axis=1, keepdims=True)
    degenerate = sigma[:, 0] < sigma_floor
    if np.any(degenerate):
        warnings.warn(f"{int(degenerate.sum())} filter(s) with degenerate std", RuntimeWarning)
    safe = np.where(degenerate[:, None], 1.0, sigma)
    w_hat = (flat - mu) / safe
    w_hat[degenerate] = 0
    return w_hat.reshape(w.shape), (w_hat, safe, degenerate)


def weight_standardize_backward(grad_out, cache):
    w_hat, sigma, degenerate = cache
    g = grad_out.reshape(w_hat.shape)
    gx = (g - g.mean(axis=1, keepdims=True)
          - w_hat * np.mean(g * w_hat, axis=1, keepdims=True)) / sigma
    gx[degenerate] = 0
    return gx.reshape(grad_out.shape)


# ---------------------------------------------------------------------------
# Bit packing
# ---------------------------------------------------------------------------

@dataclass
class BitTensor:
    words: np.ndarray  # (rows, words_per_row) uint64
    shape: tuple
    pad_bits: int

    @property
    def logical_len(self):
        return int(np.prod(self.shape)) if len(self.shape) else 0

    @property
    def row_len(self):
        return self.shape[-1] if self.shape else 0

    def __eq__(self, other):
        return (isinstance(other, BitTensor) and self.shape == other.shape
                and self.pad_bits == other.pad_bits
                and np.array_equal(self.words, other.words))


def _words_per_row(n):
    return (n + WORD_BITS - 1) // WORD_BITS


def pack_signs(x):
    """Pack a {-1,+1} array along its last axis."""
    x = np.asarray(x)
    shape = tuple(int(s) for s in x.shape)
    if x.size and not np.all((x == 1) | (x == -1)):
        raise ValueError("pack_signs expects entries in {-1, +1}")
    row_len = shape[-1] if shape else 0
    nw = _words_per_row(row_len)
    bits = (x.reshape(-1, row_len) > 0) if x.size else np.zeros((0, row_len), bool)
    pad = nw * WORD_BITS - row_len
    if pad:
        bits = np.concatenate([bits, np.zeros((bits.shape[0], pad), bool)], axis=1)
    packed = np.packbits(bits, axis=1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)
    return BitTensor(words.reshape(-1, nw), shape, pad)


def unpack(bt: BitTensor, dtype=np.float32):
    if bt.logical_len == 0:
        return np.zeros(bt.shape, dtype)
    raw = bt.words.astype("<u8").view(np.uint8).reshape(bt.words.shape[0], -1)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : bt.row_len]
    return (bits.astype(dtype) * 2 - 1).reshape(bt.shape)


def _popcount(words):
    return np.bitwise_count(words).sum(axis=-1, dtype=np.int64)


def xnor_dot(u: BitTensor, v: BitTensor):
    """Inner product of two packed ±1 rows via XNOR and popcount."""
    d = u.logical_len
    if d != v.logical_len or u.words.shape != v.words.shape:
        raise DimensionError(f"length mismatch: {u.logical_len} vs {v.logical_len}")
    agree = int(_popcount(~(u.words ^ v.words)).sum()) - u.pad_bits * u.words.shape[0]
    return 2 * agree - d


def pack_activations(a):
    """(N,C,H,W) ±1 activations -> BitTensor of shape (N,H,W,C)."""
    a = np.asarray(a)
    if a.ndim != 4 or a.size == 0:
        return pack_signs(np.ascontiguousarray(a.transpose(0, 2, 3, 1)))
    n, c, h, w = a.shape
    nw = _words_per_row(c)
    words, ok = _kernels.pack_nchw(a, nw)
    if not ok:
        raise ValueError("pack_signs expects entries in {-1, +1}")
    return BitTensor(words, (n, h, w, c), nw * WORD_BITS - c)


def pack_weights(w):
    """(K,C,kh,kw) ±1 weights -> BitTensor of shape (K,kh,kw,C)."""
    return pack_signs(np.ascontiguousarray(np.asarray(w).transpose(0, 2, 3, 1)))


def _pad_plus_one(words, padding, channels):
    # padded pixels are logical +1: all valid bits set, pad bits clear
    if padding == 0:
        return words
    nw = words.shape[-1]
    fill = np.empty(nw, np.uint64)
    for q in range(nw):
        valid = min(WORD_BITS, channels - q * WORD_BITS)
        fill[q] = np.uint64(0xFFFFFFFFFFFFFFFF) if valid == WORD_BITS else np.uint64((1 << valid) - 1)
    n, h, w, _ = words.shape
    out = np.empty((n, h + 2 * padding, w + 2 * padding, nw), np.uint64)
    out[...] = fill
    out[:, padding:padding + h, padding:padding + w] = words
    return out


def binary_conv2d(act_bits: BitTensor, weight_bits: BitTensor, stride=1, padding=0,
                  accelerated=True):
    """Integer convolution of packed ±1 activations and weights.

    ``act_bits`` comes from :func:`pack_activations`, ``weight_bits`` from
    :func:`pack_weights`.  Spatial padding inserts +1.  Output is (N,K,Ho,Wo)
    int32 and equals the float convolution of the unpacked tensors.
    """
    n, h, w, c = act_bits.shape
    k, kh, kw, cw = weight_bits.shape
    if c != cw:
        raise DimensionError(f"activations have {c} channels, weights expect {cw}")
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride={stride} / padding={padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise GeometryError(f"non-positive output extent {ho}x{wo}")
    nw = act_bits.words.shape[1]
    act = _pad_plus_one(act_bits.words.reshape(n, h, w, nw), padding, c)
    wt = np.ascontiguousarray(weight_bits.words.reshape(k, kh * kw * nw).T)
    if accelerated:
        out = _kernels.xnor_conv_dot(act, wt, kh, kw, stride, ho, wo, c)
    else:
        out = _xnor_conv_dot_numpy(act, wt, kh, kw, stride, ho, wo, c)
    # NHWC storage viewed as (N,K,Ho,Wo), matching the float path's layout
    return out.transpose(0, 3, 1, 2)


def _xnor_conv_dot_numpy(act, wt, kh, kw, stride, ho, wo, channels):
    n, _, _, nw = act.shape
    win = np.lib.stride_tricks.sliding_window_view(act, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, ho, wo, nw, kh, kw) -> (n*ho*wo, kh*kw*nw) in (dy, dx, q) order
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * nw)
    out = np.empty((cols.shape[0], wt.shape[1]), np.int32)
    step = max(1, (1 << 22) // (wt.size or 1))
    for s in range(0, cols.shape[0], step):
        diff = np.bitwise_count(cols[s:s + step, :, None] ^ wt[None]).sum(axis=1, dtype=np.int64)
        out[s:s + step] = kh * kw * channels - 2 * diff
    return out.reshape(n, ho, wo, -1)


def apply_scaling(z, variant="none", lam=None, alpha=None, beta=None):
    """Scale a (N,K,Ho,Wo) conv output by learned per-channel/spatial factors."""
    if variant == "none":
        return z
    _, k, ho, wo = z.shape
    if lam is None or len(lam) != k:
        raise DimensionError(f"need {k} channel factors")
    out = z * np.asarray(lam)[None, :, None, None]
    if variant == "per_channel":
        return out
    if variant != "spatial_channel":
        raise ValueError(f"unknown scaling variant {variant!r}")
    if alpha is None or beta is None or len(alpha) != ho or len(beta) != wo:
        raise DimensionError(f"need {ho} row and {wo} column factors")
    return out * np.asarray(alpha)[None, None, :, None] * np.asarray(beta)[None, None, None, :]
