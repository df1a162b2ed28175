"""Dense numerics for the descriptor network.

Activations are laid out (batch, channels, height, width) and conv weights
(out_ch, in_ch, kh, kw).  Every layer comes as a pure forward function that
returns its output plus a cache, and a backward function consuming that
cache.  Arrays keep whatever float dtype they arrive in; use
:func:`extended_precision` to make freshly created parameters float64.
"""

from __future__ import annotations

import contextlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from bindesc import _kernels

_DTYPE = [np.float32]
_BACKEND = ["torch"]

FRN_EPS = 1e-6
BN_EPS = 1e-8

# Upper bound on im2col buffer size (elements) before the batch is split.
_COL_BUDGET = 1 << 23


class DimensionError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class StatisticsError(ValueError):
    pass


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def extended_precision():
    """Create parameters and buffers in float64 inside this block."""
    _DTYPE.append(np.float64)
    try:
        yield
    finally:
        _DTYPE.pop()


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced non-finite values")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x, padding, value):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  mode="constant", constant_values=value)


def _im2col(xp, kh, kw, stride, ho, wo):
    # (N, C, Hp, Wp) -> (N*ho*wo, C*kh*kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _geometry(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"expected 4-D input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride={stride} / padding={padding}")
    ho = conv_output_size(x.shape[2], w.shape[2], stride, padding)
    wo = conv_output_size(x.shape[3], w.shape[3], stride, padding)
    if ho < 1 or wo < 1:
        raise GeometryError(f"non-positive output extent {ho}x{wo}")
    return ho, wo


def _chunks(n, per_item):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def conv2d_forward(x, w, stride=1, padding=0, pad_value=0.0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (K,C,kh,kw)."""
    _geometry(x, w, stride, padding)
    if _BACKEND[-1] == "torch":
        return _conv_forward_torch(x, w, stride, padding, pad_value)
    return _conv_forward_numpy(x, w, stride, padding, pad_value)


def conv2d_backward(grad_out, x, w, stride=1, padding=0, pad_value=0.0, need_input=True):
    """Return ``(grad_input, grad_weights)`` for :func:`conv2d_forward`.

    With ``need_input=False`` the input gradient is skipped and returned as None.
    """
    ho, wo = _geometry(x, w, stride, padding)
    expected = (x.shape[0], w.shape[0], ho, wo)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    if _BACKEND[-1] == "torch":
        return _conv_backward_torch(grad_out, x, w, stride, padding, pad_value, need_input)
    gx, gw = _conv_backward_numpy(grad_out, x, w, stride, padding, pad_value)
    return (gx if need_input else None), gw


@contextlib.contextmanager
def conv_backend(name):
    """Temporarily switch the convolution backend ("torch" or "numpy")."""
    if name not in ("torch", "numpy"):
        raise ValueError(f"unknown conv backend {name!r}")
    _BACKEND.append(name)
    try:
        yield
    finally:
        _BACKEND.pop()


def _conv_forward_numpy(x, w, stride, padding, pad_value):
    ho, wo = _geometry(x, w, stride, padding)
    n = x.shape[0]
    k, c, kh, kw = w.shape
    wmat = w.reshape(k, c * kh * kw).T
    out = np.empty((n, ho, wo, k), dtype=np.result_type(x, w))
    xp = _pad(x, padding, pad_value)
    for sl in _chunks(n, ho * wo * c * kh * kw):
        cols = _im2col(xp[sl], kh, kw, stride, ho, wo)
        out[sl] = (cols @ wmat).reshape(-1, ho, wo, k)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_backward_numpy(grad_out, x, w, stride, padding, pad_value):
    ho, wo = _geometry(x, w, stride, padding)
    n = x.shape[0]
    k, c, kh, kw = w.shape
    wmat = w.reshape(k, c * kh * kw)
    xp = _pad(x, padding, pad_value)
    gxp = np.zeros(xp.shape, dtype=np.result_type(grad_out, w))
    gw = np.zeros((k, c * kh * kw), dtype=np.result_type(grad_out, x))
    g_nhwk = grad_out.transpose(0, 2, 3, 1)
    for sl in _chunks(n, ho * wo * c * kh * kw):
        gmat = g_nhwk[sl].reshape(-1, k)
        cols = _im2col(xp[sl], kh, kw, stride, ho, wo)
        gw += gmat.T @ cols
        gcols = (gmat @ wmat).reshape(-1, ho, wo, c, kh, kw)
        # col2im: scatter each kernel tap back onto the padded input
        for i in range(kh):
            for j in range(kw):
                gxp[sl, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                    gcols[..., i, j].transpose(0, 3, 1, 2)
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gxp), gw.reshape(w.shape)


def channels_last(x):
    """Same logical (N,C,H,W) array stored with channels innermost."""
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)


def is_channels_last(x):
    return x.ndim == 4 and x.transpose(0, 2, 3, 1).flags.c_contiguous


def _as_torch(a, dtype):
    # oneDNN is markedly faster on channels-last buffers, and numpy views with
    # channels-last strides map onto them without a copy
    a = a.astype(dtype, copy=False)
    if a.ndim == 4 and not (a.flags.c_contiguous or is_channels_last(a)):
        a = np.ascontiguousarray(a)
    t = torch.from_numpy(a)
    return t.contiguous(memory_format=torch.channels_last) if t.ndim == 4 else t


def _batch_sum(g):
    # reduce over the batch along the storage order
    if is_channels_last(g):
        return g.transpose(0, 2, 3, 1).sum(axis=0)[None].transpose(0, 3, 1, 2)
    return g.sum(axis=0, keepdims=True)


def _border_mask(c, h, w, padding, dtype):
    # 1 on the padding ring, 0 on the image
    m = np.ones((1, c, h + 2 * padding, w + 2 * padding), dtype)
    m[:, :, padding:padding + h, padding:padding + w] = 0
    return _as_torch(m, dtype)


def _conv_forward_torch(x, w, stride, padding, pad_value):
    dtype = np.result_type(x, w)
    xt = _as_torch(x, dtype)
    wt = _as_torch(w, dtype)
    with torch.no_grad():
        out = torch.nn.functional.conv2d(xt, wt, stride=stride, padding=padding)
        if padding and pad_value != 0:
            # a constant ring adds the same map to every sample
            mask = _border_mask(x.shape[1], x.shape[2], x.shape[3], padding, dtype)
            out += pad_value * torch.nn.functional.conv2d(mask, wt, stride=stride)
    return out.numpy()


def _conv_backward_torch(grad_out, x, w, stride, padding, pad_value, need_input=True):
    dtype = np.result_type(grad_out, x, w)
    xt = _as_torch(x, dtype)
    wt = _as_torch(w, dtype)
    gt = _as_torch(grad_out, dtype)
    with torch.no_grad():
        gx, gw, _ = torch.ops.aten.convolution_backward(
            gt, xt, wt, None, [stride, stride], [padding, padding], [1, 1], False, [0, 0], 1,
            [need_input, True, False])
        if padding and pad_value != 0:
            mask = _border_mask(x.shape[1], x.shape[2], x.shape[3], padding, dtype)
            g_sum = _as_torch(_batch_sum(grad_out).astype(dtype, copy=False), dtype)
            _, gw_ring, _ = torch.ops.aten.convolution_backward(
                g_sum, mask, wt, None, [stride, stride], [0, 0], [1, 1],
                False, [0, 0], 1, [False, True, False])
            gw += pad_value * gw_ring
    gw = gw.contiguous().numpy()
    return (gx.numpy() if need_input else None), gw


# ---------------------------------------------------------------------------
# Filter response normalization + thresholded linear unit
# ---------------------------------------------------------------------------

@dataclass
class FrnParams:
    gamma: np.ndarray
    beta: np.ndarray
    tau: np.ndarray
    eps: float = FRN_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("FRN eps must be positive")
        n = len(self.gamma)
        if len(self.beta) != n or len(self.tau) != n:
            raise DimensionError("FRN parameter vectors differ in length")

    @classmethod
    def init(cls, channels, tau=0.0, dtype=None):
        dtype = dtype or default_dtype()
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.full(channels, tau, dtype))


def frn_tlu_forward(x, p: FrnParams):
    """FRN over each sample's spatial extent, then ``max(y, tau)``.

    Per channel: nu2 = mean(x^2) over (H, W); y = gamma * x / sqrt(nu2 + eps)
    + beta; out = max(y, tau), ties taking the identity branch.
    """
    if x.ndim != 4 or x.shape[1] != len(p.gamma):
        raise DimensionError(f"FRN expects (N,{len(p.gamma)},H,W), got {x.shape}")
    dt = x.dtype
    args = (p.gamma.astype(dt), p.beta.astype(dt), p.tau.astype(dt))
    if is_channels_last(x):
        out, r = _kernels.frn_tlu_fwd_nhwc(x.transpose(0, 2, 3, 1), *args, dt.type(p.eps))
        return out.transpose(0, 3, 1, 2), (x, r)
    x = np.ascontiguousarray(x)
    out, r = _kernels.frn_tlu_fwd(x, *args, dt.type(p.eps))
    return out, (x, r)


def frn_tlu_backward(grad_out, cache, p: FrnParams):
    """Return ``(grad_x, grad_gamma, grad_beta, grad_tau)``."""
    x, r = cache
    if grad_out.shape != x.shape:
        raise DimensionError("grad_out does not match the FRN output")
    dt = x.dtype
    args = (r, p.gamma.astype(dt), p.beta.astype(dt), p.tau.astype(dt))
    if is_channels_last(x):
        g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1), dtype=dt)
        gx, gg, gb, gt = _kernels.frn_tlu_bwd_nhwc(g, x.transpose(0, 2, 3, 1), *args)
        gx = gx.transpose(0, 3, 1, 2)
    else:
        g = np.ascontiguousarray(grad_out, dtype=dt)
        gx, gg, gb, gt = _kernels.frn_tlu_bwd(g, x, *args)
    return gx, gg.astype(dt), gb.astype(dt), gt.astype(dt)


# ---------------------------------------------------------------------------
# Final batch norm (no affine) and L2 normalization
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def init(cls, dim, dtype=None):
        dtype = dtype or default_dtype()
        return cls(np.zeros(dim, dtype), np.ones(dim, dtype))


def batchnorm_final(x, stats: RunningStats, train: bool, eps=BN_EPS):
    """Standardize each column of a (batch, dim) matrix.

    Training mode uses batch statistics and updates ``stats`` in place;
    inference uses the running statistics.
    """
    if x.ndim != 2:
        raise DimensionError(f"batchnorm_final expects (batch, dim), got {x.shape}")
    if train:
        if x.shape[0] < 2:
            raise StatisticsError("batch statistics need at least 2 samples")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        m = stats.momentum
        unbiased = var * x.shape[0] / (x.shape[0] - 1)
        stats.mean[...] = (1 - m) * stats.mean + m * mu
        stats.var[...] = (1 - m) * stats.var + m * unbiased
    else:
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat.astype(x.dtype, copy=False), (xhat, inv, train)


def batchnorm_final_backward(grad_out, cache):
    xhat, inv, train = cache
    if not train:
        return grad_out * inv
    gm = grad_out.mean(axis=0)
    gxm = (grad_out * xhat).mean(axis=0)
    return inv * (grad_out - gm - xhat * gxm)


def l2_normalize(x):
    """Row-wise unit normalization; zero rows map to the first basis vector."""
    x2 = np.atleast_2d(x)
    norms = np.sqrt(np.sum(x2 * x2, axis=1, keepdims=True))
    zero = norms[:, 0] == 0
    safe = np.where(norms == 0, 1.0, norms)
    y = x2 / safe
    if np.any(zero):
        warnings.warn("l2_normalize: zero vector replaced by first basis vector", RuntimeWarning)
        y[zero] = 0
        y[zero, 0] = 1
    y = y.astype(x2.dtype, copy=False)
    return (y if np.ndim(x) > 1 else y[0]), (y, safe)


def l2_normalize_backward(grad_out, cache):
    y, norms = cache
    g = np.atleast_2d(grad_out)
    return (g - y * np.sum(g * y, axis=1, keepdims=True)) / norms


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape differs from value shape")

    def zero_grad(self):
        self.grad[...] = 0


def adam_step(params, lr=0.01, step=1, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place.

    Raises ``FloatingPointError`` naming the first parameter with a
    non-finite gradient; no parameter is touched in that case.
    """
    if step < 1:
        raise ValueError("Adam step index starts at 1")
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    c1 = 1 - beta1 ** step
    c2 = 1 - beta2 ** step
    for p in params:
        p.m *= beta1
        p.m += (1 - beta1) * p.grad
        p.v *= beta2
        p.v += (1 - beta2) * p.grad * p.grad
        p.value -= (lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)).astype(p.value.dtype)


# ---------------------------------------------------------------------------
# Resampling and photometric normalization
# ---------------------------------------------------------------------------

def bilinear_resize(img, out_h=32, out_w=32):
    """Corner-aligned bilinear resize of a 2-D array."""
    img = np.asarray(img)
    h, w = img.shape
    if h < 2 or w < 2:
        raise GeometryError(f"cannot resize a {h}x{w} array")
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[y0][:, x0]
    b = img[y0][:, x0 + 1]
    c = img[y0 + 1][:, x0]
    d = img[y0 + 1][:, x0 + 1]
    top = a + (b - a) * fx
    bot = c + (d - c) * fx
    out = top + (bot - top) * fy
    # rounding can step a hair outside the input range
    return np.clip(out, img.min(), img.max())


def normalize_patches(patches, eps=1e-6, dtype=None):
    """Per-patch zero mean, unit std; returns (N, 1, H, W)."""
    p = np.asarray(patches, dtype=dtype or default_dtype())
    if p.ndim == 3:
        p = p[:, None]
    mu = p.mean(axis=(1, 2, 3), keepdims=True)
    sd = p.std(axis=(1, 2, 3), keepdims=True)
    return (p - mu) / (sd + eps)
