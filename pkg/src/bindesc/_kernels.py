"""Compiled XNOR/popcount loops (numba)."""

import numpy as np
from numba import njit, types
from numba.extending import intrinsic
from llvmlite import ir


@intrinsic
def _ctpop(typingctx, x):
    if not isinstance(x, types.Integer) or x.bitwidth != 64:
        return None

    def codegen(context, builder, sig, args):
        fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(fn, args)

    return types.uint64(x), codegen


@njit(cache=True, fastmath=True)
def popcount_rows(words):
    n, m = words.shape
    out = np.zeros(n, np.int64)
    for i in range(n):
        acc = 0
        for j in range(m):
            acc += _ctpop(words[i, j])
        out[i] = acc
    return out


@njit(cache=True, fastmath=True)
def xnor_conv_dot(act, wt, kh, kw, stride, ho, wo, channels):
    """±1 convolution from packed bits, for every (sample, y, x, out-channel).

    ``act`` is (N, Hp, Wp, nw) with spatial padding already applied and
    ``wt`` is (kh*kw*nw, K) so the inner loop runs over output channels.
    Each tap contributes channels - 2 * popcount(a ^ w); pad bits are zero
    on both sides, so they never disagree.
    """
    n = act.shape[0]
    nw = act.shape[3]
    taps, k = wt.shape
    full = kh * kw * channels
    out = np.empty((n, ho, wo, k), np.int32)
    buf = np.empty(taps, np.uint64)
    acc = np.empty(k, np.int64)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                t = 0
                for dy in range(kh):
                    for dx in range(kw):
                        for q in range(nw):
                            buf[t] = act[b, oy * stride + dy, ox * stride + dx, q]
                            t += 1
                acc[:] = 0
                for t in range(taps):
                    a = buf[t]
                    for c in range(k):
                        acc[c] += _ctpop(a ^ wt[t, c])
                for c in range(k):
                    out[b, oy, ox, c] = full - 2 * acc[c]
    return out


@njit(cache=True, fastmath=True)
def hamming_matrix(a, b):
    """Pairwise popcount(a XOR b) for packed rows (Na, nw) x (Nb, nw)."""
    na, nw = a.shape
    nb = b.shape[0]
    out = np.empty((na, nb), np.int32)
    for i in range(na):
        for j in range(nb):
            acc = 0
            for q in range(nw):
                acc += _ctpop(a[i, q] ^ b[j, q])
            out[i, j] = acc
    return out


# ---------------------------------------------------------------------------
# Fused elementwise layers (float32 or float64, NCHW contiguous)
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def frn_tlu_fwd(x, gamma, beta, tau, eps):
    n, c, h, w = x.shape
    m = h * w
    out = np.empty_like(x)
    r = np.empty((n, c), x.dtype)
    xf = x.reshape(n, c, m)
    of = out.reshape(n, c, m)
    for b in range(n):
        for ch in range(c):
            s = 0.0
            for i in range(m):
                s += xf[b, ch, i] * xf[b, ch, i]
            rr = 1.0 / np.sqrt(s / m + eps)
            r[b, ch] = rr
            g = gamma[ch] * rr
            bt = beta[ch]
            tu = tau[ch]
            for i in range(m):
                y = g * xf[b, ch, i] + bt
                of[b, ch, i] = y if y >= tu else tu
    return out, r


@njit(cache=True, fastmath=True)
def frn_tlu_bwd(gout, x, r, gamma, beta, tau):
    n, c, h, w = x.shape
    m = h * w
    gx = np.empty_like(x)
    g_gamma = np.zeros(c, np.float64)
    g_beta = np.zeros(c, np.float64)
    g_tau = np.zeros(c, np.float64)
    xf = x.reshape(n, c, m)
    gf = gout.reshape(n, c, m)
    gxf = gx.reshape(n, c, m)
    for b in range(n):
        for ch in range(c):
            rr = r[b, ch]
            gm = gamma[ch]
            bt = beta[ch]
            tu = tau[ch]
            sg = 0.0
            sb = 0.0
            st = 0.0
            for i in range(m):
                xh = xf[b, ch, i] * rr
                g = gf[b, ch, i]
                if gm * xh + bt >= tu:
                    sg += g * xh
                    sb += g
                else:
                    st += g
            g_gamma[ch] += sg
            g_beta[ch] += sb
            g_tau[ch] += st
            # mean over the map of d(xhat) * xhat; gy*xhat summed is sg
            proj = gm * sg / m
            for i in range(m):
                xh = xf[b, ch, i] * rr
                if gm * xh + bt >= tu:
                    gxf[b, ch, i] = rr * (gf[b, ch, i] * gm - xh * proj)
                else:
                    gxf[b, ch, i] = -rr * xh * proj
    return gx, g_gamma, g_beta, g_tau


@njit(cache=True, fastmath=True)
def frn_tlu_fwd_nhwc(x, gamma, beta, tau, eps):
    n, h, w, c = x.shape
    m = h * w
    out = np.empty_like(x)
    r = np.empty((n, c), x.dtype)
    xf = x.reshape(n, m, c)
    of = out.reshape(n, m, c)
    s = np.empty(c, np.float64)
    for b in range(n):
        s[:] = 0.0
        for i in range(m):
            for ch in range(c):
                s[ch] += xf[b, i, ch] * xf[b, i, ch]
        for ch in range(c):
            r[b, ch] = 1.0 / np.sqrt(s[ch] / m + eps)
        for i in range(m):
            for ch in range(c):
                y = gamma[ch] * r[b, ch] * xf[b, i, ch] + beta[ch]
                of[b, i, ch] = y if y >= tau[ch] else tau[ch]
    return out, r


@njit(cache=True, fastmath=True)
def frn_tlu_bwd_nhwc(gout, x, r, gamma, beta, tau):
    n, h, w, c = x.shape
    m = h * w
    gx = np.empty_like(x)
    g_gamma = np.zeros(c, np.float64)
    g_beta = np.zeros(c, np.float64)
    g_tau = np.zeros(c, np.float64)
    xf = x.reshape(n, m, c)
    gf = gout.reshape(n, m, c)
    gxf = gx.reshape(n, m, c)
    sg = np.empty(c, np.float64)
    for b in range(n):
        sg[:] = 0.0
        for i in range(m):
            for ch in range(c):
                xh = xf[b, i, ch] * r[b, ch]
                g = gf[b, i, ch]
                if gamma[ch] * xh + beta[ch] >= tau[ch]:
                    sg[ch] += g * xh
                    g_beta[ch] += g
                else:
                    g_tau[ch] += g
        for ch in range(c):
            g_gamma[ch] += sg[ch]
            sg[ch] = gamma[ch] * sg[ch] / m
        for i in range(m):
            for ch in range(c):
                rr = r[b, ch]
                xh = xf[b, i, ch] * rr
                if gamma[ch] * xh + beta[ch] >= tau[ch]:
                    gxf[b, i, ch] = rr * (gf[b, i, ch] * gamma[ch] - xh * sg[ch])
                else:
                    gxf[b, i, ch] = -rr * xh * sg[ch]
    return gx, g_gamma, g_beta, g_tau


@njit(cache=True, fastmath=True)
def sign_of(x):
    out = np.empty_like(x)
    xf = x.reshape(-1)
    of = out.reshape(-1)
    for i in range(xf.size):
        of[i] = 1.0 if xf[i] >= 0 else -1.0
    return out


@njit(cache=True)
def pack_nchw(x, nw):
    """(N,C,H,W) ±1 values -> (N*H*W, nw) words, channel c at bit c % 64.

    Returns (words, ok); ok is False if any entry is not exactly ±1.
    """
    n, c, h, w = x.shape
    out = np.empty((n * h * w, nw), np.uint64)
    ok = True
    for b in range(n):
        for y in range(h):
            for xx in range(w):
                row = (b * h + y) * w + xx
                for q in range(nw):
                    word = np.uint64(0)
                    bad = 0
                    for j in range(min(64, c - q * 64)):
                        v = x[b, q * 64 + j, y, xx]
                        # branch-free: signs are random, so branches mispredict
                        word |= np.uint64(v > 0) << np.uint64(j)
                        bad += (v != 1) & (v != -1)
                    out[row, q] = word
                    if bad:
                        ok = False
    return out, ok
