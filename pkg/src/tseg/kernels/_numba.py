"""numba kernels for the hot loops.

Parallel loops only ever split work whose output elements are disjoint;
reductions across the batch go through per-sample partial buffers that are
summed in a fixed order afterwards, so results do not depend on the number
of worker threads.
"""

import numpy as np
from numba import njit, prange

from . import _numpy as _np_kernels

# No nnan/ninf: the engine relies on NaN/Inf surviving to its finiteness check.
_FM = {"contract", "reassoc", "nsz"}


@njit(cache=True)
def _pad1(x):
    N, C, H, W = x.shape
    xp = np.zeros((N, C, H + 2, W + 2), x.dtype)
    for n in range(N):
        for c in range(C):
            for h in range(H):
                for w in range(W):
                    xp[n, c, h + 1, w + 1] = x[n, c, h, w]
    return xp


@njit(parallel=True, cache=True, fastmath=_FM)
def conv3x3_forward(x, w, b):
    N, C, H, W = x.shape
    O = w.shape[0]
    xp = _pad1(x)
    out = np.empty((N, O, H, W), x.dtype)
    for idx in prange(N * H):
        n = idx // H
        h = idx % H
        acc = np.empty((O, W), x.dtype)
        for o in range(O):
            for j in range(W):
                acc[o, j] = b[o]
        for c in range(C):
            r0 = xp[n, c, h]
            r1 = xp[n, c, h + 1]
            r2 = xp[n, c, h + 2]
            for o in range(O):
                k = w[o, c]
                k00 = k[0, 0]; k01 = k[0, 1]; k02 = k[0, 2]
                k10 = k[1, 0]; k11 = k[1, 1]; k12 = k[1, 2]
                k20 = k[2, 0]; k21 = k[2, 1]; k22 = k[2, 2]
                a = acc[o]
                for j in range(W):
                    a[j] += (k00 * r0[j] + k01 * r0[j + 1] + k02 * r0[j + 2]
                             + k10 * r1[j] + k11 * r1[j + 1] + k12 * r1[j + 2]
                             + k20 * r2[j] + k21 * r2[j + 1] + k22 * r2[j + 2])
        for o in range(O):
            for j in range(W):
                out[n, o, h, j] = acc[o, j]
    return out


@njit(parallel=True, cache=True, fastmath=_FM)
def conv3x3_grad_weight(x, gy):
    N, C, H, W = x.shape
    O = gy.shape[1]
    xp = _pad1(x)
    part = np.zeros((N, O, C, 3, 3), np.float64)
    partb = np.zeros((N, O), np.float64)
    for n in prange(N):
        for h in range(H):
            for o in range(O):
                g = gy[n, o, h]
                s = 0.0
                for j in range(W):
                    s += g[j]
                partb[n, o] += s
            for c in range(C):
                for dy in range(3):
                    r = xp[n, c, h + dy]
                    # Four output channels per pass share the three shifted input loads.
                    o = 0
                    while o + 4 <= O:
                        g0 = gy[n, o, h]
                        g1 = gy[n, o + 1, h]
                        g2 = gy[n, o + 2, h]
                        g3 = gy[n, o + 3, h]
                        z = g0[0] * 0
                        s00 = z; s01 = z; s02 = z; s10 = z; s11 = z; s12 = z
                        s20 = z; s21 = z; s22 = z; s30 = z; s31 = z; s32 = z
                        for j in range(W):
                            ra = r[j]
                            rb = r[j + 1]
                            rc = r[j + 2]
                            s00 += g0[j] * ra; s01 += g0[j] * rb; s02 += g0[j] * rc
                            s10 += g1[j] * ra; s11 += g1[j] * rb; s12 += g1[j] * rc
                            s20 += g2[j] * ra; s21 += g2[j] * rb; s22 += g2[j] * rc
                            s30 += g3[j] * ra; s31 += g3[j] * rb; s32 += g3[j] * rc
                        p = part[n, o:o + 4, c, dy]
                        p[0, 0] += s00; p[0, 1] += s01; p[0, 2] += s02
                        p[1, 0] += s10; p[1, 1] += s11; p[1, 2] += s12
                        p[2, 0] += s20; p[2, 1] += s21; p[2, 2] += s22
                        p[3, 0] += s30; p[3, 1] += s31; p[3, 2] += s32
                        o += 4
                    while o < O:
                        g = gy[n, o, h]
                        z = g[0] * 0
                        s0 = z; s1 = z; s2 = z
                        for j in range(W):
                            s0 += g[j] * r[j]
                            s1 += g[j] * r[j + 1]
                            s2 += g[j] * r[j + 2]
                        part[n, o, c, dy, 0] += s0
                        part[n, o, c, dy, 1] += s1
                        part[n, o, c, dy, 2] += s2
                        o += 1
    gw = np.zeros((O, C, 3, 3), np.float64)
    gb = np.zeros(O, np.float64)
    for n in range(N):
        gw += part[n]
        gb += partb[n]
    return gw.astype(x.dtype), gb.astype(x.dtype)


# 1x1 convolutions are plain matrix products; BLAS beats hand loops here,
# so this backend shares the matmul implementation.
conv1x1_forward = _np_kernels.conv1x1_forward
conv1x1_grad_weight = _np_kernels.conv1x1_grad_weight


@njit(parallel=True, cache=True)
def maxpool2_forward(x):
    N, C, H, W = x.shape
    h2 = H // 2
    w2 = W // 2
    out = np.empty((N, C, h2, w2), x.dtype)
    idx = np.empty((N, C, h2, w2), np.uint8)
    for p in prange(N * C):
        n = p // C
        c = p % C
        for i in range(h2):
            for j in range(w2):
                best = x[n, c, 2 * i, 2 * j]
                k = 0
                v = x[n, c, 2 * i, 2 * j + 1]
                if v > best:
                    best = v
                    k = 1
                v = x[n, c, 2 * i + 1, 2 * j]
                if v > best:
                    best = v
                    k = 2
                v = x[n, c, 2 * i + 1, 2 * j + 1]
                if v > best:
                    best = v
                    k = 3
                out[n, c, i, j] = best
                idx[n, c, i, j] = k
    return out, idx


@njit(parallel=True, cache=True)
def maxpool2_backward(gy, idx):
    N, C, h2, w2 = gy.shape
    gx = np.zeros((N, C, 2 * h2, 2 * w2), gy.dtype)
    for p in prange(N * C):
        n = p // C
        c = p % C
        for i in range(h2):
            for j in range(w2):
                k = idx[n, c, i, j]
                gx[n, c, 2 * i + k // 2, 2 * j + k % 2] = gy[n, c, i, j]
    return gx


@njit(cache=True)
def _taps(n):
    i0 = np.empty(2 * n, np.int64)
    i1 = np.empty(2 * n, np.int64)
    w0 = np.empty(2 * n, np.float64)
    w1 = np.empty(2 * n, np.float64)
    for d in range(2 * n):
        s = (d + 0.5) / 2.0 - 0.5
        if s < 0.0:
            s = 0.0
        if s > n - 1:
            s = n - 1.0
        f = int(np.floor(s))
        i0[d] = f
        i1[d] = min(f + 1, n - 1)
        w1[d] = s - f
        w0[d] = 1.0 - w1[d]
    return i0, i1, w0, w1


@njit(parallel=True, cache=True, fastmath=_FM)
def upsample2_forward(x):
    N, C, H, W = x.shape
    r0, r1, rw0, rw1 = _taps(H)
    c0, c1, cw0, cw1 = _taps(W)
    out = np.empty((N, C, 2 * H, 2 * W), x.dtype)
    for p in prange(N * C):
        n = p // C
        c = p % C
        plane = x[n, c]
        for i in range(2 * H):
            a = rw0[i]
            bw = rw1[i]
            ra = plane[r0[i]]
            rb = plane[r1[i]]
            for j in range(2 * W):
                u = a * ra[c0[j]] + bw * rb[c0[j]]
                v = a * ra[c1[j]] + bw * rb[c1[j]]
                out[n, c, i, j] = cw0[j] * u + cw1[j] * v
    return out


@njit(parallel=True, cache=True, fastmath=_FM)
def upsample2_backward(gy):
    N, C, H2, W2 = gy.shape
    H = H2 // 2
    W = W2 // 2
    r0, r1, rw0, rw1 = _taps(H)
    c0, c1, cw0, cw1 = _taps(W)
    gx = np.zeros((N, C, H, W), gy.dtype)
    for p in prange(N * C):
        n = p // C
        c = p % C
        row = np.empty(W, np.float64)
        for i in range(H2):
            row[:] = 0.0
            for j in range(W2):
                g = gy[n, c, i, j]
                row[c0[j]] += cw0[j] * g
                row[c1[j]] += cw1[j] * g
            for j in range(W):
                gx[n, c, r0[i], j] += rw0[i] * row[j]
                gx[n, c, r1[i], j] += rw1[i] * row[j]
    return gx


@njit(parallel=True, cache=True)
def bn_stats(x):
    N, C, H, W = x.shape
    m = N * H * W
    mean = np.zeros(C, np.float64)
    var = np.zeros(C, np.float64)
    for c in prange(C):
        s = 0.0
        for n in range(N):
            for h in range(H):
                for w in range(W):
                    s += x[n, c, h, w]
        mu = s / m
        q = 0.0
        for n in range(N):
            for h in range(H):
                for w in range(W):
                    d = x[n, c, h, w] - mu
                    q += d * d
        mean[c] = mu
        var[c] = q / m
    return mean, var


@njit(parallel=True, cache=True, fastmath=_FM)
def bn_normalize(x, mean, invstd, gamma, beta):
    N, C, H, W = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    for p in prange(N * C):
        n = p // C
        c = p % C
        mu = x.dtype.type(mean[c])
        s = x.dtype.type(invstd[c])
        g = gamma[c]
        bt = beta[c]
        for h in range(H):
            for w in range(W):
                v = (x[n, c, h, w] - mu) * s
                xhat[n, c, h, w] = v
                y[n, c, h, w] = v * g + bt
    return y, xhat


@njit(parallel=True, cache=True, fastmath=_FM)
def bn_backward(gy, xhat, gamma, invstd):
    N, C, H, W = gy.shape
    m = N * H * W
    gx = np.empty_like(gy)
    ggamma = np.zeros(C, np.float64)
    gbeta = np.zeros(C, np.float64)
    for c in prange(C):
        sb = 0.0
        sg = 0.0
        for n in range(N):
            for h in range(H):
                for w in range(W):
                    g = gy[n, c, h, w]
                    sb += g
                    sg += g * xhat[n, c, h, w]
        gbeta[c] = sb
        ggamma[c] = sg
        scale = gy.dtype.type(gamma[c] * invstd[c] / m)
        mb = gy.dtype.type(sb)
        mg = gy.dtype.type(sg)
        fm = gy.dtype.type(m)
        for n in range(N):
            for h in range(H):
                for w in range(W):
                    gx[n, c, h, w] = scale * (fm * gy[n, c, h, w] - mb - xhat[n, c, h, w] * mg)
    return gx, ggamma.astype(gy.dtype), gbeta.astype(gy.dtype)


@njit(cache=True)
def _label_components(mask, offsets):
    D, H, W = mask.shape
    labels = np.zeros((D, H, W), np.int32)
    stack = np.empty(D * H * W, np.int64)
    count = 0
    for start in range(D * H * W):
        z0 = start // (H * W)
        y0 = (start // W) % H
        x0 = start % W
        if not mask[z0, y0, x0] or labels[z0, y0, x0] != 0:
            continue
        count += 1
        labels[z0, y0, x0] = count
        top = 0
        stack[0] = start
        top = 1
        while top > 0:
            top -= 1
            p = stack[top]
            z = p // (H * W)
            y = (p // W) % H
            x = p % W
            for k in range(offsets.shape[0]):
                zz = z + offsets[k, 0]
                yy = y + offsets[k, 1]
                xx = x + offsets[k, 2]
                if zz < 0 or zz >= D or yy < 0 or yy >= H or xx < 0 or xx >= W:
                    continue
                if mask[zz, yy, xx] and labels[zz, yy, xx] == 0:
                    labels[zz, yy, xx] = count
                    stack[top] = (zz * H + yy) * W + xx
                    top += 1
    return labels, count


def _neighbour_offsets(connectivity):
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                order = abs(dz) + abs(dy) + abs(dx)
                if order == 0:
                    continue
                if connectivity == 6 and order > 1:
                    continue
                if connectivity == 18 and order > 2:
                    continue
                offs.append((dz, dy, dx))
    return np.array(offs, dtype=np.int64)


def label_components(mask, connectivity):
    labels, count = _label_components(
        np.ascontiguousarray(mask, dtype=np.bool_), _neighbour_offsets(connectivity))
    return labels, int(count)
