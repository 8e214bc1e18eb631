"""Pure-numpy reference kernels.

Same signatures and semantics as the numba kernels in ``_numba.py``; selected
when ``TSEG_NUMBA=0`` or numba is not importable.  Convolutions go through
im2col + matmul one sample at a time to bound peak memory.
"""

import numpy as np
from scipy import ndimage


def _im2col3(xp, n, H, W):
    C = xp.shape[1]
    cols = np.empty((C, 3, 3, H, W), dtype=xp.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[n, :, dy:dy + H, dx:dx + W]
    return cols.reshape(C * 9, H * W)


def conv3x3_forward(x, w, b):
    N, C, H, W = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wm = w.reshape(O, C * 9)
    out = np.empty((N, O, H, W), dtype=x.dtype)
    for n in range(N):
        out[n] = (wm @ _im2col3(xp, n, H, W)).reshape(O, H, W)
    out += b.reshape(1, O, 1, 1)
    return out


def conv3x3_grad_weight(x, gy):
    N, C, H, W = x.shape
    O = gy.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gw = np.zeros((O, C * 9), dtype=np.float64)
    for n in range(N):
        gw += gy[n].reshape(O, H * W) @ _im2col3(xp, n, H, W).T
    gb = gy.sum(axis=(0, 2, 3), dtype=np.float64)
    return gw.reshape(O, C, 3, 3).astype(x.dtype), gb.astype(x.dtype)


def conv1x1_forward(x, w, b):
    N, C, H, W = x.shape
    O = w.shape[0]
    wm = w.reshape(O, C)
    out = np.empty((N, O, H, W), dtype=x.dtype)
    for n in range(N):
        out[n] = (wm @ x[n].reshape(C, H * W)).reshape(O, H, W)
    out += b.reshape(1, O, 1, 1)
    return out


def conv1x1_grad_weight(x, gy):
    N, C, H, W = x.shape
    O = gy.shape[1]
    gw = np.zeros((O, C), dtype=np.float64)
    for n in range(N):
        gw += gy[n].reshape(O, H * W) @ x[n].reshape(C, H * W).T
    gb = gy.sum(axis=(0, 2, 3), dtype=np.float64)
    return gw.reshape(O, C, 1, 1).astype(x.dtype), gb.astype(x.dtype)


def maxpool2_forward(x):
    N, C, H, W = x.shape
    win = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(N, C, H // 2, W // 2, 4)
    # np.argmax returns the first maximal index: the required tie-break.
    idx = np.argmax(win, axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(gy, idx):
    N, C, h, w = gy.shape
    gwin = np.zeros((N, C, h, w, 4), dtype=gy.dtype)
    np.put_along_axis(gwin, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    gx = gwin.reshape(N, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gx.reshape(N, C, 2 * h, 2 * w))


def upsample_taps(n):
    """Source indices and weights for 2x half-pixel bilinear along one axis."""
    d = np.arange(2 * n)
    s = np.clip((d + 0.5) / 2.0 - 0.5, 0.0, n - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = s - i0
    return i0, i1, 1.0 - frac, frac


def upsample2_forward(x):
    N, C, H, W = x.shape
    r0, r1, rw0, rw1 = upsample_taps(H)
    c0, c1, cw0, cw1 = upsample_taps(W)
    dt = x.dtype
    rows = x[:, :, r0, :] * rw0.astype(dt)[:, None] + x[:, :, r1, :] * rw1.astype(dt)[:, None]
    out = rows[:, :, :, c0] * cw0.astype(dt) + rows[:, :, :, c1] * cw1.astype(dt)
    return np.ascontiguousarray(out)


def upsample2_backward(gy):
    N, C, H2, W2 = gy.shape
    H, W = H2 // 2, W2 // 2
    r0, r1, rw0, rw1 = upsample_taps(H)
    c0, c1, cw0, cw1 = upsample_taps(W)
    dt = gy.dtype
    grows = np.zeros((N, C, H2, W), dtype=dt)
    np.add.at(grows, (slice(None), slice(None), slice(None), c0), gy * cw0.astype(dt))
    np.add.at(grows, (slice(None), slice(None), slice(None), c1), gy * cw1.astype(dt))
    gx = np.zeros((N, C, H, W), dtype=dt)
    np.add.at(gx, (slice(None), slice(None), r0), grows * rw0.astype(dt)[:, None])
    np.add.at(gx, (slice(None), slice(None), r1), grows * rw1.astype(dt)[:, None])
    return gx


def bn_stats(x):
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    centered = x - mean.reshape(1, -1, 1, 1).astype(x.dtype)
    var = np.mean(np.square(centered, dtype=np.float64), axis=(0, 2, 3))
    return mean, var


def bn_normalize(x, mean, invstd, gamma, beta):
    dt = x.dtype
    xhat = (x - mean.astype(dt).reshape(1, -1, 1, 1)) * invstd.astype(dt).reshape(1, -1, 1, 1)
    y = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return y, xhat


def bn_backward(gy, xhat, gamma, invstd):
    dt = gy.dtype
    m = gy.shape[0] * gy.shape[2] * gy.shape[3]
    gbeta = gy.sum(axis=(0, 2, 3), dtype=np.float64)
    ggamma = np.einsum("nchw,nchw->c", gy.astype(np.float64), xhat.astype(np.float64))
    scale = (gamma.reshape(-1).astype(np.float64) * invstd / m).astype(dt).reshape(1, -1, 1, 1)
    gx = scale * (m * gy - gbeta.astype(dt).reshape(1, -1, 1, 1)
                  - xhat * ggamma.astype(dt).reshape(1, -1, 1, 1))
    return gx, ggamma.astype(dt), gbeta.astype(dt)


def label_components(mask, connectivity):
    rank = {6: 1, 18: 2, 26: 3}[connectivity]
    structure = ndimage.generate_binary_structure(3, rank)
    labels, count = ndimage.label(mask, structure=structure)
    if count == 0:
        return labels.astype(np.int32), 0
    # Renumber so component ids follow their minimal linear index.
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    order = ids[keep][np.argsort(first[keep], kind="stable")]
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order] = np.arange(1, count + 1, dtype=np.int32)
    return remap[labels], int(count)
