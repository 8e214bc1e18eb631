"""Kernel backend selection.

The numba kernels are used when numba imports cleanly, unless the
environment variable ``TSEG_NUMBA`` is set to ``0``.  Both backends expose
the same functions; ``use_backend`` switches at runtime (tests and the
benchmark compare the two).
"""

import os
import warnings

import numpy as np

from . import _numpy

warnings.filterwarnings("ignore", message="The TBB threading layer")

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba missing
    _numba = None

_BACKENDS = {"numpy": _numpy}
if _numba is not None:
    _BACKENDS["numba"] = _numba

_active = None


def _default_backend():
    if os.environ.get("TSEG_NUMBA", "1") == "0" or _numba is None:
        return "numpy"
    return "numba"


def use_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels for subsequent calls."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}")
    _active = _BACKENDS[name]


def backend_name():
    return "numba" if _active is _numba and _numba is not None else "numpy"


def available_backends():
    return sorted(_BACKENDS)


use_backend(_default_backend())


def conv_forward(x, w, b):
    if w.shape[2] == 3:
        return _active.conv3x3_forward(x, w, b)
    return _active.conv1x1_forward(x, w, b)


def conv_backward(x, w, gy, need_x=True):
    """Gradients of a stride-1 same conv w.r.t. input, weight and bias."""
    k = w.shape[2]
    if k == 3:
        gw, gb = _active.conv3x3_grad_weight(x, gy)
    else:
        gw, gb = _active.conv1x1_grad_weight(x, gy)
    gx = None
    if need_x:
        # Input gradient is the same conv with flipped, channel-transposed kernels.
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        zero = np.zeros(wt.shape[0], dtype=gy.dtype)
        gx = conv_forward(gy, wt, zero)
    return gx, gw, gb


def maxpool2_forward(x):
    return _active.maxpool2_forward(x)


def maxpool2_backward(gy, idx):
    return _active.maxpool2_backward(gy, idx)


def upsample2_forward(x):
    return _active.upsample2_forward(x)


def upsample2_backward(gy):
    return _active.upsample2_backward(gy)


def bn_stats(x):
    return _active.bn_stats(x)


def bn_normalize(x, mean, invstd, gamma, beta):
    return _active.bn_normalize(x, mean, invstd, gamma, beta)


def bn_backward(gy, xhat, gamma, invstd):
    return _active.bn_backward(gy, xhat, gamma, invstd)


def label_components(mask, connectivity=26):
    """Label connected foreground components of a 3D boolean mask.

    Returns ``(labels, count)``; component ids 1..count are ordered by each
    component's minimal linear (C-order) index.
    """
    if connectivity not in (6, 18, 26):
        raise ValueError("connectivity must be 6, 18 or 26")
    return _active.label_components(mask, connectivity)
