"""Rank-4 tensors with tape-based reverse-mode differentiation.

Only the operators the segmentation network needs are provided.  Every op
checks its output for NaN/Inf and raises :class:`NumericError`.

Usage::

    with Tape() as tape:
        y = relu(conv2d_same(x, w, b))
        loss = sum_all(y)
    tape.backward(loss)      # gradients land in w.grad, b.grad

Outside a ``Tape`` context nothing is recorded, so inference keeps no
intermediate buffers alive.
"""

import contextlib
import itertools
import threading

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NumericError

_ids = itertools.count(1)
_local = threading.local()

DTYPE = np.float32


def default_dtype():
    return getattr(_local, "dtype", DTYPE)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with (float64 for gradchecks)."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    """Dense [N, C, H, W] array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "tid", "produced")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        if arr.ndim != 4:
            raise DimensionError(f"tensors are rank 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.tid = next(_ids)
        self.produced = False

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """A named model entry: a leaf tensor plus its trainable flag.

    Batch-norm running statistics are non-trainable parameters; their
    gradient buffer exists but is never written.
    """

    __slots__ = ("value", "trainable")

    def __init__(self, value, trainable=True):
        arr = np.ascontiguousarray(value)
        self.value = Tensor(arr, requires_grad=trainable, dtype=arr.dtype)
        if not trainable:
            self.value.grad = np.zeros_like(arr)
        self.trainable = trainable

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.data.size


class Node:
    """One recorded op: what produced ``out_id`` from ``input_ids``."""

    __slots__ = ("nid", "op", "input_ids", "out_id", "backward_fn")

    def __init__(self, nid, op, input_ids, out_id, backward_fn):
        self.nid = nid
        self.op = op
        self.input_ids = input_ids
        self.out_id = out_id
        self.backward_fn = backward_fn


class Tape:
    """Records ops executed inside its context and replays them backwards."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def record(self, op, inputs, out, backward_fn):
        for t in inputs:
            if t.requires_grad and not t.produced:
                self.leaves[t.tid] = t
        node = Node(len(self.nodes), op, tuple(t.tid for t in inputs), out.tid, backward_fn)
        self.nodes.append(node)
        out.produced = True
        return node

    def backward(self, loss):
        """Accumulate dloss/dleaf into every reachable leaf's ``grad``; consumes the tape."""
        if loss.shape != (1, 1, 1, 1):
            raise ContractError(f"backward needs a scalar [1,1,1,1] loss, got {loss.shape}")
        grads = {loss.tid: np.ones_like(loss.data)}
        # Nodes are appended in execution order, which is a topological order.
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for tid, gi in zip(node.input_ids, in_grads):
                if gi is None:
                    continue
                if tid in grads:
                    grads[tid] = grads[tid] + gi
                else:
                    grads[tid] = gi
        for tid, leaf in self.leaves.items():
            g = grads.get(tid)
            if g is not None:
                leaf.grad += g.astype(leaf.grad.dtype, copy=False)
        self.nodes = []
        self.leaves = {}


def active_tape():
    return getattr(_local, "tape", None)


@contextlib.contextmanager
def no_grad():
    prev = getattr(_local, "tape", None)
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = prev


def _check_finite(op, arr):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def apply(op, inputs, out_data, make_backward):
    """Wrap ``out_data`` as the result of ``op`` and record it if differentiable.

    ``make_backward`` is called only when recording; it returns a function
    mapping the output gradient to a tuple of input gradients (``None`` for
    inputs that need none).  Extension ops such as the losses use this.
    """
    _check_finite(op, out_data)
    needs = tuple(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=False, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(needs):
        out.requires_grad = True
        tape.record(op, inputs, out, make_backward(needs))
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def conv2d_same(x, w, b):
    """Stride-1 convolution with zero 'same' padding; ``w`` is [C_out, C_in, k, k], k in {1, 3}.

    ``b`` is a [1, C_out, 1, 1] tensor.
    """
    O, Ci, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise DimensionError(f"conv2d_same supports 1x1 and 3x3 kernels, got {k}x{k2}")
    if x.shape[1] != Ci:
        raise DimensionError(f"conv2d_same: input has {x.shape[1]} channels, kernel expects {Ci}")
    if b.data.size != O:
        raise DimensionError(f"conv2d_same: bias length {b.data.size} != {O}")
    xd, wd = x.data, w.data
    out = kernels.conv_forward(xd, wd, b.data.reshape(O))

    def make_backward(needs):
        def backward(gy):
            gx, gw, gb = kernels.conv_backward(xd, wd, gy, need_x=needs[0])
            return gx, gw if needs[1] else None, gb.reshape(1, O, 1, 1) if needs[2] else None
        return backward

    return apply("conv2d_same", (x, w, b), out, make_backward)


def maxpool2(x):
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    out, idx = kernels.maxpool2_forward(x.data)

    def make_backward(needs):
        return lambda gy: (kernels.maxpool2_backward(gy, idx),)

    return apply("maxpool2", (x,), out, make_backward)


def upsample_bilinear2(x):
    """2x bilinear upsampling, half-pixel centres, edge-clamped source coordinates."""
    out = kernels.upsample2_forward(x.data)

    def make_backward(needs):
        return lambda gy: (kernels.upsample2_backward(gy),)

    return apply("upsample_bilinear2", (x,), out, make_backward)


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.01, eps=1e-3):
    """Per-channel batch normalisation.

    In training mode the batch statistics (biased variance) normalise the
    input and the running tensors are updated in place with
    ``running = (1 - momentum) * running + momentum * batch``.
    """
    C = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if p.data.size != C:
            raise DimensionError(f"batchnorm: {name} has {p.data.size} entries, input has {C} channels")
    g = gamma.data.reshape(C)
    bt = beta.data.reshape(C)
    if training:
        mean, var = kernels.bn_stats(x.data)
        rm = running_mean.data.reshape(C)
        rv = running_var.data.reshape(C)
        rm[:] = (1.0 - momentum) * rm + momentum * mean
        rv[:] = (1.0 - momentum) * rv + momentum * var
    else:
        mean = running_mean.data.reshape(C).astype(np.float64)
        var = running_var.data.reshape(C).astype(np.float64)
    invstd = 1.0 / np.sqrt(var + eps)
    y, xhat = kernels.bn_normalize(x.data, mean, invstd, g, bt)

    def make_backward(needs):
        def backward(gy):
            if training:
                gx, gg, gb = kernels.bn_backward(gy, xhat, g, invstd)
            else:
                # Inference statistics are constants: the map is affine per channel.
                gx = gy * (g * invstd.astype(gy.dtype)).reshape(1, C, 1, 1)
                gg = np.einsum("nchw,nchw->c", gy, xhat)
                gb = gy.sum(axis=(0, 2, 3))
            shape = gamma.shape
            return (gx if needs[0] else None,
                    gg.reshape(shape) if needs[1] else None,
                    gb.reshape(shape) if needs[2] else None,
                    None, None)
        return backward

    return apply("batchnorm", (x, gamma, beta, running_mean, running_var), y, make_backward)


def relu(x):
    out = np.maximum(x.data, 0)

    def make_backward(needs):
        return lambda gy: (gy * (out > 0),)

    return apply("relu", (x,), out, make_backward)


def sigmoid(x):
    d = x.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    # Keep the result strictly inside (0, 1) even where float32 saturates.
    np.clip(out, np.finfo(d.dtype).tiny, np.nextafter(d.dtype.type(1), d.dtype.type(0)), out=out)

    def make_backward(needs):
        return lambda gy: (gy * out * (1 - out),)

    return apply("sigmoid", (x,), out, make_backward)


def mul(a, b):
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def make_backward(needs):
        return lambda gy: (gy * bd if needs[0] else None, gy * ad if needs[1] else None)

    return apply("mul", (a, b), ad * bd, make_backward)


def add(a, b):
    _same_shape("add", a, b)

    def make_backward(needs):
        return lambda gy: (gy, gy)

    return apply("add", (a, b), a.data + b.data, make_backward)


def concat(tensors):
    """Concatenate along the channel axis."""
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != first[0] or t.shape[2:] != first[2:]:
            raise DimensionError(f"concat: incompatible shapes {first} and {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def make_backward(needs):
        def backward(gy):
            bounds = np.cumsum([0] + sizes)
            return tuple(np.ascontiguousarray(gy[:, bounds[i]:bounds[i + 1]]) if needs[i] else None
                         for i in range(len(sizes)))
        return backward

    return apply("concat", tuple(tensors), out, make_backward)


def select_channels(x, channels):
    """Pick a subset of channels (in the given order)."""
    channels = list(channels)
    C = x.shape[1]
    if any(c < 0 or c >= C for c in channels):
        raise DimensionError(f"select_channels: indices {channels} out of range for {C} channels")
    out = np.ascontiguousarray(x.data[:, channels])

    def make_backward(needs):
        def backward(gy):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None), channels), gy)
            return (gx,)
        return backward

    return apply("select_channels", (x,), out, make_backward)


def sum_all(x):
    s = np.array(x.data.sum(dtype=np.float64), dtype=x.data.dtype).reshape(1, 1, 1, 1)
    shape = x.shape

    def make_backward(needs):
        return lambda gy: (np.full(shape, gy.reshape(()), dtype=gy.dtype),)

    return apply("sum_all", (x,), s, make_backward)
