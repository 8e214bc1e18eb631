"""Central finite-difference checks for every engine op and both losses.

Each check builds random float64 inputs, reduces the op output to a scalar
``sum(op(x) * R)`` with fixed random weights ``R`` and compares the taped
gradient with ``(f(x + h) - f(x - h)) / 2h`` coordinate by coordinate.  The
error of one coordinate is ``|a - n| / max(|a| + |n|, floor)``.
"""

import dataclasses

import numpy as np

from . import engine as E
from . import network as net
from . import training as T
from .rng import stream

STEP = 1e-5
FLOOR = 1e-8
TOLERANCE = 1e-4
MAX_COORDS = 48
# The composite network has thousands of ReLU/max-pool kinks; a BN gamma moves
# a whole channel, so a 1e-5 step can straddle one.  It uses a smaller step,
# and a floor above the ~1e-10 rounding noise that step leaves on gradients
# that are exactly zero (dead ReLUs).
STEPS = {"network": 1e-6}
FLOORS = {"network": 1e-5}


@dataclasses.dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    coords: int

    @property
    def ok(self):
        return self.max_rel_error < TOLERANCE


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-2.0, 2.0, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _distinct(rng, shape):
    # Well-separated values so max-pool winners never swap under the FD step.
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * (4.0 / n) - 2.0) + rng.uniform(0, 1e-3, shape)


# Each builder returns (inputs, fn): inputs is a dict of float64 arrays that
# are differentiated, fn maps a dict of Tensors to an output Tensor.

def _conv(k):
    def build(rng):
        ci, co = rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(3, 7), rng.integers(3, 7)
        inputs = {"x": rng.uniform(-2, 2, (2, ci, h, w)),
                  "w": rng.uniform(-1, 1, (co, ci, k, k)),
                  "b": rng.uniform(-1, 1, (1, co, 1, 1))}
        return inputs, lambda t: E.conv2d_same(t["x"], t["w"], t["b"])
    return build


def _maxpool(rng):
    shape = (2, int(rng.integers(1, 3)), 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4)))
    return {"x": _distinct(rng, shape)}, lambda t: E.maxpool2(t["x"])


def _upsample(rng):
    shape = (2, int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    return {"x": rng.uniform(-2, 2, shape)}, lambda t: E.upsample_bilinear2(t["x"])


def _batchnorm(training):
    def build(rng):
        c = int(rng.integers(1, 4))
        inputs = {"x": rng.uniform(-2, 2, (3, c, 3, 4)),
                  "gamma": rng.uniform(0.5, 1.5, (c,)),
                  "beta": rng.uniform(-1, 1, (c,))}
        rm = rng.uniform(-0.5, 0.5, (c,))
        rv = rng.uniform(0.5, 2.0, (c,))

        def fn(t):
            return E.batchnorm(t["x"], t["gamma"], t["beta"], E.Tensor(rm.copy().reshape(1, c, 1, 1)),
                               E.Tensor(rv.copy().reshape(1, c, 1, 1)), training=training)
        return inputs, fn
    return build


def _reshape_bn(inputs):
    # gamma/beta enter the engine as [1, C, 1, 1] tensors
    return {k: (v.reshape(1, -1, 1, 1) if k in ("gamma", "beta") else v) for k, v in inputs.items()}


def _relu(rng):
    return {"x": _away_from_zero(rng, (2, 2, 3, 4))}, lambda t: E.relu(t["x"])


def _sigmoid(rng):
    return {"x": rng.uniform(-2, 2, (2, 2, 3, 4))}, lambda t: E.sigmoid(t["x"])


def _mul(rng):
    s = (2, 2, 3, 4)
    return {"a": rng.uniform(-2, 2, s), "b": rng.uniform(-2, 2, s)}, lambda t: E.mul(t["a"], t["b"])


def _add(rng):
    s = (2, 2, 3, 4)
    return {"a": rng.uniform(-2, 2, s), "b": rng.uniform(-2, 2, s)}, lambda t: E.add(t["a"], t["b"])


def _concat(rng):
    inputs = {f"x{i}": rng.uniform(-2, 2, (2, int(rng.integers(1, 4)), 3, 3)) for i in range(3)}
    return inputs, lambda t: E.concat([t["x0"], t["x1"], t["x2"]])


def _select(rng):
    c = int(rng.integers(2, 6))
    chans = rng.choice(c, size=int(rng.integers(1, c + 1)), replace=False).tolist()
    return {"x": rng.uniform(-2, 2, (2, c, 3, 3))}, lambda t: E.select_channels(t["x"], chans)


def _sum_all(rng):
    return {"x": rng.uniform(-2, 2, (2, 3, 4, 2))}, lambda t: E.sum_all(t["x"])


def _scale(rng):
    f = float(rng.uniform(-3, 3))
    return {"x": rng.uniform(-2, 2, (2, 2, 3, 3))}, lambda t: T.scale(t["x"], f)


def _loss(kind):
    def build(rng):
        shape = (3, 1, 4, 5)
        target = (rng.random(shape) < 0.4).astype(np.uint8)
        pred = rng.uniform(0.02, 0.98, shape)
        if kind == "dice":
            eps = float(rng.choice([0.0, 1e-6, 1.0]))
            return {"p": pred}, lambda t: T.dice_loss(t["p"], target, eps)
        alpha, beta = rng.uniform(0.1, 0.9, 2)
        return {"p": pred}, lambda t: T.tversky_loss(t["p"], target, alpha, beta, 1e-6)
    return build


def _network(rng):
    """The whole network on a tiny 16x16 input: every op composed, BN in training mode."""
    cfg = net.NetworkConfig(input_height=16, input_width=16)
    params = net.build_network(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    x = rng.normal(0, 1, (3, 4, 16, 16))
    targets = (rng.random((3, 3, 16, 16)) < 0.3).astype(np.uint8)
    tcfg = T.TrainConfig()
    names = [n for n, p in params.items() if p.trainable]
    chosen = [names[i] for i in rng.choice(len(names), size=6, replace=False)]
    inputs = {"x": x}
    inputs.update({n: params[n].data.copy() for n in chosen})

    def fn(t):
        for n in chosen:
            params[n].value = t[n]
        out = net.forward(params, t["x"], mode="train")
        return T.batch_loss(out, targets, tcfg)
    return inputs, fn


CHECKS = {
    "conv2d_same_3x3": _conv(3),
    "conv2d_same_1x1": _conv(1),
    "maxpool2": _maxpool,
    "upsample_bilinear2": _upsample,
    "batchnorm_train": _batchnorm(True),
    "batchnorm_infer": _batchnorm(False),
    "relu": _relu,
    "sigmoid": _sigmoid,
    "mul": _mul,
    "add": _add,
    "concat": _concat,
    "select_channels": _select,
    "sum_all": _sum_all,
    "scale": _scale,
    "dice_loss": _loss("dice"),
    "tversky_loss": _loss("tversky"),
    "network": _network,
}


def _as_tensors(arrays, grad):
    out = {}
    for k, v in arrays.items():
        v = v.reshape(1, -1, 1, 1) if v.ndim == 1 else v
        out[k] = E.Tensor(v, requires_grad=grad, dtype=np.float64)
    return out


def check_instance(inputs, fn, rng, max_coords=MAX_COORDS, step=STEP, floor=FLOOR):
    """Max relative error and number of coordinates checked for one instance."""
    with E.precision(np.float64):
        probe = fn(_as_tensors(inputs, False))
        weights = rng.uniform(-1, 1, probe.shape)

        def objective(arrays):
            with E.no_grad():
                y = fn(_as_tensors(arrays, False))
            return float(np.sum(y.data * weights))

        leaves = _as_tensors(inputs, True)
        with E.Tape() as tape:
            y = fn(leaves)
            loss = E.sum_all(E.mul(y, E.Tensor(weights)))
        tape.backward(loss)

        worst, checked = 0.0, 0
        for name, arr in inputs.items():
            analytic = leaves[name].grad.reshape(arr.shape)
            flat = np.arange(arr.size)
            if arr.size > max_coords:
                flat = rng.choice(arr.size, size=max_coords, replace=False)
            for i in flat:
                plus = {k: v.copy() for k, v in inputs.items()}
                minus = {k: v.copy() for k, v in inputs.items()}
                plus[name].flat[i] += step
                minus[name].flat[i] -= step
                numeric = (objective(plus) - objective(minus)) / (2 * step)
                a = float(analytic.flat[i])
                err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
                worst = max(worst, err)
                checked += 1
    return worst, checked


def run_check(name, instances=20, seed=0):
    build = CHECKS[name]
    worst, coords = 0.0, 0
    for k in range(instances):
        rng = stream(seed, "gradcheck", k, sorted(CHECKS).index(name))
        with E.precision(np.float64):
            inputs, fn = build(rng)
        if name.startswith("batchnorm"):
            inputs = _reshape_bn(inputs)
        err, n = check_instance(inputs, fn, rng, step=STEPS.get(name, STEP),
                                floor=FLOORS.get(name, FLOOR))
        worst = max(worst, err)
        coords += n
    return CheckResult(name, instances, worst, coords)


def run_all(instances=20, seed=0, names=None):
    return [run_check(n, instances, seed) for n in (names or CHECKS)]
