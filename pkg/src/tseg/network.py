"""The three-path / three-branch segmentation CNN.

Layout of the default configuration (channels x height x width)::

    input 4x200x168 (Flair, T2, T1ce, T1)
    feature extraction, three levels of conv3x3 + BN + ReLU + maxpool2:
        mono    4 sub-paths, one modality each, 4 kernels
        paired  Flair+T2 and T1ce+T1, 8 kernels
        cross   all four modalities, 16 kernels
      the 48 pre-pool maps of each level form that level's skip tensor
    bottleneck  2 x (conv3x3 16 + BN + ReLU) at 25x21
    branches WT / ET / NET, independent parameters, three levels each:
        upsample x2, multiply by a 1x1 conv of the skip tensor,
        levels 1-2: 2 x (conv3x3 + BN + ReLU)
        level 3:    conv3x3 + ReLU, conv1x1 -> 1, sigmoid
"""

import dataclasses
import enum
import io
import os
import struct
from collections import namedtuple

import numpy as np

from . import engine as E
from .errors import ContractError, DimensionError, FormatError
from .rng import stream

PATHS = ("mono", "paired", "cross")
MONO_GROUPS = ((0,), (1,), (2,), (3,))
PAIRED_GROUPS = ((0, 1), (2, 3))
LEVELS = 3


class BranchId(enum.Enum):
    WT = "wt"
    ET = "et"
    NET = "net"


BranchOutputs = namedtuple("BranchOutputs", ["wt", "et", "net"])


@dataclasses.dataclass(frozen=True)
class NetworkConfig:
    input_height: int = 200
    input_width: int = 168
    mono_kernels: int = 4
    paired_kernels: int = 8
    cross_kernels: int = 16
    bottleneck_kernels: int = 16
    branch_kernels: int = 16
    bn_param_accounting: int = 4
    bn_momentum: float = 0.01
    bn_eps: float = 1e-3
    modulation: str = "mul"
    paths: tuple = PATHS
    branches: tuple = ("wt", "et", "net")

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        object.__setattr__(self, "branches", tuple(self.branches))
        self.validate()

    def validate(self):
        if self.input_height % 8 or self.input_width % 8:
            raise ContractError("input height and width must be divisible by 8 (three 2x pools)")
        if not self.paths or any(p not in PATHS for p in self.paths):
            raise ContractError(f"paths must be a non-empty subset of {PATHS}")
        valid = {b.value for b in BranchId}
        if not self.branches or any(b not in valid for b in self.branches):
            raise ContractError(f"branches must be a non-empty subset of {sorted(valid)}")
        if self.modulation not in ("mul", "add"):
            raise ContractError("modulation must be 'mul' or 'add'")
        for name in ("mono_kernels", "paired_kernels", "cross_kernels",
                     "bottleneck_kernels", "branch_kernels"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")

    @property
    def skip_channels(self):
        c = 0
        if "mono" in self.paths:
            c += len(MONO_GROUPS) * self.mono_kernels
        if "paired" in self.paths:
            c += len(PAIRED_GROUPS) * self.paired_kernels
        if "cross" in self.paths:
            c += self.cross_kernels
        return c

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["paths"] = list(self.paths)
        d["branches"] = list(self.branches)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def subpaths(self):
        """(name prefix, input channels, kernels) for every FE sub-path, in skip order."""
        out = []
        if "mono" in self.paths:
            out += [(f"fe.mono.{i}", g, self.mono_kernels) for i, g in enumerate(MONO_GROUPS)]
        if "paired" in self.paths:
            out += [(f"fe.paired.{i}", g, self.paired_kernels) for i, g in enumerate(PAIRED_GROUPS)]
        if "cross" in self.paths:
            out.append(("fe.cross", (0, 1, 2, 3), self.cross_kernels))
        return out


class ModelParams:
    """Name -> Parameter registry, iterated in lexicographic name order."""

    def __init__(self, params, config, seed=None):
        self._params = dict(sorted(params.items()))
        self.config = config
        self.seed = seed

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable(self):
        return [(n, p) for n, p in self._params.items() if p.trainable]

    def zero_grad(self):
        for p in self._params.values():
            p.value.zero_grad()

    def freeze(self, prefix):
        """Mark every trainable parameter under ``prefix`` as frozen.

        Batch-norm layers whose scale is frozen run on their running
        statistics and stop updating them.
        """
        hit = False
        for name, p in self._params.items():
            if name.startswith(prefix) and p.trainable:
                p.trainable = False
                p.value.requires_grad = False
                hit = True
        if not hit:
            raise ContractError(f"no trainable parameters under {prefix!r}")

    def copy(self):
        fresh = {}
        for name, p in self._params.items():
            q = E.Parameter(p.data.copy(), trainable=p.trainable)
            fresh[name] = q
        return ModelParams(fresh, self.config, self.seed)

    def state(self):
        return {n: p.data for n, p in self._params.items()}


def he_uniform_limit(fan_in):
    return float(np.sqrt(6.0 / fan_in))


def _layer_specs(config):
    """Yield (name, kind, shape) for every parameter tensor of ``config``."""
    specs = []

    def conv(prefix, cin, cout, k):
        specs.append((f"{prefix}.w", "weight", (cout, cin, k, k)))
        specs.append((f"{prefix}.b", "bias", (1, cout, 1, 1)))

    def bn(prefix, c):
        specs.append((f"{prefix}.gamma", "gamma", (1, c, 1, 1)))
        specs.append((f"{prefix}.beta", "beta", (1, c, 1, 1)))
        specs.append((f"{prefix}.running_mean", "running_mean", (1, c, 1, 1)))
        specs.append((f"{prefix}.running_var", "running_var", (1, c, 1, 1)))

    for prefix, group, k in config.subpaths():
        cin = len(group)
        for level in range(1, LEVELS + 1):
            conv(f"{prefix}.conv{level}", cin, k, 3)
            bn(f"{prefix}.bn{level}", k)
            cin = k
    bk = config.bottleneck_kernels
    conv("bottleneck.conv1", config.skip_channels, bk, 3)
    bn("bottleneck.bn1", bk)
    conv("bottleneck.conv2", bk, bk, 3)
    bn("bottleneck.bn2", bk)
    f = config.branch_kernels
    for branch in config.branches:
        cin = bk
        for level in (1, 2, 3):
            base = f"branch.{branch}.level{level}"
            conv(f"{base}.skip", config.skip_channels, cin, 1)
            conv(f"{base}.conv1", cin, f, 3)
            if level < 3:
                bn(f"{base}.bn1", f)
                conv(f"{base}.conv2", f, f, 3)
                bn(f"{base}.bn2", f)
            else:
                conv(f"{base}.out", f, 1, 1)
            cin = f
    return specs


def build_network(config=None, seed=0, dtype=np.float32):
    """Create freshly initialised parameters.

    Conv weights are he_uniform, U(-L, L) with L = sqrt(6 / (k*k*C_in));
    biases and BN shifts start at zero, BN scales and running variances at one.
    """
    config = config or NetworkConfig()
    rng = stream(seed, "init")
    params = {}
    # Sorted draw order keeps initialisation independent of construction order.
    for name, kind, shape in sorted(_layer_specs(config)):
        if kind == "weight":
            fan_in = shape[1] * shape[2] * shape[3]
            lim = he_uniform_limit(fan_in)
            value = rng.uniform(-lim, lim, size=shape).astype(dtype)
        elif kind in ("gamma", "running_var"):
            value = np.ones(shape, dtype=dtype)
        else:
            value = np.zeros(shape, dtype=dtype)
        params[name] = E.Parameter(value, trainable=kind not in ("running_mean", "running_var"))
    return ModelParams(params, config, seed)


def infer_config(names_shapes):
    """Recover a NetworkConfig from parameter names and shapes (used after loading)."""
    shapes = dict(names_shapes)
    paths = tuple(p for p in PATHS if any(n.startswith(f"fe.{p}.") for n in shapes))
    branches = tuple(b.value for b in BranchId if any(n.startswith(f"branch.{b.value}.") for n in shapes))
    if not paths or not branches or "bottleneck.conv1.w" not in shapes:
        raise FormatError("parameter names do not describe a segmentation network")
    kw = dict(paths=paths, branches=branches)
    if "mono" in paths:
        kw["mono_kernels"] = shapes["fe.mono.0.conv1.w"][0]
    if "paired" in paths:
        kw["paired_kernels"] = shapes["fe.paired.0.conv1.w"][0]
    if "cross" in paths:
        kw["cross_kernels"] = shapes["fe.cross.conv1.w"][0]
    kw["bottleneck_kernels"] = shapes["bottleneck.conv1.w"][0]
    kw["branch_kernels"] = shapes[f"branch.{branches[0]}.level1.conv1.w"][0]
    return NetworkConfig(**kw)


def _conv(params, prefix, x):
    return E.conv2d_same(x, params[f"{prefix}.w"].value, params[f"{prefix}.b"].value)


def _bn(params, prefix, x, training, config):
    gamma = params[f"{prefix}.gamma"]
    # A frozen BN layer behaves as in inference: running statistics, no update.
    use_batch = training and gamma.trainable
    return E.batchnorm(x, gamma.value, params[f"{prefix}.beta"].value,
                       params[f"{prefix}.running_mean"].value,
                       params[f"{prefix}.running_var"].value,
                       training=use_batch, momentum=config.bn_momentum, eps=config.bn_eps)


def forward(params, batch, mode="infer", trace=None, return_skips=False):
    """Run the network on a normalised [N, 4, H, W] batch.

    Returns ``BranchOutputs(wt, et, net)`` of [N, 1, H, W] probability maps
    (``None`` for branches the config disables).  With ``return_skips`` the
    three skip tensors (full, half, quarter resolution) follow as a second
    value.  ``trace``, if a list, receives ``(stage, (H, W))`` entries.
    """
    if mode not in ("train", "infer"):
        raise ContractError("mode must be 'train' or 'infer'")
    config = params.config
    training = mode == "train"
    if not isinstance(batch, E.Tensor):
        batch = E.Tensor(batch)
    N, C, H, W = batch.shape
    if C != 4 or H != config.input_height or W != config.input_width:
        raise DimensionError(
            f"expected input [N, 4, {config.input_height}, {config.input_width}], got {batch.shape}")

    def note(stage, t):
        if trace is not None:
            trace.append((stage, t.shape[2:]))

    note("input", batch)
    streams = [(prefix, E.select_channels(batch, group)) for prefix, group, _ in config.subpaths()]
    skips = []
    for level in range(1, LEVELS + 1):
        pre_pool = []
        pooled = []
        for prefix, x in streams:
            y = E.relu(_bn(params, f"{prefix}.bn{level}", _conv(params, f"{prefix}.conv{level}", x),
                           training, config))
            pre_pool.append(y)
            pooled.append((prefix, E.maxpool2(y)))
        skips.append(E.concat(pre_pool) if len(pre_pool) > 1 else pre_pool[0])
        streams = pooled
        note(f"fe.level{level}", streams[0][1])
    x = E.concat([t for _, t in streams]) if len(streams) > 1 else streams[0][1]
    for i in (1, 2):
        x = E.relu(_bn(params, f"bottleneck.bn{i}", _conv(params, f"bottleneck.conv{i}", x),
                       training, config))
    note("bottleneck", x)
    bottleneck = x

    outputs = {}
    for branch in config.branches:
        x = bottleneck
        for level in (1, 2, 3):
            base = f"branch.{branch}.level{level}"
            x = E.upsample_bilinear2(x)
            scale = _conv(params, f"{base}.skip", skips[LEVELS - level])
            x = E.mul(x, scale) if config.modulation == "mul" else E.add(x, scale)
            if level < 3:
                x = E.relu(_bn(params, f"{base}.bn1", _conv(params, f"{base}.conv1", x), training, config))
                x = E.relu(_bn(params, f"{base}.bn2", _conv(params, f"{base}.conv2", x), training, config))
            else:
                x = E.relu(_conv(params, f"{base}.conv1", x))
                x = E.sigmoid(_conv(params, f"{base}.out", x))
            if branch == config.branches[0]:
                note(f"branch.level{level}", x)
        outputs[branch] = x
    out = BranchOutputs(outputs.get("wt"), outputs.get("et"), outputs.get("net"))
    if return_skips:
        return out, tuple(skips)
    return out


def predict_probabilities(params, images, chunk=8):
    """Inference over a stack of slices [S, 4, H, W] in chunks; returns float32 [3, S, H, W].

    Rows follow (WT, ET, NET); disabled branches come back as zeros.
    """
    S = images.shape[0]
    out = np.zeros((3, S, images.shape[2], images.shape[3]), dtype=np.float32)
    with E.no_grad():
        for start in range(0, S, chunk):
            res = forward(params, images[start:start + chunk], mode="infer")
            for i, t in enumerate(res):
                if t is not None:
                    out[i, start:start + chunk] = t.data[:, 0]
    return out


LayerCount = namedtuple("LayerCount", ["layer", "trainable", "running", "total"])

TABLE_ROWS = ("1", "2", "3", "4", "5", "6", "7", "SC1", "SC2", "SC3")


def layer_row(name):
    """Map a parameter name to its row of the configuration table."""
    parts = name.split(".")
    if parts[0] == "fe":
        layer = next(p for p in parts if p.startswith(("conv", "bn")))
        return layer.lstrip("convbn")
    if parts[0] == "bottleneck":
        return "4"
    if parts[0] == "branch":
        level = int(parts[2][len("level"):])
        if parts[3] == "skip":
            return f"SC{level}"
        return str(4 + level)
    raise ValueError(f"unrecognised parameter name {name!r}")


def count_parameters(params):
    """Per-row parameter counts; running statistics are counted in the totals."""
    acc = {row: [0, 0] for row in TABLE_ROWS}
    for name, p in params.items():
        row = layer_row(name)
        if p.trainable or not name.endswith(("running_mean", "running_var")):
            acc[row][0] += p.size
        else:
            acc[row][1] += p.size
    rows = [LayerCount(r, t, s, t + s) for r, (t, s) in acc.items()]
    return rows, sum(r.total for r in rows)


# -- model file --------------------------------------------------------------

MAGIC = b"TSEG"
VERSION = 1


def save_model(params, path):
    """Write parameters in the TSEG v1 binary layout (little-endian float32)."""
    buf = io.BytesIO()
    names = params.names()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(names)))
    for name in names:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    tmp = f"{path}.partial"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", len(body)))
    os.replace(tmp, path)


def load_model(path, config=None):
    """Read a TSEG v1 file.

    The file stores only names and arrays, so the layout is inferred from
    them.  Settings that leave shapes alone (modulation, BN eps/momentum)
    come from ``config`` when given; it must agree with the stored shapes.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    return _parse_model(blob, config)


def _parse_model(blob, config=None):
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise FormatError("not a TSEG model file (bad magic)")
    (check,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if check != len(blob) - 8:
        raise FormatError("model file length check failed (truncated or padded)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}")
    end = len(blob) - 8
    pos = 12
    arrays = {}

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise FormatError("model file truncated")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("parameter name is not valid UTF-8") from exc
        if name in arrays:
            raise FormatError(f"duplicate parameter name {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        arrays[name] = data.astype(np.float32)
    if pos != end:
        raise FormatError("name table does not account for the whole file")
    inferred = infer_config((n, a.shape) for n, a in arrays.items())
    if config is None:
        config = inferred
    elif dataclasses.replace(config, input_height=inferred.input_height,
                             input_width=inferred.input_width,
                             modulation=inferred.modulation, bn_eps=inferred.bn_eps,
                             bn_momentum=inferred.bn_momentum) != inferred:
        raise FormatError("model file does not match the given network config")
    expected = {name: shape for name, _, shape in _layer_specs(config)}
    got = {n: a.shape for n, a in arrays.items()}
    if expected != got:
        raise FormatError("parameter table is inconsistent with any network layout")
    params = {n: E.Parameter(a, trainable=not n.endswith(("running_mean", "running_var")))
              for n, a in arrays.items()}
    return ModelParams(params, config)
