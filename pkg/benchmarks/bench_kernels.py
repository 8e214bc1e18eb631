"""Time the numba kernels against the pure-numpy fallback on the network's real shapes.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 8]

Prints one line per kernel and shape: best-of-N wall time per backend and
the speed-up.  A full forward/backward training step is timed at the end.
"""

import argparse
import time

import numpy as np

from tseg import engine as E
from tseg import kernels
from tseg import network as net
from tseg import training as T

SHAPES = [
    # (C_in, C_out, H, W): representative 3x3 convolutions
    (1, 4, 200, 168),
    (16, 16, 100, 84),
    (48, 16, 25, 21),
    (16, 16, 200, 168),
]


def best(fn, repeat):
    fn()  # warm-up / JIT
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench(name, make, repeat):
    res = {}
    for backend in ("numpy", "numba"):
        if backend not in kernels.available_backends():
            continue
        kernels.use_backend(backend)
        res[backend] = best(make(), repeat)
    line = f"{name:42s}" + "".join(f" {b} {t * 1e3:9.2f} ms" for b, t in res.items())
    if len(res) == 2:
        line += f"  x{res['numpy'] / res['numba']:.1f}"
    print(line, flush=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    n = args.batch
    for ci, co, h, w in SHAPES:
        x = rng.standard_normal((n, ci, h, w), dtype=np.float32)
        wt = rng.standard_normal((co, ci, 3, 3), dtype=np.float32)
        b = np.zeros(co, np.float32)
        gy = rng.standard_normal((n, co, h, w), dtype=np.float32)
        bench(f"conv3x3 fwd {ci}->{co} {h}x{w}", lambda: lambda: kernels.conv_forward(x, wt, b), args.repeat)
        bench(f"conv3x3 bwd {ci}->{co} {h}x{w}", lambda: lambda: kernels.conv_backward(x, wt, gy), args.repeat)
    x = rng.standard_normal((n, 16, 200, 168), dtype=np.float32)
    bench("maxpool2 16x200x168", lambda: lambda: kernels.maxpool2_forward(x), args.repeat)
    bench("bn_stats 16x200x168", lambda: lambda: kernels.bn_stats(x), args.repeat)
    xs = rng.standard_normal((n, 16, 100, 84), dtype=np.float32)
    bench("upsample2 16x100x84", lambda: lambda: kernels.upsample2_forward(xs), args.repeat)
    mask = rng.random((64, 128, 128)) < 0.3
    bench("label_components 64x128x128", lambda: lambda: kernels.label_components(mask), args.repeat)

    params = net.build_network(seed=0)
    images = rng.standard_normal((n, 4, 200, 168), dtype=np.float32)
    targets = (rng.random((n, 3, 200, 168)) < 0.2).astype(np.uint8)
    cfg = T.TrainConfig()

    def step():
        params.zero_grad()
        with E.Tape() as tape:
            out = net.forward(params, images, mode="train")
            loss = T.batch_loss(out, targets, cfg)
        tape.backward(loss)

    bench(f"train step, {n} slices", lambda: step, max(1, args.repeat // 2))


if __name__ == "__main__":
    main()
