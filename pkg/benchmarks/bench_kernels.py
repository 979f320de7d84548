"""Time every kernel under the numba and numpy backends, plus one training step.

    python benchmarks/bench_kernels.py [--repeat 20] [--csv out.csv]
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from tdam import _kernels, ops
from tdam.backbone import TdSpec, build_model, toy_config
from tdam.tensor import Tensor


def _cases(rng):
    x = rng.random((64, 32, 16, 16), dtype=np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    cols = _kernels.im2col_numpy(x, 3, 3, 1, 1, 16, 16)
    _, idx = _kernels.maxpool_numpy(xp, 3, 2, 8, 8)
    g8 = rng.random((64, 32, 8, 8), dtype=np.float32)
    scale = rng.random(32, dtype=np.float32)
    mask = rng.random((224, 224)) > 0.6
    return {
        "im2col 3x3 (64,32,16,16)": lambda k: k.im2col(x, 3, 3, 1, 1, 16, 16),
        "col2im 3x3 (64,32,16,16)": lambda k: k.col2im(cols, 16, 16, 1, 1),
        "bn_stats (64,32,16,16)": lambda k: k.bn_stats(x),
        "bn_backward (64,32,16,16)": lambda k: k.bn_backward(x, x, scale, True),
        "maxpool 3/2 (64,32,16,16)": lambda k: k.maxpool(xp, 3, 2, 8, 8),
        "maxpool_backward": lambda k: k.maxpool_backward(g8, idx, 18, 18, 3, 2),
        "label 224x224": lambda k: k.label(mask),
    }


def _train_step():
    model = build_model(toy_config(10, td=TdSpec.parse("joint,t2,m1")), 0)
    model.train()
    x = Tensor(np.random.default_rng(0).random((64, 3, 32, 32), dtype=np.float32))
    y = np.arange(64) % 10

    def step(_):
        loss = ops.softmax_cross_entropy(model(x), y)
        model.zero_grad()
        loss.backward()

    return step


def bench(fn, repeat):
    fn(_kernels)  # warm-up (and JIT compile)
    return min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--csv", help="also write the table here")
    args = p.parse_args(argv)
    if not _kernels.HAS_NUMBA:
        sys.exit("numba is not importable; nothing to compare")

    cases = _cases(np.random.default_rng(0))
    cases["toy TD train step, batch 64"] = _train_step()
    rows = []
    for name, fn in cases.items():
        t = {}
        for backend in ("numba", "numpy"):
            _kernels.set_backend(backend)
            t[backend] = bench(fn, max(3, args.repeat // 4) if "train" in name else args.repeat)
        rows.append((name, t["numba"] * 1e3, t["numpy"] * 1e3, t["numpy"] / t["numba"]))
    _kernels.set_backend("numba")

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  numba ms  numpy ms  speedup")
    for name, a, b, s in rows:
        print(f"{name:<{width}}  {a:8.3f}  {b:8.3f}  {s:6.2f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kernel", "numba_ms", "numpy_ms", "speedup"])
            w.writerows([(n, f"{a:.4f}", f"{b:.4f}", f"{s:.3f}") for n, a, b, s in rows])


if __name__ == "__main__":
    main()
