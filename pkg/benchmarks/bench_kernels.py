"""Compare the numba and numpy kernel paths.

Part 1 times each kernel in-process (both paths are importable side by side).
Part 2 times a full training step in two subprocesses, one with
AGLN_DISABLE_NUMBA=1, since the flag is read at import time.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from agln import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from agln import _kernels
from agln.model import ModelConfig, SegmentationModel
from agln.layers import SGD, cross_entropy
from agln.tensor import Tensor, backward
rng = np.random.default_rng(0)
model = SegmentationModel(ModelConfig(variant="agln_dense"), seed=0)
opt = SGD(model.parameters(), 1000, 0.01)
x = Tensor(rng.uniform(size=(4, 3, 64, 64)).astype(np.float32))
y = rng.integers(0, 5, size=(4, 64, 64))
times = []
for i in range({repeat} + 2):
    t = time.perf_counter()
    loss = cross_entropy(model(x), y)
    opt.zero_grad(); backward(loss); opt.step()
    times.append(time.perf_counter() - t)
print(_kernels.backend(), np.median(times[2:]))
"""


def bench(fn, repeat):
    fn()  # warm up / compile
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(repeat: int) -> None:
    if not K.HAVE_NUMBA:
        print("numba unavailable; kernel comparison skipped")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for b, c, h, stride in [(4, 16, 32, 2), (4, 32, 16, 1), (4, 64, 8, 1), (4, 128, 4, 2)]:
        xp = rng.normal(size=(b, c, h + 2, h + 2)).astype(np.float32)
        ho = (h - 1) // stride + 1
        a = K.im2col_numpy(xp, stride, ho, ho)
        j = K._im2col_jit(xp, stride, ho, ho)
        tn = bench(lambda: K.im2col_numpy(xp, stride, ho, ho), repeat)
        tj = bench(lambda: K._im2col_jit(xp, stride, ho, ho), repeat)
        print(f"{f'im2col {b}x{c}x{h}^2 s{stride}':<28}{tn * 1e3:>10.3f}{tj * 1e3:>10.3f}{tn / tj:>9.2f}  "
              f"{np.array_equal(a, j)}")
        cols = rng.normal(size=a.shape).astype(np.float32)
        a = K.col2im_numpy(cols, stride, h + 2, h + 2)
        j = K._col2im_jit(cols, stride, h + 2, h + 2)
        tn = bench(lambda: K.col2im_numpy(cols, stride, h + 2, h + 2), repeat)
        tj = bench(lambda: K._col2im_jit(cols, stride, h + 2, h + 2), repeat)
        print(f"{f'col2im {b}x{c}x{h}^2 s{stride}':<28}{tn * 1e3:>10.3f}{tj * 1e3:>10.3f}{tn / tj:>9.2f}  "
              f"{np.array_equal(a, j)}")
    gt = rng.integers(0, 5, size=50 * 64 * 64)
    gt[::7] = 255
    pred = rng.integers(0, 5, size=gt.size)
    m1, m2 = np.zeros((5, 5), np.int64), np.zeros((5, 5), np.int64)
    K.confusion_numpy(m1, gt, pred, 255)
    K._confusion_jit(m2, gt, pred, 255)
    tn = bench(lambda: K.confusion_numpy(np.zeros((5, 5), np.int64), gt, pred, 255), repeat)
    tj = bench(lambda: K._confusion_jit(np.zeros((5, 5), np.int64), gt, pred, 255), repeat)
    print(f"{'confusion 50x64x64 K=5':<28}{tn * 1e3:>10.3f}{tj * 1e3:>10.3f}{tn / tj:>9.2f}  "
          f"{np.array_equal(m1, m2)}")


def step_table(repeat: int) -> None:
    print("\nfull training step, agln_dense C=32 N=16, batch 4 x 3x64x64 (median seconds)")
    for flag in ("0", "1"):
        env = {**os.environ, "AGLN_DISABLE_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        print("  " + out.stdout.strip())


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    kernel_table(args.repeat)
    step_table(max(3, args.repeat // 4))
