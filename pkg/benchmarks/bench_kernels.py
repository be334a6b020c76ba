"""Compare the numba kernels with their pure-numpy twins.

Each backend runs in its own interpreter because the choice is made at import
time from GRAMREG_DISABLE_NUMBA.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from gramreg import _kernels
from gramreg.data import DatasetManifest, render
from gramreg.network import build_spec
from gramreg.train import NetworkState, TrainConfig, train_epoch

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)


def best(fn, *args):
    fn(*args)  # warm up / compile
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


out = {"backend": _kernels.BACKEND}
x = rng.standard_normal((16 * 8, 1, 32, 32))
out["im2col conv1 (128x1x32x32, 4x4/2)"] = best(_kernels.im2col, x, 4, 4, 2)
cols = _kernels.im2col(x, 4, 4, 2)
out["col2im conv1"] = best(_kernels.col2im, cols, 32, 32, 2)
for shape in [(16, 8, 9), (64, 784, 1), (32, 64, 1)]:
    w = rng.standard_normal(shape)
    out[f"kernel_gram {shape}"] = best(_kernels.kernel_gram, w)
    out[f"gram_cross_grad {shape}"] = best(_kernels.gram_cross_grad, w)

ds = render(DatasetManifest(train_per_class=8, test_per_class=0))
views, labels, _ = ds.split("train")
cfg = TrainConfig(total_epochs=1)
state = NetworkState.create(build_spec("mvcnn", 6, 8), 0)
out["mvcnn train epoch (48 shapes)"] = best(lambda: train_epoch(state, views, labels, cfg, 0, 1e-3))
print(json.dumps(out))
"""


def run(disable, repeat):
    env = dict(os.environ, GRAMREG_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    fast, slow = run(False, args.repeat), run(True, args.repeat)
    if fast["backend"] != "numba":
        print("numba is not available; only the numpy path was measured")
    print(f"{'kernel':<40}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for key in fast:
        if key == "backend":
            continue
        a, b = fast[key] * 1e3, slow[key] * 1e3
        print(f"{key:<40}{a:>12.3f}{b:>12.3f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
