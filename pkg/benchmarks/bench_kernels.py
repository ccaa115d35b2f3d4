"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints median wall time per call for each kernel and backend, the speed-up,
and whether the outputs agree bit for bit.  A full training step (64x64,
K=4) is timed with each backend patched in.
"""

import argparse
import statistics
import time

import numpy as np

from moedepth import _pykernels, kernels
from moedepth.mixture import LossConfig, total_loss
from moedepth.network import NetConfig, backward, forward, init_params

try:
    from moedepth import _ckernels
except ImportError:
    _ckernels = None


def timed(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def train_step(params, x, gt):
    tr = forward(params, x, 1.0)
    t = total_loss(tr.output, gt, LossConfig())
    backward(tr, params, grad_mu=t.grad_mu, grad_logits=t.grad_logits)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 64, 64))
    cols = rng.normal(size=(16 * 9, 64 * 64))
    q, r = rng.normal(size=(2000, 3)), rng.normal(size=(2000, 3))
    cases = {
        "im2col 16x64x64 k3": lambda m: m.im2col(x, 3),
        "col2im 16x64x64 k3": lambda m: m.col2im(cols, 16, 64, 64, 3),
        "nn_brute 2000x2000": lambda m: m.nn_brute(q, r),
    }

    print(f"{'kernel':<22}{'numpy ms':>11}{'cython ms':>11}{'speed-up':>10}  identical")
    for name, call in cases.items():
        tp = timed(lambda: call(_pykernels), args.repeat)
        tc = timed(lambda: call(_ckernels), args.repeat)
        a, b = call(_pykernels), call(_ckernels)
        same = all(np.asarray(u).tobytes() == np.asarray(v).tobytes()
                   for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)))
        print(f"{name:<22}{tp * 1e3:>11.3f}{tc * 1e3:>11.3f}{tp / tc:>9.2f}x  {same}")

    params = init_params(NetConfig(seed=1))
    img = rng.normal(size=(3, 64, 64))
    gt = rng.uniform(1, 10, (64, 64))
    step = {}
    for label, impl in (("numpy", _pykernels), ("cython", _ckernels)):
        kernels._impl = impl
        step[label] = timed(lambda: train_step(params, img, gt), max(5, args.repeat // 3))
    kernels._impl = _ckernels if kernels.BACKEND == "cython" else _pykernels
    print(f"{'train step 64x64 K=4':<22}{step['numpy'] * 1e3:>11.3f}{step['cython'] * 1e3:>11.3f}"
          f"{step['numpy'] / step['cython']:>9.2f}x")


if __name__ == "__main__":
    main()
