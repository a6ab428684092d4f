"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one CSV row per (kernel, backend) with the median wall time in ms,
then the time for one training epoch of the MNIST preset under each backend.
"""

import argparse
import importlib
import os
import statistics
import time

import numpy as np

from nnlaunder import _fallback


def _median_ms(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def kernel_rows(repeat):
    try:
        from nnlaunder import _kernels
    except ImportError:
        _kernels = None
    backends = {"numpy": _fallback}
    if _kernels is not None:
        backends["cython"] = _kernels
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 28, 28, 32)).astype(np.float32)
    cols = _fallback.im2col(x, 5, 5, 1)
    cols = np.ascontiguousarray(cols)
    rows = []
    for name, mod in backends.items():
        out, arg = mod.maxpool_forward(x, 2, 2)
        dout = np.ones_like(out)
        cases = {
            "im2col": lambda: mod.im2col(x, 5, 5, 1),
            "col2im": lambda: mod.col2im(cols, x.shape, 5, 5, 1),
            "maxpool_forward": lambda: mod.maxpool_forward(x, 2, 2),
            "maxpool_backward": lambda: mod.maxpool_backward(dout, arg, x.shape, 2, 2),
        }
        for kernel, fn in cases.items():
            rows.append((kernel, name, _median_ms(fn, repeat)))
    return rows


def epoch_seconds(pure):
    # layers look kernels up at call time, so reloading the switch is enough
    if pure:
        os.environ["NNLAUNDER_PURE"] = "1"
    else:
        os.environ.pop("NNLAUNDER_PURE", None)
    import nnlaunder.kernels
    importlib.reload(nnlaunder.kernels)
    from nnlaunder.data import synth_blobs
    from nnlaunder.nn import OptimizerConfig, build_preset, train

    data = synth_blobs(10, 100, dims=(28, 28), seed=0)
    model = build_preset("mnist-zhang", seed=0)
    t0 = time.perf_counter()
    train(model, data, OptimizerConfig(epochs=1, seed=0))
    return nnlaunder.kernels.BACKEND, time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-epoch", action="store_true")
    args = ap.parse_args()
    print("kernel,backend,median_ms")
    for kernel, backend, ms in kernel_rows(args.repeat):
        print(f"{kernel},{backend},{ms:.3f}")
    if not args.skip_epoch:
        print("epoch,backend,seconds")
        for pure in (False, True):
            backend, sec = epoch_seconds(pure)
            print(f"mnist-zhang 1000 images,{backend},{sec:.2f}")


if __name__ == "__main__":
    main()
