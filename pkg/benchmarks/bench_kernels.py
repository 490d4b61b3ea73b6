"""Compare the compiled and pure-numpy ensemble inference kernels.

    python benchmarks/bench_kernels.py [--rows 200] [--K 1000] [--repeat 3]

Times raw batch inference on Monte-Carlo neighborhoods of German Credit
points, then one ``stability_batch`` call per backend, and checks both
backends agree bit for bit.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from robustcf import _backend, _fallback
from robustcf.data import load_recipe, split
from robustcf.ensemble import TrainConfig, train
from robustcf.stability import StabilityParams, sample_neighborhood, stability_batch

GERMAN = Path(__file__).resolve().parents[1] / "data" / "german.data"


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=200)
    ap.add_argument("--K", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    tr, _ = split(load_recipe("german", GERMAN), 0.3, 0)
    model = train(tr, TrainConfig())
    f = model._flat
    flat = (f.feature, f.threshold, f.left, f.right, f.value, f.roots, model.base_margin)
    params = StabilityParams(K=args.K)
    rows = tr.X[: args.rows]
    samples = np.concatenate([sample_neighborhood(r, params) for r in rows])
    print(f"model: {len(model.trees)} trees, depth <= 4; batch: {samples.shape[0]} samples x {samples.shape[1]}")

    kernels = {"python": _fallback.predict_margin_batch}
    try:
        from robustcf import _kernels
        kernels["cython"] = _kernels.predict_margin_batch
    except ImportError:
        print("compiled extension not built; only the fallback is timed")

    outputs, timings = {}, {}
    for name, kernel in kernels.items():
        secs, out = best_of(lambda: np.asarray(kernel(samples, *flat)), args.repeat)
        outputs[name], timings[name] = out, secs
        print(f"{name:>7} kernel:    {secs * 1e3:9.1f} ms  ({samples.shape[0] / secs / 1e6:6.2f} M rows/s)")

    for name, kernel in kernels.items():
        _backend.predict_margin_batch = kernel
        secs, _ = best_of(lambda: stability_batch(rows, model, params), args.repeat)
        print(f"{name:>7} stability: {secs * 1e3:9.1f} ms  for {len(rows)} points at K={args.K}")

    if len(outputs) == 2:
        same = np.array_equal(outputs["python"], outputs["cython"])
        print(f"speedup {timings['python'] / timings['cython']:.1f}x; bit-identical: {same}")


if __name__ == "__main__":
    main()
