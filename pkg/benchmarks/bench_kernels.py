"""Time the compiled kernels against the numpy fallback on planner-sized inputs.

Run with ``python3 benchmarks/bench_kernels.py``. Prints one line per kernel
and backend with the median wall time over several repeats.
"""
import argparse
import timeit

import numpy as np

from savedrl.kernels import _pykernels

try:
    from savedrl.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    # safe set below the tree threshold queried with every particle terminal state
    store = rng.normal(size=(200, 4)) * 10
    terminals = rng.normal(size=(400 * 20, 4)) * 10
    # candidates x particles x horizon states, two obstacles
    paths = rng.normal(size=(400, 20, 15, 4)) * 30
    rects = np.array([[-35.0, -15.0, 2.0, 30.0], [-35.0, -15.0, -30.0, -2.0]])
    return {
        "radius_any": lambda m: m.radius_any(store, terminals, 3.0),
        "count_violations": lambda m: m.count_violations(paths, rects),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["compiled"] = _ckernels
    for name, fn in cases(np.random.default_rng(0)).items():
        for label, mod in backends.items():
            t = timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)
            print(f"{name:17s} {label:9s} {1e3 * float(np.median(t)):9.2f} ms")


if __name__ == "__main__":
    main()
