"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 2000] [--repeat 3]

Workloads mirror one cross-fitting fold: an MDN with the default
architecture trained for the default schedule, and one boosting tree of the
default depth on a two-feature history.
"""
import argparse
import math
import timeit

import numpy as np

from qope import _kernels
from qope.mdn import MdnConfig, init_params, lr_schedule, param_count


def mdn_workload(n, gen):
    cfg = MdnConfig()
    sizes = np.array((2,) + tuple(cfg.hidden) + (3 * cfg.components,), dtype=np.int64)
    X = gen.normal(size=(n, 2))
    y = X[:, 0] + gen.standard_t(3, size=n)
    theta = init_params(tuple(sizes), y, gen)
    perms = np.stack([gen.permutation(n) for _ in range(cfg.epochs)]).astype(np.int64)
    args = (theta, sizes, X, y, perms, cfg.batch_size, lr_schedule(cfg), cfg.gradient_clip, math.log(cfg.sigma_floor))
    return {
        "mdn_nll_grad": lambda k: k.mdn_nll_grad(theta, sizes, X, y, math.log(cfg.sigma_floor)),
        "mdn_train": lambda k: k.mdn_train(*args),
    }


def tree_workload(n, gen):
    X = np.ascontiguousarray(gen.normal(size=(n, 2)))
    p = 1 / (1 + np.exp(-4 * X[:, 0]))
    g = np.ascontiguousarray(0.5 - (gen.random(n) < p))
    h = np.full(n, 0.25)
    order = np.ascontiguousarray(np.stack([np.argsort(X[:, f], kind="stable") for f in range(2)]))
    forest = _kernels.build_tree(X, g, h, order, 3, 10, 1.0, 1e-10)[:5]
    forest = [np.repeat(np.atleast_2d(v), 100, axis=0) for v in forest]
    return {
        "build_tree": lambda k: k.build_tree(X, g, h, order, 3, 10, 1.0, 1e-10),
        "predict_forest(100)": lambda k: k.predict_forest(X, *forest),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    gen = np.random.default_rng(args.seed)
    jobs = {**mdn_workload(args.n, gen), **tree_workload(args.n, gen)}
    backends = _kernels.available_backends()
    print(f"n={args.n} repeat={args.repeat} active={_kernels.BACKEND}")
    print(f"{'kernel':<22}" + "".join(f"{b + ' (s)':>14}" for b in backends) + f"{'speedup':>10}")
    for name, job in jobs.items():
        best = {}
        for b in backends:
            k = _kernels.get_backend(b)
            best[b] = min(timeit.repeat(lambda: job(k), number=1, repeat=args.repeat))
        speed = best["python"] / best["cython"] if "cython" in best else float("nan")
        print(f"{name:<22}" + "".join(f"{best[b]:>14.4f}" for b in backends) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
