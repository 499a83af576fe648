"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 2000] [--json out.json]

Times each hot kernel on MNIST-shaped inputs (b=12, d=784, 10 classes),
checks that both backends agree, and times a short end-to-end MAPA run
under each backend in a subprocess.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from afldp.kernels import backends

B, D, C = 12, 784, 10


def inputs(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((2000, D))
    return {
        "X": X,
        "signs": np.where(rng.random(2000) < 0.5, -1.0, 1.0),
        "labels": rng.integers(0, C, 2000, dtype=np.int64),
        "idx": rng.integers(0, 2000, B, dtype=np.int64),
        "w": rng.standard_normal(D) * 0.01,
        "W": rng.standard_normal(C * D) * 0.01,
        "A": np.eye(64),
        "Z": rng.standard_normal((2000, 64)),
        "x64": rng.standard_normal(64),
        "dir": rng.standard_normal(C * D),
        "g": rng.standard_normal(C * D),
    }


def cases(k, a):
    out_d, out_cd, out_64 = np.empty(D), np.empty(C * D), np.empty(64)
    return {
        "logistic_batch_grad": lambda: k.logistic_batch_grad(a["X"], a["signs"], a["idx"], a["w"], 1e-4, out_d),
        "hinge_batch_grad": lambda: k.hinge_batch_grad(a["X"], a["labels"], a["idx"], a["W"], C, 1e-4, out_cd),
        "quadratic_batch_grad": lambda: k.quadratic_batch_grad(a["A"], a["Z"], a["idx"], a["x64"], out_64),
        "clip_and_perturb": lambda: k.clip_and_perturb(a["g"], 1.0, a["dir"], 0.5, out_cd),
        "sgd_step": lambda: k.sgd_step(a["W"], 1e-9, a["g"]),
    }


def agree(mods, a):
    ref = None
    for name, k in mods.items():
        res = {}
        for case, fn in cases(k, a).items():
            if case == "sgd_step":
                continue
            out = fn()
            res[case] = np.array(out, copy=True)
        if ref is None:
            ref = res
            continue
        for case, v in res.items():
            if not np.allclose(v, ref[case], rtol=1e-12, atol=1e-12):
                raise SystemExit(f"{name} disagrees on {case}")


def end_to_end(backend, iters):
    env = dict(os.environ, AFLDP_PURE_PYTHON="1" if backend == "python" else "0")
    code = (
        "import time; from afldp import RunConfig, DatasetSpec, run, BACKEND\n"
        f"cfg = RunConfig(algorithm='mapa', dataset=DatasetSpec(kind='gaussians', dim={D}), T={iters},"
        " loss_stride=10**9, eval_stride=0)\n"
        "t = time.perf_counter(); run(cfg); print(BACKEND, time.perf_counter() - t)\n"
    )
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    name, secs = out.stdout.split()
    return name, float(secs)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--repeat", type=int, default=2000)
    p.add_argument("--iters", type=int, default=5000, help="iterations of the end-to-end run")
    p.add_argument("--json")
    args = p.parse_args()

    mods = backends()
    a = inputs()
    agree(mods, a)
    results = {}
    for name, k in mods.items():
        for case, fn in cases(k, a).items():
            best = min(timeit.repeat(fn, number=args.repeat, repeat=3)) / args.repeat
            results.setdefault(case, {})[name] = best * 1e6
    print(f"{'kernel':24s}" + "".join(f"{n + ' us':>14s}" for n in mods) + "   speedup")
    for case, row in results.items():
        line = f"{case:24s}" + "".join(f"{row[n]:14.2f}" for n in mods)
        if "cython" in row:
            line += f"   {row['python'] / row['cython']:6.1f}x"
        print(line)

    runs = {}
    for backend in mods:
        name, secs = end_to_end(backend, args.iters)
        runs[name] = secs
        print(f"end-to-end mapa, {args.iters} iterations, {name}: {secs:.2f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels_us": results, "end_to_end_s": runs}, fh, indent=2)


if __name__ == "__main__":
    main()
