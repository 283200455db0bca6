"""Compare the numba and numpy kernel paths, then time one training epoch under each.

    python benchmarks/bench_kernels.py [--impressions 20000]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from hinet import _kernels as K

EPOCH_SNIPPET = """
import time
from hinet import datagen, trainer
from hinet.models import HiNet, HiNetConfig
data = datagen.generate(datagen.six_scenario_config({n}, seed=0))
tr, va = datagen.split(data, 0.9, seed=0)
model = HiNet(HiNetConfig.for_dataset(data.meta))
trainer.train(model, tr.subset(range(512)), va, trainer.TrainConfig(max_epochs=1))  # warm-up / jit
t0 = time.perf_counter()
trainer.train(HiNet(HiNetConfig.for_dataset(data.meta)), tr, va, trainer.TrainConfig(max_epochs=1))
print(time.perf_counter() - t0)
"""


def cases(rng):
    w = rng.dirichlet(np.ones(5), size=256)
    stack = rng.normal(size=(5, 256, 32))
    g = rng.normal(size=(256, 32))
    idx = rng.integers(0, 2000, 256)
    logits = rng.normal(size=(256, 6))
    scores = rng.random(20_000)
    return {
        "mixture_forward": (w, stack),
        "mixture_backward": (w, stack, g),
        "scatter_add_rows": (2000, idx, stack[0]),
        "softmax_rows": (logits,),
        "midranks": (scores,),
    }


def bench_kernels(repeat=200):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, args in cases(rng).items():
        fn_np, fn_nb = getattr(K, f"numpy_{name}"), getattr(K, f"numba_{name}")
        fn_nb(*args)  # compile
        t_np = min(timeit.repeat(lambda: fn_np(*args), number=repeat, repeat=3)) / repeat * 1e6
        t_nb = min(timeit.repeat(lambda: fn_nb(*args), number=repeat, repeat=3)) / repeat * 1e6
        print(f"{name:<18}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>10.2f}")


def bench_epoch(n):
    for flag in ("0", "1"):
        out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET.format(n=n)], capture_output=True, text=True,
                             env={**os.environ, "HINET_NUMBA": flag}, check=True)
        label = "numba" if flag == "1" else "numpy"
        print(f"epoch on {n} impressions, {label} backend: {float(out.stdout):.2f} s")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--impressions", type=int, default=20_000)
    args = p.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels()
    bench_epoch(args.impressions)


if __name__ == "__main__":
    main()
