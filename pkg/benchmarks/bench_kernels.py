"""Compare the compiled kernels with the numpy fallback.

Times each kernel at training-step sizes (batch 32, 20 classes, 32-dim
embeddings, a 16x64 and 64x32 dense pair for the Adam update) and then one
full default-config training run per backend.

    python benchmarks/bench_kernels.py [--repeat 2000] [--config configs/default.yaml]
"""
import argparse
import time
import timeit
from pathlib import Path

import numpy as np

from ltood import _backend
from ltood import config as cfgmod
from ltood.trainer import train

ROOT = Path(__file__).resolve().parents[1]


def kernel_cases(r):
    B, M, E = 32, 20, 32
    emb, protos = r.normal(size=(B, E)), r.normal(size=(M, E))
    logits = r.normal(size=(B, M))
    yi, yj = r.integers(0, M, B), r.integers(0, M, B)
    lam, w = r.random(B), np.full(B, 1 / B)
    param, grad = r.normal(size=16 * 64 + 64 * 32), r.normal(size=16 * 64 + 64 * 32)
    m, v = np.zeros_like(param), np.zeros_like(param)
    ids, ood = r.random(300), r.random(100)
    return {
        "sqdist": lambda k: k.sqdist(emb, protos),
        "xent_rows": lambda k: k.xent_rows(logits, yi, yj, lam, w),
        "proto_rows": lambda k: k.proto_rows(emb, protos, yi, yj, lam, w, 1.0, 0.01),
        "adam_update": lambda k: k.adam_update(param, grad, m, v, 1e-4, 0.9, 0.999, 1e-8, 0.1, 0.001),
        "rank_auc": lambda k: k.rank_auc(ids, ood),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--config", default=str(ROOT / "configs" / "default.yaml"))
    args = ap.parse_args(argv)
    backends = _backend.available()
    if "cython" not in backends:
        print("compiled kernels not built; only the fallback is timed")
    cases = kernel_cases(np.random.default_rng(0))

    print(f"{'kernel':<12}" + "".join(f"{b + ' (us)':>16}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases.items():
        us = []
        for b in backends:
            k = _backend.get(b)
            fn(k)
            us.append(1e6 * min(timeit.repeat(lambda: fn(k), number=args.repeat, repeat=3)) / args.repeat)
        speed = f"{us[0] / us[-1]:.1f}x" if len(us) > 1 else "-"
        print(f"{name:<12}" + "".join(f"{u:>16.2f}" for u in us) + f"{speed:>10}")

    exp = cfgmod.load(args.config)
    data = cfgmod.build_data(exp, exp.seeds[0])
    print()
    print(f"{'training run':<28}" + "".join(f"{b + ' (s)':>14}" for b in backends))
    previous = _backend.current()
    for label, over in [("baseline", {}), ("mx5 + prototype", {"head_type": "prototype", "mixup_strategy": "mx5"})]:
        method = exp.with_method(**over).method
        secs = []
        for b in backends:
            _backend.use(b)
            t0 = time.perf_counter()
            train(method, data.train, data.val, data.partition)
            secs.append(time.perf_counter() - t0)
        print(f"{label:<28}" + "".join(f"{s:>14.2f}" for s in secs))
    _backend.use(previous)


if __name__ == "__main__":
    main()
