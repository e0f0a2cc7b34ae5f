"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 64]

Shapes follow the desk preset (16 channels at 8x8, 32 at 4x4 after the
first reduction). Also times one forward+backward step of the desk
hypernetwork under each backend. Prints a table; first-call compilation is
excluded by a warm-up call.
"""
import argparse
import time
import timeit

import numpy as np

from bonsai import kernels
from bonsai.autograd import cross_entropy
from bonsai.config import PRESETS
from bonsai.network import build_hypernetwork
from bonsai.scheduler import build_plan


def kernel_cases(batch, rng):
    cases = {}
    for c, side in ((16, 8), (32, 4)):
        for k, dil in ((3, 1), (5, 1), (3, 2), (5, 2)):
            pad = dil * (k - 1) // 2
            xp = rng.normal(size=(batch, c, side + 2 * pad, side + 2 * pad))
            w = rng.normal(size=(c, k, k))
            gout = rng.normal(size=(batch, c, side, side))
            tag = f"c{c} {side}x{side} k{k} d{dil}"
            cases[f"dw fwd  {tag}"] = lambda xp=xp, w=w, dil=dil, s=side: kernels.dw_forward(xp, w, 1, dil, s, s)
            cases[f"dw bwd  {tag}"] = lambda xp=xp, w=w, g=gout, dil=dil: kernels.dw_backward(xp, w, g, 1, dil)
        xp = rng.normal(size=(batch, c, side + 2, side + 2))
        gout = rng.normal(size=(batch, c, side, side))
        tag = f"c{c} {side}x{side}"
        cases[f"maxpool {tag}"] = lambda xp=xp, s=side: kernels.maxpool_forward(xp, 1, s, s)
        cases[f"avgpool {tag}"] = lambda xp=xp, s=side: kernels.avgpool_forward(xp, 1, s, s)
        cases[f"avgpool bwd {tag}"] = lambda g=gout, s=side: kernels.avgpool_backward(g, 1, s + 2, s + 2)
    return cases


def model_step(batch, rng):
    cfg = PRESETS["desk"]
    net = build_hypernetwork(build_plan(cfg), batch, np.random.default_rng(0), towers=[(1, 0.4)])
    x = rng.normal(size=(batch, 3, cfg.image_size, cfg.image_size))
    y = rng.integers(0, cfg.classes, size=batch)

    def step():
        logits = net.forward(x, training=True)[-1][1]
        cross_entropy(logits, y).backward()
        for p in net.params():
            p.grad = None
    return step


def timed(fn, repeat):
    fn()  # warm up (compiles under numba)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--batch", type=int, default=64)
    args = parser.parse_args(argv)
    backends = ["numpy"] + (["numba"] if kernels.NUMBA_KERNELS is not None else [])
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.batch, rng)
    cases["desk model fwd+bwd"] = model_step(args.batch, rng)
    previous = kernels.BACKEND
    rows = []
    start = time.time()
    for name, fn in cases.items():
        times = {}
        for b in backends:
            kernels.use_backend(b)
            reps = max(3, args.repeat // 10) if name.startswith("desk") else args.repeat
            times[b] = timed(fn, reps)
        rows.append((name, times))
    kernels.use_backend(previous)
    print(f"{'case':32s}" + "".join(f"{b + ' ms':>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, times in rows:
        line = f"{name:32s}" + "".join(f"{1e3 * times[b]:12.3f}" for b in backends)
        if len(backends) > 1:
            line += f"{times['numpy'] / times['numba']:11.2f}x"
        print(line)
    print(f"total {time.time() - start:.1f}s, batch {args.batch}, best of {args.repeat}")


if __name__ == "__main__":
    main()
