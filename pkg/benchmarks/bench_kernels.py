"""Time each hot kernel on both backends, plus one full pretraining step.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--no-step]

Kernel inputs mirror the desk-scale shapes (batch 64, 32x32 views).  The
pretraining step is timed in a subprocess per backend because the backend
is fixed at import time by SKDSSL_DISABLE_NUMBA.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from skdssl import kernels
from skdssl.augment import gaussian_kernel


def kernel_cases(rng):
    x = rng.standard_normal((64, 16, 34, 34)).astype(np.float32)  # padded 32x32, 16 channels
    cols = kernels.implementations("im2col")["numpy"](x, 3, 3, 2, 16, 16)
    pool_in = rng.standard_normal((64, 16, 32, 32)).astype(np.float32)
    pooled, arg = kernels.implementations("maxpool_forward")["numpy"](pool_in, 2, 2)
    img = rng.random((64, 64))
    return {
        "im2col": (x, 3, 3, 2, 16, 16),
        "col2im": (cols, x.shape, 3, 3, 2, 16, 16),
        "maxpool_forward": (pool_in, 2, 2),
        "maxpool_backward": (np.ones_like(pooled), arg, pool_in.shape, 2, 2),
        "crop_resize": (img, 5, 7, 40, 48, 32, 32),
        "blur": (img[:32, :32].copy(), gaussian_kernel(1.3, 9)),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-5, atol=1e-6)


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for name, args in kernel_cases(rng).items():
        impls = kernels.implementations(name)
        outputs, times = {}, {}
        for backend, fn in impls.items():
            outputs[backend] = fn(*args)  # also triggers numba compilation
            times[backend] = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeats))
        agree = _same(outputs["numpy"], outputs["numba"]) if "numba" in outputs else None
        rows.append((name, times.get("numpy"), times.get("numba"), agree))
    return rows


_STEP_SNIPPET = """
import time, numpy as np
from skdssl.augment import AugmentationConfig
from skdssl.data import SyntheticSpec, synthesize
from skdssl.model import EncoderConfig
from skdssl.train import PretrainConfig, new_state, pretrain_step
cfg = PretrainConfig(encoder=EncoderConfig(input_size=32), augment=AugmentationConfig(view_size=32))
ds = synthesize(SyntheticSpec(n_per_class=16, image_size=64))
state = new_state(cfg)
idx = np.arange(64)
pretrain_step(state, ds.images, idx, cfg, 0)
t = []
for e in range(1, {steps} + 1):
    t0 = time.perf_counter(); pretrain_step(state, ds.images, idx, cfg, e); t.append(time.perf_counter() - t0)
print(min(t), float(np.median(t)))
"""


def bench_step(steps):
    out = {}
    for backend, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, SKDSSL_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", _STEP_SNIPPET.format(steps=steps)],
                             env=env, capture_output=True, text=True, check=True)
        out[backend] = tuple(float(v) for v in res.stdout.split())
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    ap.add_argument("--no-step", action="store_true", help="skip the full pretraining-step timing")
    args = ap.parse_args()

    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  agree")
    for name, t_np, t_nb, agree in bench_kernels(args.repeats):
        nb = f"{1e3 * t_nb:10.3f}" if t_nb is not None else f"{'n/a':>10}"
        speed = f"{t_np / t_nb:8.1f}x" if t_nb else f"{'':>9}"
        print(f"{name:<18}{1e3 * t_np:10.3f}{nb}{speed}  {agree}")

    if not args.no_step:
        print(f"\npretrain step, batch 64, 32x32 views ({args.steps} timed steps after one warm-up):")
        for backend, (best, median) in bench_step(args.steps).items():
            print(f"  {backend:<6} best {best:.3f} s   median {median:.3f} s")


if __name__ == "__main__":
    main()
