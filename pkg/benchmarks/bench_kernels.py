"""Benchmark the compositing kernels: numba JIT vs the uncompiled fallback.

Renders the same random scene through the jitted forward/backward kernels,
the plain-Python fallback (what SEMSPLAT_DISABLE_NUMBA=1 selects) and the
vectorized reference renderer, and reports wall-clock times plus output
agreement.

Usage: python benchmarks/bench_kernels.py [--gaussians N] [--size S] [--repeat R]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from semsplat import _kernels  # noqa: E402
from semsplat.gradients import backward_render  # noqa: E402
from semsplat.rasterizer import (  # noqa: E402
    RenderOutput,
    RenderSettings,
    _prepare,
    render,
    render_reference,
)
from semsplat.synthetic import random_scene  # noqa: E402


def time_call(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_kernel(kernel, prep, settings, height, width):
    n_chan = prep.payload.shape[1]
    payload_sum = np.zeros((height, width, n_chan))
    trans = np.ones((height, width))
    kernel(prep.mean2d, prep.conic, prep.opacity, prep.payload, prep.bbox,
           settings.tile_size, settings.alpha_cutoff, settings.early_stop,
           payload_sum, trans)
    return payload_sum, trans


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--gaussians", type=int, default=512)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    cloud, camera = random_scene(0, count=args.gaussians, width=args.size,
                                 height=args.size, feature_dim=8)
    settings = RenderSettings()
    prep = _prepare(cloud, camera, settings)
    h, w = camera.height, camera.width

    print(f"scene: {args.gaussians} gaussians at {args.size}x{args.size}, "
          f"active backend: {_kernels.backend_name()}")

    if _kernels.NUMBA_ENABLED:
        run_kernel(_kernels.composite_forward, prep, settings, h, w)  # JIT warmup
        t_jit = time_call(lambda: run_kernel(_kernels.composite_forward, prep, settings, h, w),
                          args.repeat)
        print(f"forward kernel (numba)   : {t_jit * 1e3:9.2f} ms")
    else:
        t_jit = None
        print("forward kernel (numba)   :   disabled (SEMSPLAT_DISABLE_NUMBA)")

    t_py = time_call(lambda: run_kernel(_kernels.composite_forward_py, prep, settings, h, w),
                     max(1, args.repeat // 5))
    print(f"forward kernel (fallback): {t_py * 1e3:9.2f} ms"
          + (f"  ({t_py / t_jit:7.1f}x slower)" if t_jit else ""))

    t_ref = time_call(lambda: render_reference(cloud, camera, settings), args.repeat)
    print(f"vectorized reference     : {t_ref * 1e3:9.2f} ms")

    pay_a, trans_a = run_kernel(_kernels.composite_forward, prep, settings, h, w)
    pay_b, trans_b = run_kernel(_kernels.composite_forward_py, prep, settings, h, w)
    print(f"kernel vs fallback max diff: {max(np.abs(pay_a - pay_b).max(), np.abs(trans_a - trans_b).max()):.2e}")

    out = render(cloud, camera, settings)
    ref = render_reference(cloud, camera, RenderSettings(early_stop=0.0))
    print(f"render vs reference color diff (early stop on): "
          f"{np.abs(out.color - ref.color).max():.2e}")

    adj = RenderOutput(color=np.ones((h, w, 3)), depth=np.ones((h, w)),
                       alpha=np.ones((h, w)), normal=np.ones((h, w, 3)),
                       feature=np.ones((h, w, 8)))
    backward_render(cloud, camera, settings, adj)  # warmup
    t_back = time_call(lambda: backward_render(cloud, camera, settings, adj), args.repeat)
    print(f"full backward pass       : {t_back * 1e3:9.2f} ms")


if __name__ == "__main__":
    main()
