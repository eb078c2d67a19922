"""Hot compositing kernels: tile-parallel forward blend and its adjoint.

The kernels are written as plain Python loops over numpy arrays and are
JIT-compiled with numba when available.  Setting the environment variable
SEMSPLAT_DISABLE_NUMBA=1 (or any truthy value) before import selects the
uncompiled fallback path; the two paths run the same code.  The module
keeps references to both variants so benchmarks can compare them
in-process.

Payload rows pack all composited channels (color, projected feature,
depth, normal); compositing is a single linear blend over front-to-back
sorted fragments.  Per-pixel arithmetic depends only on the fragment
sequence, never on the tile decomposition or worker count, which is what
makes the output bitwise reproducible across tile sizes and thread
counts.
"""

from __future__ import annotations

import math
import os

import numpy as np

_flag = os.environ.get("SEMSPLAT_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _flag not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by SEMSPLAT_DISABLE_NUMBA")
    from numba import njit, prange

    NUMBA_ENABLED = True
except ImportError:  # pragma: no cover - exercised via the env flag
    NUMBA_ENABLED = False
    prange = range

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"


def _composite_forward(mean2d, conic, opacity, payload, bbox, tile_size,
                       alpha_cutoff, early_stop, out_payload, out_trans):
    """Front-to-back blend of sorted fragments into per-pixel payload sums.

    mean2d (M, 2), conic (M, 3) packed inverse 2D covariance (a, b, c),
    opacity (M,), payload (M, K), bbox (M, 4) inclusive pixel bounds
    (u0, u1, v0, v1).  Fragments below alpha_cutoff are dropped; the pixel
    stops once transmittance falls below early_stop.  Writes the blended
    payload (H, W, K) and the final transmittance (H, W).
    """
    height, width = out_trans.shape
    n_frag = mean2d.shape[0]
    n_chan = payload.shape[1]
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y

    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)

        cand = np.empty(n_frag, dtype=np.int64)
        n_cand = 0
        for g in range(n_frag):
            if bbox[g, 0] < x1 and bbox[g, 1] >= x0 and bbox[g, 2] < y1 and bbox[g, 3] >= y0:
                cand[n_cand] = g
                n_cand += 1

        for py in range(y0, y1):
            pcy = py + 0.5
            for px in range(x0, x1):
                pcx = px + 0.5
                trans = 1.0
                for ci in range(n_cand):
                    g = cand[ci]
                    if px < bbox[g, 0] or px > bbox[g, 1] or py < bbox[g, 2] or py > bbox[g, 3]:
                        continue
                    dx = pcx - mean2d[g, 0]
                    dy = pcy - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx
                                    + 2.0 * conic[g, 1] * dx * dy
                                    + conic[g, 2] * dy * dy)
                    alpha = opacity[g] * math.exp(power)
                    if alpha > 0.99:
                        alpha = 0.99
                    if alpha < alpha_cutoff:
                        continue
                    w = alpha * trans
                    for k in range(n_chan):
                        out_payload[py, px, k] += w * payload[g, k]
                    trans *= 1.0 - alpha
                    if trans < early_stop:
                        break
                out_trans[py, px] = trans


def _composite_backward(mean2d, conic, opacity, payload, bbox, tile_size,
                        alpha_cutoff, early_stop, d_payload, d_trans_v,
                        grad_payload, grad_opacity, grad_mean2d, grad_conic):
    """Adjoint of _composite_forward.

    d_payload (H, W, K) are adjoints of the blended payload planes and
    d_trans_v (H, W) is the adjoint of the final transmittance (background
    color dotted with the color adjoint, minus the alpha adjoint).  The
    fragment replay matches the forward skip/stop logic exactly, then a
    back-to-front sweep accumulates gradients per primitive.  Tiles run
    serially so accumulation order is fixed.
    """
    height, width = d_trans_v.shape
    n_frag = mean2d.shape[0]
    n_chan = payload.shape[1]
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size

    cand = np.empty(n_frag, dtype=np.int64)
    hit = np.empty(n_frag, dtype=np.int64)
    hit_alpha = np.empty(n_frag, dtype=np.float64)
    hit_trans = np.empty(n_frag, dtype=np.float64)

    for ty in range(tiles_y):
        for tx in range(tiles_x):
            x0 = tx * tile_size
            y0 = ty * tile_size
            x1 = min(x0 + tile_size, width)
            y1 = min(y0 + tile_size, height)

            n_cand = 0
            for g in range(n_frag):
                if bbox[g, 0] < x1 and bbox[g, 1] >= x0 and bbox[g, 2] < y1 and bbox[g, 3] >= y0:
                    cand[n_cand] = g
                    n_cand += 1

            for py in range(y0, y1):
                pcy = py + 0.5
                for px in range(x0, x1):
                    pcx = px + 0.5
                    trans = 1.0
                    n_hit = 0
                    for ci in range(n_cand):
                        g = cand[ci]
                        if px < bbox[g, 0] or px > bbox[g, 1] or py < bbox[g, 2] or py > bbox[g, 3]:
                            continue
                        dx = pcx - mean2d[g, 0]
                        dy = pcy - mean2d[g, 1]
                        power = -0.5 * (conic[g, 0] * dx * dx
                                        + 2.0 * conic[g, 1] * dx * dy
                                        + conic[g, 2] * dy * dy)
                        alpha = opacity[g] * math.exp(power)
                        if alpha > 0.99:
                            alpha = 0.99
                        if alpha < alpha_cutoff:
                            continue
                        hit[n_hit] = g
                        hit_alpha[n_hit] = alpha
                        hit_trans[n_hit] = trans
                        n_hit += 1
                        trans *= 1.0 - alpha
                        if trans < early_stop:
                            break

                    # L = sum_i w_i * (payload_i . dP) + T_end * v
                    acc = trans * d_trans_v[py, px]
                    for j in range(n_hit - 1, -1, -1):
                        g = hit[j]
                        alpha = hit_alpha[j]
                        t_before = hit_trans[j]
                        w = alpha * t_before
                        u = 0.0
                        for k in range(n_chan):
                            dp = d_payload[py, px, k]
                            grad_payload[g, k] += w * dp
                            u += payload[g, k] * dp
                        g_alpha = u * t_before - acc / (1.0 - alpha)
                        acc += w * u

                        dx = pcx - mean2d[g, 0]
                        dy = pcy - mean2d[g, 1]
                        power = -0.5 * (conic[g, 0] * dx * dx
                                        + 2.0 * conic[g, 1] * dx * dy
                                        + conic[g, 2] * dy * dy)
                        gauss = math.exp(power)
                        if opacity[g] * gauss > 0.99:
                            continue  # straight-through zero past the clamp
                        grad_opacity[g] += g_alpha * gauss
                        g_gauss = g_alpha * opacity[g] * gauss
                        ax = conic[g, 0] * dx + conic[g, 1] * dy
                        ay = conic[g, 1] * dx + conic[g, 2] * dy
                        grad_mean2d[g, 0] += g_gauss * ax
                        grad_mean2d[g, 1] += g_gauss * ay
                        grad_conic[g, 0] -= 0.5 * dx * dx * g_gauss
                        grad_conic[g, 1] -= dx * dy * g_gauss
                        grad_conic[g, 2] -= 0.5 * dy * dy * g_gauss


# Uncompiled references for the benchmark and the fallback path.
composite_forward_py = _composite_forward
composite_backward_py = _composite_backward

if NUMBA_ENABLED:
    composite_forward = njit(cache=True, parallel=True)(_composite_forward)
    composite_backward = njit(cache=True)(_composite_backward)
else:
    composite_forward = _composite_forward
    composite_backward = _composite_backward


def warmup() -> None:
    """Trigger JIT compilation on a one-fragment scene (no-op without numba)."""
    mean2d = np.array([[0.5, 0.5]])
    conic = np.array([[1.0, 0.0, 1.0]])
    opacity = np.array([0.5])
    payload = np.array([[1.0]])
    bbox = np.array([[0, 0, 0, 0]], dtype=np.int64)
    out_p = np.zeros((1, 1, 1))
    out_t = np.ones((1, 1))
    composite_forward(mean2d, conic, opacity, payload, bbox, 16, 1.0 / 255.0, 1e-4, out_p, out_t)
    composite_backward(mean2d, conic, opacity, payload, bbox, 16, 1.0 / 255.0, 1e-4,
                       np.zeros((1, 1, 1)), np.zeros((1, 1)),
                       np.zeros((1, 1)), np.zeros(1), np.zeros((1, 2)), np.zeros((1, 3)))
