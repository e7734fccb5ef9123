"""Compiled per-tile compositing loops used by :mod:`sparsesplat.rasterize`.

Tiles run in parallel. Every tile writes only its own pixels (forward) or
its own (tile, splat) gradient slots (backward), so results do not depend
on the thread count.
"""

import numpy as np
import numba
from numba import njit, prange

# the bundled TBB is too old for numba; prefer OpenMP
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

TILE = 16
SIGMA_MAX = 0.999
T_EPS = 1e-4
CUTOFF_POWER = -4.5


@njit(cache=True, parallel=True)
def composite_forward(mean2d, conic, opacity, color, depth, tile_ids, starts, counts, splats, ntx, W, H, bg,
                      out_color, out_depth, out_T, out_count):
    for ti in prange(tile_ids.shape[0]):
        tid = tile_ids[ti]
        ox = (tid % ntx) * TILE
        oy = (tid // ntx) * TILE
        s0 = starts[ti]
        s1 = s0 + counts[ti]
        for ly in range(TILE):
            py = oy + ly
            if py >= H:
                break
            y = py + 0.5
            for lx in range(TILE):
                px = ox + lx
                if px >= W:
                    break
                x = px + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                d = 0.0
                n = 0
                for s in range(s0, s1):
                    if T < T_EPS:
                        break
                    k = splats[s]
                    dx = x - mean2d[k, 0]
                    dy = y - mean2d[k, 1]
                    power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                    if power < CUTOFF_POWER:
                        continue
                    sigma = opacity[k] * np.exp(min(power, 0.0))
                    if sigma > SIGMA_MAX:
                        sigma = SIGMA_MAX
                    w = sigma * T
                    r += w * color[k, 0]
                    g += w * color[k, 1]
                    b += w * color[k, 2]
                    d += w * depth[k]
                    if sigma > 0.0:
                        n += 1
                    T *= 1.0 - sigma
                out_color[py, px, 0] = r + T * bg[0]
                out_color[py, px, 1] = g + T * bg[1]
                out_color[py, px, 2] = b + T * bg[2]
                out_depth[py, px] = d
                out_T[py, px] = T
                out_count[py, px] = n


@njit(cache=True, parallel=True)
def composite_backward(mean2d, conic, opacity, color, depth, tile_ids, starts, counts, splats, ntx, W, H, bg,
                       grad_color, grad_depth, pair_grad):
    """Per-(tile, splat) gradients in ``pair_grad`` (n_pairs, 10).

    Columns: opacity, mean x, mean y, conic a, b, c, color r, g, b, depth.
    """
    for ti in prange(tile_ids.shape[0]):
        tid = tile_ids[ti]
        ox = (tid % ntx) * TILE
        oy = (tid // ntx) * TILE
        s0 = starts[ti]
        m = counts[ti]
        sig = np.empty(m)
        gau = np.empty(m)
        tex = np.empty(m)
        raw_ok = np.empty(m, dtype=np.bool_)
        for ly in range(TILE):
            py = oy + ly
            if py >= H:
                break
            y = py + 0.5
            for lx in range(TILE):
                px = ox + lx
                if px >= W:
                    break
                x = px + 0.5
                gr = grad_color[py, px, 0]
                gg = grad_color[py, px, 1]
                gb = grad_color[py, px, 2]
                gd = grad_depth[py, px]
                # forward replay
                T = 1.0
                last = -1
                for i in range(m):
                    if T < T_EPS:
                        break
                    k = splats[s0 + i]
                    dx = x - mean2d[k, 0]
                    dy = y - mean2d[k, 1]
                    power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                    if power < CUTOFF_POWER:
                        gau[i] = 0.0
                        sig[i] = 0.0
                        tex[i] = T
                        raw_ok[i] = True
                        last = i
                        continue
                    G = np.exp(min(power, 0.0))
                    raw = opacity[k] * G
                    sigma = raw if raw < SIGMA_MAX else SIGMA_MAX
                    gau[i] = G
                    sig[i] = sigma
                    tex[i] = T
                    raw_ok[i] = raw < SIGMA_MAX
                    last = i
                    T *= 1.0 - sigma
                bg_term = (gr * bg[0] + gg * bg[1] + gb * bg[2]) * T
                suffix = 0.0
                for i in range(last, -1, -1):
                    G = gau[i]
                    if G == 0.0:
                        continue
                    s = s0 + i
                    k = splats[s]
                    sigma = sig[i]
                    Te = tex[i]
                    w = sigma * Te
                    u = gr * color[k, 0] + gg * color[k, 1] + gb * color[k, 2] + gd * depth[k]
                    d_sigma = u * Te - (suffix + bg_term) / (1.0 - sigma)
                    suffix += u * w
                    pair_grad[s, 6] += w * gr
                    pair_grad[s, 7] += w * gg
                    pair_grad[s, 8] += w * gb
                    pair_grad[s, 9] += w * gd
                    if not raw_ok[i]:
                        continue
                    pair_grad[s, 0] += d_sigma * G
                    d_power = d_sigma * opacity[k] * G
                    dx = x - mean2d[k, 0]
                    dy = y - mean2d[k, 1]
                    a = conic[k, 0]
                    b = conic[k, 1]
                    c = conic[k, 2]
                    pair_grad[s, 1] += d_power * (a * dx + b * dy)
                    pair_grad[s, 2] += d_power * (b * dx + c * dy)
                    pair_grad[s, 3] += d_power * (-0.5 * dx * dx)
                    pair_grad[s, 4] += d_power * (-dx * dy)
                    pair_grad[s, 5] += d_power * (-0.5 * dy * dy)
