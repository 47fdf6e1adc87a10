"""Front-to-back alpha compositing kernels (numba-compiled).

The forward pass walks Gaussians in depth order updating per-pixel
transmittance; the backward pass replays the identical masking decisions
in reverse order, reconstructing each contributor's pre-blend
transmittance by division. Per-pixel contributor prefixes are recovered
from the recorded position of the last contributor, so gradients match
the forward pass bit for bit.
"""

from __future__ import annotations

import numpy as np
from numba import njit

T_MIN = 1e-4          # per-pixel early-stop transmittance
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
MAHAL_HALF_MAX = 4.5  # half squared Mahalanobis radius of the 3-sigma ellipse


@njit(cache=True)
def composite_forward(order, mean2d, inv_cov, radii, colors, alpha_base, depths,
                      height, width, bg):
    color = np.zeros((height, width, 3))
    depth_num = np.zeros((height, width))
    alpha_img = np.zeros((height, width))
    trans = np.ones((height, width))
    last_pos = np.full((height, width), -1, dtype=np.int32)

    for pos in range(order.shape[0]):
        gi = order[pos]
        mx = mean2d[gi, 0]
        my = mean2d[gi, 1]
        x0 = max(0, int(np.floor(mx - radii[gi, 0])))
        x1 = min(width - 1, int(np.ceil(mx + radii[gi, 0])))
        y0 = max(0, int(np.floor(my - radii[gi, 1])))
        y1 = min(height - 1, int(np.ceil(my + radii[gi, 1])))
        if x0 > x1 or y0 > y1:
            continue
        ia = inv_cov[gi, 0, 0]
        ib = inv_cov[gi, 0, 1]
        ic = inv_cov[gi, 1, 1]
        ab = alpha_base[gi]
        for py in range(y0, y1 + 1):
            dy = py - my
            for px in range(x0, x1 + 1):
                t = trans[py, px]
                if t < T_MIN:
                    continue
                dx = px - mx
                sigma = 0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
                if sigma > MAHAL_HALF_MAX or sigma < 0.0:
                    continue
                alpha = ab * np.exp(-sigma)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                w = alpha * t
                color[py, px, 0] += w * colors[gi, 0]
                color[py, px, 1] += w * colors[gi, 1]
                color[py, px, 2] += w * colors[gi, 2]
                depth_num[py, px] += w * depths[gi]
                alpha_img[py, px] += w
                trans[py, px] = t * (1.0 - alpha)
                last_pos[py, px] = pos

    for py in range(height):
        for px in range(width):
            tf = trans[py, px]
            color[py, px, 0] += tf * bg[0]
            color[py, px, 1] += tf * bg[1]
            color[py, px, 2] += tf * bg[2]
    return color, depth_num, alpha_img, trans, last_pos


@njit(cache=True)
def composite_backward(order, mean2d, inv_cov, radii, colors, alpha_base, depths,
                       height, width, bg, trans_final, last_pos,
                       d_color_img, d_alpha_img):
    n = mean2d.shape[0]
    d_mean2d = np.zeros((n, 2))
    d_invcov = np.zeros((n, 3))  # d/d(a, b_total, c) of [[a, b], [b, c]]
    d_colors = np.zeros((n, 3))
    d_alpha_base = np.zeros(n)

    trans = trans_final.copy()
    suffix = np.empty((height, width, 3))
    for py in range(height):
        for px in range(width):
            tf = trans_final[py, px]
            suffix[py, px, 0] = tf * bg[0]
            suffix[py, px, 1] = tf * bg[1]
            suffix[py, px, 2] = tf * bg[2]

    for pos in range(order.shape[0] - 1, -1, -1):
        gi = order[pos]
        mx = mean2d[gi, 0]
        my = mean2d[gi, 1]
        x0 = max(0, int(np.floor(mx - radii[gi, 0])))
        x1 = min(width - 1, int(np.ceil(mx + radii[gi, 0])))
        y0 = max(0, int(np.floor(my - radii[gi, 1])))
        y1 = min(height - 1, int(np.ceil(my + radii[gi, 1])))
        if x0 > x1 or y0 > y1:
            continue
        ia = inv_cov[gi, 0, 0]
        ib = inv_cov[gi, 0, 1]
        ic = inv_cov[gi, 1, 1]
        ab = alpha_base[gi]
        for py in range(y0, y1 + 1):
            dy = py - my
            for px in range(x0, x1 + 1):
                if last_pos[py, px] < pos:
                    continue
                dx = px - mx
                sigma = 0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
                if sigma > MAHAL_HALF_MAX or sigma < 0.0:
                    continue
                g = np.exp(-sigma)
                alpha = ab * g
                clamped = alpha > ALPHA_MAX
                if clamped:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                one_m = 1.0 - alpha
                t_before = trans[py, px] / one_m
                w = alpha * t_before

                dl_da = 0.0
                for ch in range(3):
                    dc = d_color_img[py, px, ch]
                    d_colors[gi, ch] += w * dc
                    dl_da += dc * (t_before * colors[gi, ch]
                                   - suffix[py, px, ch] / one_m)
                dl_da += d_alpha_img[py, px] * (trans_final[py, px] / one_m)

                if not clamped:
                    d_alpha_base[gi] += dl_da * g
                    dl_dsigma = -g * (dl_da * ab)
                    d_invcov[gi, 0] += dl_dsigma * 0.5 * dx * dx
                    d_invcov[gi, 1] += dl_dsigma * dx * dy
                    d_invcov[gi, 2] += dl_dsigma * 0.5 * dy * dy
                    gx = dl_dsigma * (ia * dx + ib * dy)
                    gy = dl_dsigma * (ib * dx + ic * dy)
                    d_mean2d[gi, 0] -= gx
                    d_mean2d[gi, 1] -= gy

                for ch in range(3):
                    suffix[py, px, ch] += w * colors[gi, ch]
                trans[py, px] = t_before

    return d_mean2d, d_invcov, d_colors, d_alpha_base
