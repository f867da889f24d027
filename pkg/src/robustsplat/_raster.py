"""Serial numba kernels for splat rasterization.

All kernels run single-threaded with no fastmath so repeated runs are bitwise
identical. Splat arrays arrive pre-sorted front-to-back; per-splat pixel
coverage is a 3-sigma axis-aligned bounding box, flattened row-major into
shared cache arrays via per-splat offsets.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def forward_kernel(means, inv_a, inv_b, cos_t, sin_t, opac, chat, bbox, offsets,
                   alpha_flat, t_flat, width, height,
                   color_accum, trans):
    """Front-to-back compositing; fills alpha/transmittance caches.

    color_accum must start zeroed and trans start at ones; on return trans
    holds the final per-pixel transmittance and color_accum the foreground
    sum, so image = color_accum + bg * trans.
    """
    n = means.shape[0]
    for k in range(n):
        w_lo, w_hi, h_lo, h_hi = bbox[k, 0], bbox[k, 1], bbox[k, 2], bbox[k, 3]
        if w_lo > w_hi or h_lo > h_hi:
            continue
        row_len = w_hi - w_lo + 1
        off = offsets[k]
        mx, my = means[k, 0], means[k, 1]
        a, b = inv_a[k], inv_b[k]
        ct, st = cos_t[k], sin_t[k]
        o = opac[k]
        c0, c1, c2 = chat[k, 0], chat[k, 1], chat[k, 2]
        for h in range(h_lo, h_hi + 1):
            dy = (h + 0.5) / height - my
            base = off + (h - h_lo) * row_len - w_lo
            for w in range(w_lo, w_hi + 1):
                dx = (w + 0.5) / width - mx
                t1 = dx * ct + dy * st
                t2 = -dx * st + dy * ct
                q = a * t1 * t1 + b * t2 * t2
                ap = o * np.exp(-0.5 * q)
                t_cur = trans[h, w]
                alpha_flat[base + w] = ap
                t_flat[base + w] = t_cur
                wgt = ap * t_cur
                color_accum[h, w, 0] += c0 * wgt
                color_accum[h, w, 1] += c1 * wgt
                color_accum[h, w, 2] += c2 * wgt
                trans[h, w] = t_cur * (1.0 - ap)


@njit(cache=True)
def backward_kernel(means, inv_a, inv_b, cos_t, sin_t, chat, bbox, offsets,
                    alpha_flat, t_flat, grad_img,
                    width, height,
                    g_mu, g_s, g_th, g_asum, g_chat, fro2_flat, suffix):
    """Back-to-front reverse pass.

    suffix must arrive as background * final-transmittance per pixel/channel;
    it is consumed as scratch, growing into the color contributed behind each
    splat. Outputs (g_mu, g_s, g_th, g_asum, g_chat) accumulate in the sorted
    splat order; fro2_flat receives the per-pixel squared Frobenius norm of
    d(image)/d(mean), independent of grad_img, for utilization.
    """
    n = means.shape[0]
    for k in range(n - 1, -1, -1):
        w_lo, w_hi, h_lo, h_hi = bbox[k, 0], bbox[k, 1], bbox[k, 2], bbox[k, 3]
        if w_lo > w_hi or h_lo > h_hi:
            continue
        row_len = w_hi - w_lo + 1
        off = offsets[k]
        mx, my = means[k, 0], means[k, 1]
        a, b = inv_a[k], inv_b[k]
        ct, st = cos_t[k], sin_t[k]
        c0, c1, c2 = chat[k, 0], chat[k, 1], chat[k, 2]
        for h in range(h_lo, h_hi + 1):
            dy = (h + 0.5) / height - my
            base = off + (h - h_lo) * row_len - w_lo
            for w in range(w_lo, w_hi + 1):
                dx = (w + 0.5) / width - mx
                ap = alpha_flat[base + w]
                t_cur = t_flat[base + w]
                one_m = 1.0 - ap
                d0 = c0 * t_cur - suffix[h, w, 0] / one_m
                d1 = c1 * t_cur - suffix[h, w, 1] / one_m
                d2 = c2 * t_cur - suffix[h, w, 2] / one_m
                g_alpha = (grad_img[h, w, 0] * d0 + grad_img[h, w, 1] * d1
                           + grad_img[h, w, 2] * d2)
                t1 = dx * ct + dy * st
                t2 = -dx * st + dy * ct
                mdx = a * t1 * ct - b * t2 * st
                mdy = a * t1 * st + b * t2 * ct
                ga = g_alpha * ap
                g_mu[k, 0] += ga * mdx
                g_mu[k, 1] += ga * mdy
                g_s[k, 0] += ga * a * t1 * t1
                g_s[k, 1] += ga * b * t2 * t2
                g_th[k] -= ga * (a - b) * t1 * t2
                g_asum[k] += ga
                wgt = ap * t_cur
                g_chat[k, 0] += grad_img[h, w, 0] * wgt
                g_chat[k, 1] += grad_img[h, w, 1] * wgt
                g_chat[k, 2] += grad_img[h, w, 2] * wgt
                fro2_flat[base + w] = ((d0 * d0 + d1 * d1 + d2 * d2)
                                       * ap * ap * (mdx * mdx + mdy * mdy))
                suffix[h, w, 0] += c0 * wgt
                suffix[h, w, 1] += c1 * wgt
                suffix[h, w, 2] += c2 * wgt


@njit(cache=True)
def util_kernel(bbox, offsets, fro2_flat, mask, out):
    """Per-splat sum of mask-gated position-gradient norms over bbox pixels."""
    n = bbox.shape[0]
    for k in range(n):
        w_lo, w_hi, h_lo, h_hi = bbox[k, 0], bbox[k, 1], bbox[k, 2], bbox[k, 3]
        if w_lo > w_hi or h_lo > h_hi:
            continue
        row_len = w_hi - w_lo + 1
        off = offsets[k]
        acc = 0.0
        for h in range(h_lo, h_hi + 1):
            base = off + (h - h_lo) * row_len - w_lo
            for w in range(w_lo, w_hi + 1):
                if mask[h, w] != 0.0:
                    acc += fro2_flat[base + w]
        out[k] = acc
