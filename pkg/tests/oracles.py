"""Naive per-element reference implementations.

These use plain Python loops over numpy arrays and share no code with the
package, so they can serve as independent checks.
"""

import math

import numpy as np


def conv2d(x, w, b, stride=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o] if b is not None else 0.0
                    for c in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[i, c, y * stride + ky, xx * stride + kx] * w[o, c, ky, kx]
                    out[i, o, y, xx] = acc
    return out


def bilinear_at(img, x, y):
    """Sample a 2-D array at (x, y) with zero padding."""
    h, w = img.shape
    x0, y0 = math.floor(x), math.floor(y)
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            wx = (x - x0) if dx else (1 - (x - x0))
            wy = (y - y0) if dy else (1 - (y - y0))
            if 0 <= xi < w and 0 <= yi < h:
                total += wx * wy * img[yi, xi]
    return total


def bilinear_sample(inp, coords):
    n, c, h, w = inp.shape
    _, _, ho, wo = coords.shape
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            for y in range(ho):
                for x in range(wo):
                    out[i, ch, y, x] = bilinear_at(inp[i, ch], coords[i, 0, y, x], coords[i, 1, y, x])
    return out


def correlation(f1, f2):
    n, d, h, w = f1.shape
    out = np.zeros((n, h, w, h, w))
    for i in range(n):
        for y1 in range(h):
            for x1 in range(w):
                for y2 in range(h):
                    for x2 in range(w):
                        out[i, y1, x1, y2, x2] = sum(f1[i, k, y1, x1] * f2[i, k, y2, x2] for k in range(d))
    return out / math.sqrt(d)


def avg_pool2(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for i in range(n):
        for ch in range(c):
            for y in range(h // 2):
                for xx in range(w // 2):
                    out[i, ch, y, xx] = (
                        x[i, ch, 2 * y, 2 * xx] + x[i, ch, 2 * y + 1, 2 * xx]
                        + x[i, ch, 2 * y, 2 * xx + 1] + x[i, ch, 2 * y + 1, 2 * xx + 1]
                    ) / 4
    return out


def warp(entity, flow):
    """entity [C,H,W], flow [2,H,W]."""
    c, h, w = entity.shape
    out = np.zeros_like(entity, dtype=float)
    for y in range(h):
        for x in range(w):
            sx, sy = x + flow[0, y, x], y + flow[1, y, x]
            for ch in range(c):
                out[ch, y, x] = bilinear_at(entity[ch], sx, sy)
    return out


def compose(f_ab, f_bc):
    return f_ab + warp(f_bc, f_ab)


def epe(f1, f2, mask=None):
    h, w = f1.shape[1:]
    total, count = 0.0, 0
    for y in range(h):
        for x in range(w):
            if mask is None or mask[y, x]:
                total += math.hypot(f1[0, y, x] - f2[0, y, x], f1[1, y, x] - f2[1, y, x])
                count += 1
    return total / count


def occlusion(f_ij, f_ji, eps):
    h, w = f_ij.shape[1:]
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            sx, sy = x + f_ij[0, y, x], y + f_ij[1, y, x]
            ru = f_ij[0, y, x] + bilinear_at(f_ji[0], sx, sy)
            rv = f_ij[1, y, x] + bilinear_at(f_ji[1], sx, sy)
            out[y, x] = math.hypot(ru, rv) <= eps
    return out


def dark(cube, eps):
    c, h, w = cube.shape
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            out[y, x] = sum(cube[k, y, x] for k in range(c)) / c > eps
    return out


def warp_mask(mask, flow):
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            sx, sy = x + flow[0, y, x], y + flow[1, y, x]
            if 0 <= sx <= w - 1 and 0 <= sy <= h - 1:
                out[y, x] = bilinear_at(mask.astype(float), sx, sy) >= 0.5
    return out


def combined(m_ac, m_ab, m_bc, m_db, f_ab):
    return m_ac & m_ab & warp_mask(m_bc & m_db, f_ab)


def mask_iou_error(flow, src, dst):
    moved = warp_mask(src, flow)
    inter = np.logical_and(moved, dst).sum()
    union = np.logical_or(moved, dst).sum()
    return 0.0 if union == 0 else 1 - inter / union


def cycle_loss(ab_list, bc_list, f_ac, mask, iterations):
    """Per-triplet masked cycle EPE summed over the first iterations (one triplet)."""
    total = 0.0
    for k in range(iterations):
        total += epe(compose(ab_list[k], bc_list[k]), f_ac, mask)
    return total


def adam_scalar(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
    return p
