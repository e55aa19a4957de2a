"""Independent brute-force reference implementations used by the tests.

These loop over single cells with the ``math`` module and share no code
with the package.
"""
import math

import numpy as np


def polar_from_cart(cart, x_range, y_range, res, rbins, abins, max_range, fov):
    k, h, w = cart.shape
    out = np.zeros((k, rbins, abins), dtype=cart.dtype)
    dr, da = max_range / rbins, fov / abins
    for i in range(rbins):
        r = (i + 0.5) * dr
        for j in range(abins):
            th = -fov / 2 + (j + 0.5) * da
            x, y = r * math.cos(th), r * math.sin(th)
            ci = math.floor((x - x_range[0]) / res)
            cj = math.floor((y - y_range[0]) / res)
            if 0 <= ci < h and 0 <= cj < w:
                out[:, i, j] = cart[:, ci, cj]
    return out


def cart_from_polar(polar, x_range, y_range, res, max_range, fov):
    k, rbins, abins = polar.shape
    h = round((x_range[1] - x_range[0]) / res)
    w = round((y_range[1] - y_range[0]) / res)
    out = np.zeros((k, h, w), dtype=polar.dtype)
    dr, da = max_range / rbins, fov / abins
    for ci in range(h):
        x = x_range[0] + (ci + 0.5) * res
        for cj in range(w):
            y = y_range[0] + (cj + 0.5) * res
            r, th = math.hypot(x, y), math.atan2(y, x)
            if abs(th) >= fov / 2 or r >= max_range:
                continue
            i, j = math.floor(r / dr), math.floor((th + fov / 2) / da)
            if 0 <= i < rbins and 0 <= j < abins:
                out[:, ci, cj] = polar[:, i, j]
    return out


def pooled_best_iou(preds, gts, valids, thresholds):
    """Return (best IoU, lowest best threshold) by explicit enumeration."""
    best, best_t = -1.0, None
    for t in sorted(thresholds):
        inter = union = 0
        for p, g, v in zip(preds, gts, valids):
            for a, b, m in zip(np.ravel(p), np.ravel(g), np.ravel(v)):
                if not m:
                    continue
                hit = a >= t
                inter += int(hit and b)
                union += int(hit or b)
        val = 1.0 if union == 0 else inter / union
        if val > best:
            best, best_t = val, t
    return best, best_t


def bce(y_hat, y, w, eps=1e-7):
    """Mean class-weighted BCE over all elements of channel-first arrays."""
    y_hat = np.clip(np.asarray(y_hat, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(y, dtype=np.float64)
    total, count = 0.0, 0
    for idx in np.ndindex(y.shape):
        k = idx[-3]
        p, t = y_hat[idx], y[idx]
        total += -w[k] * (t * math.log(p) + (1 - t) * math.log(1 - p))
        count += 1
    return total / count
