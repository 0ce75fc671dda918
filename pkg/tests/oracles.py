"""Independent reference implementations used to check the real kernels.

Everything here is deliberately naive: explicit loops, no shared code with
the package internals.
"""

import numpy as np


def conv2d_loop(x, w, b, stride, pad, f32_ordered=False):
    """Quadruple-loop cross-correlation.

    With f32_ordered=True, accumulates in float32 starting from the bias in
    (channel, ky, kx) order, matching the production kernel bit-for-bit.
    """
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    out = np.zeros((n, co, oh, ow), dtype=x.dtype)
    for nn in range(n):
        for c in range(co):
            for i in range(oh):
                for j in range(ow):
                    if f32_ordered:
                        acc = np.float32(b[c])
                        for cc in range(ci):
                            for ky in range(kh):
                                for kx in range(kw):
                                    acc = np.float32(
                                        acc + w[c, cc, ky, kx] * xp[nn, cc, i * stride + ky, j * stride + kx]
                                    )
                        out[nn, c, i, j] = acc
                    else:
                        acc = 0.0
                        for cc in range(ci):
                            for ky in range(kh):
                                for kx in range(kw):
                                    acc += float(w[c, cc, ky, kx]) * float(
                                        xp[nn, cc, i * stride + ky, j * stride + kx]
                                    )
                        out[nn, c, i, j] = acc + float(b[c])
    return out


def maxpool2_loop(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2), dtype=x.dtype)
    arg = np.zeros((c, h // 2, w // 2), dtype=np.intp)
    for cc in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                win = x[cc, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].ravel()
                out[cc, i, j] = win.max()
                arg[cc, i, j] = int(np.argmax(win))
    return out, arg


def central_diff(f, x, eps=1e-3):
    """Central finite-difference gradient of scalar f at x, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    """Worst-case elementwise relative error with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def auc_pairs(scores, labels):
    """O(n^2) Mann-Whitney AUC with half credit for ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def flood_fill_components(mask):
    """4-connected components of a binary mask via BFS; returns label array and count."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.intp)
    current = 0
    for sy in range(h):
        for sx in range(w):
            if mask[sy, sx] and labels[sy, sx] == 0:
                current += 1
                stack = [(sy, sx)]
                labels[sy, sx] = current
                while stack:
                    y, x = stack.pop()
                    for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and labels[ny, nx] == 0:
                            labels[ny, nx] = current
                            stack.append((ny, nx))
    return labels, current


def label_patch_counting(rect, mask):
    """Positivity rule by brute-force pixel counting over flood-fill lesions."""
    x0, y0, w, h = rect
    window = mask[y0 : y0 + h, x0 : x0 + w]
    if window.sum() / float(w * h) >= 0.3:
        return True
    labels, count = flood_fill_components(mask)
    for lesion in range(1, count + 1):
        total = int((labels == lesion).sum())
        inside = int((labels[y0 : y0 + h, x0 : x0 + w] == lesion).sum())
        if total and inside / total >= 0.3:
            return True
    return False


def quantile_by_counting(values, q):
    """Smallest sample with (strictly-above fraction) <= q, by linear scan."""
    vals = sorted(values)
    n = len(vals)
    for v in vals:
        above = sum(1 for u in vals if u > v)
        if above / n <= q:
            return v
    return vals[-1]
