"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the package's kernels; each function is written from
the textbook definition with explicit loops in float64.
"""

import math

import numpy as np


def conv2d_loops(x, w, b, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u - padding
                                c = j * stride + v - padding
                                if 0 <= r < h and 0 <= c < wd:
                                    acc += float(x[ni, ci, r, c]) * float(w[co, ci, u, v])
                    out[ni, co, i, j] = acc
    return out


def maxpool_loops(x, k, stride, padding):
    n, c, h, wd = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -math.inf
                    for u in range(k):
                        for v in range(k):
                            r = i * stride + u - padding
                            q = j * stride + v - padding
                            if 0 <= r < h and 0 <= q < wd:
                                best = max(best, float(x[ni, ci, r, q]))
                    out[ni, ci, i, j] = best
    return out


def matmul_loops(x, w, b):
    n, din = x.shape
    dout = w.shape[0]
    out = np.zeros((n, dout))
    for i in range(n):
        for o in range(dout):
            acc = float(b[o]) if b is not None else 0.0
            for d in range(din):
                acc += float(x[i, d]) * float(w[o, d])
            out[i, o] = acc
    return out


def bilinear_pixel(img, out_h, out_w, i, j):
    """One output pixel of a half-pixel-centre, edge-clamped bilinear resize."""
    h, w = len(img), len(img[0])

    def coord(o, n_out, n_in):
        s = (o + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1)
        lo = int(math.floor(s))
        hi = min(lo + 1, n_in - 1)
        return lo, hi, s - lo

    y0, y1, fy = coord(i, out_h, h)
    x0, x1, fx = coord(j, out_w, w)
    top = img[y0][x0] * (1 - fx) + img[y0][x1] * fx
    bot = img[y1][x0] * (1 - fx) + img[y1][x1] * fx
    return top * (1 - fy) + bot * fy


def cross_entropy_mp(logits, labels):
    """Mean -log softmax via mpmath at 50 digits."""
    import mpmath

    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for row, y in zip(logits, labels):
        exps = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
        total += -mpmath.log(exps[y] / mpmath.fsum(exps))
    return float(total / len(labels))


def confusion_pairs(true, pred, c):
    cm = [[0] * c for _ in range(c)]
    for t in range(c):
        for p in range(c):
            cm[t][p] = sum(1 for a, b in zip(true, pred) if a == t and b == p)
    return cm


def report_from_pairs(true, pred, c):
    """Per-class (precision, recall, f1, support), accuracy, macro, weighted
    straight from the label pairs."""
    rows = []
    for k in range(c):
        tp = sum(1 for a, b in zip(true, pred) if a == k and b == k)
        fp = sum(1 for a, b in zip(true, pred) if a != k and b == k)
        fn = sum(1 for a, b in zip(true, pred) if a == k and b != k)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        rows.append((p, r, f, tp + fn))
    n = len(true)
    acc = sum(1 for a, b in zip(true, pred) if a == b) / n
    macro = tuple(sum(row[i] for row in rows) / c for i in range(3))
    weighted = tuple(sum(row[i] * row[3] for row in rows) / n for i in range(3))
    return rows, acc, macro, weighted


def early_stop_replay(losses, patience):
    """Number of updates consumed before stopping (None if never) and the
    best epoch, by replaying the rule from scratch at every prefix."""
    for end in range(1, len(losses) + 1):
        prefix = losses[:end]
        best = min(range(end), key=lambda i: (prefix[i], i))
        # first index attaining the minimum; later equal values are not improvements
        if end - 1 - best >= patience:
            return end, best + 1
    best = min(range(len(losses)), key=lambda i: (losses[i], i)) if losses else -1
    return None, best + 1


def numeric_grad(f, arr, h=1e-2):
    """Central differences of scalar f() wrt every entry of float32 ``arr``
    (perturbed in place)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-2):
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / den).max())
