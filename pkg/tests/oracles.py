"""Slow, obviously-correct reference implementations used by the tests."""
import math

import numpy as np


def conv_loops(x, w, stride, pad):
    """Six nested loops, the textbook definition."""
    c_in, h, wid = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wid + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wid] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


def brute_ntxent(z, tau):
    """Explicit double loop, no stabilization; views 2k/2k+1 are positives."""
    z = [list(map(float, row)) for row in z]
    m = len(z)

    def sim(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    total = 0.0
    for i in range(m):
        pos = i ^ 1
        num = math.exp(sim(z[i], z[pos]) / tau)
        den = num
        for j in range(m):
            if j != i and j != pos:
                den += math.exp(sim(z[i], z[j]) / tau)
        total -= math.log(num / den)
    return total


def brute_kappa(pred, true, k):
    """Histogram loops over a k x k table of counts."""
    n = len(pred)
    counts = [[0] * k for _ in range(k)]
    for p, t in zip(pred, true):
        counts[int(t)][int(p)] += 1
    rows = [sum(counts[i]) for i in range(k)]
    cols = [sum(counts[i][j] for i in range(k)) for j in range(k)]
    num = den = 0.0
    for i in range(k):
        for j in range(k):
            w = (i - j) ** 2 / (k - 1) ** 2
            num += w * counts[i][j] / n
            den += w * (rows[i] / n) * (cols[j] / n)
    return 1.0 if den == 0 else 1.0 - num / den
