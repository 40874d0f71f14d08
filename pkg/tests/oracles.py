"""Reference computations kept independent of the library code paths."""
import math

import numpy as np


def mmd2_pairwise(x, y, biased):
    """O(n^2) MMD^2 with the cubic polynomial kernel, one pair at a time."""
    d = x.shape[1]

    def k(u, v):
        return (float(np.dot(u, v)) / d + 1.0) ** 3

    m, n = len(x), len(y)
    xx = [k(x[i], x[j]) for i in range(m) for j in range(m) if biased or i != j]
    yy = [k(y[i], y[j]) for i in range(n) for j in range(n) if biased or i != j]
    xy = [k(x[i], y[j]) for i in range(m) for j in range(n)]
    return math.fsum(xx) / len(xx) + math.fsum(yy) / len(yy) - 2.0 * math.fsum(xy) / len(xy)


def diagonal_gaussian_fid(m1, s1, m2, s2):
    """Closed form for independent coordinates: sum (m - m')^2 + sum (sigma - sigma')^2."""
    m1, s1, m2, s2 = map(np.asarray, (m1, s1, m2, s2))
    return float(np.sum((m1 - m2) ** 2) + np.sum((s1 - s2) ** 2))


def brute_force_neighbors(query, corpus, k, metric):
    dists = [metric(query, c) for c in corpus]
    order = sorted(range(len(corpus)), key=lambda i: (dists[i], i))
    return [(i, dists[i]) for i in order[:k]]


def rms(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return math.sqrt(math.fsum((a - b) ** 2) / a.size)


def central_difference(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)
