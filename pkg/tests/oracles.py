"""Independent reference implementations used to pin expected values.

Everything here is deliberately naive (loops, brute force, textbook
formulas) and shares no code with the library under test.
"""

import itertools
import math

import numpy as np


def central_diff_grad(f, x, step=1e-6):
    """Plain central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def mse_loops(a, b):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    total = 0.0
    for i in range(a.shape[0]):
        for d in range(a.shape[1]):
            total += (a[i, d] - b[i, d]) ** 2
    return total / a.shape[0]


def metric_energy_loops(P, dz):
    n = len(dz)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += dz[i] * P[i, j] * dz[j]
    return total


def dtw_dp(a, b):
    """Classic hard-min DTW over squared Euclidean costs."""
    a, b = np.asarray(a), np.asarray(b)
    na, nb = a.shape[0], b.shape[0]
    cost = np.full((na, nb), np.inf)
    for i in range(na):
        for j in range(nb):
            d = float(np.sum((a[i] - b[j]) ** 2))
            if i == 0 and j == 0:
                cost[i, j] = d
            elif i == 0:
                cost[i, j] = d + cost[i, j - 1]
            elif j == 0:
                cost[i, j] = d + cost[i - 1, j]
            else:
                cost[i, j] = d + min(cost[i - 1, j], cost[i, j - 1], cost[i - 1, j - 1])
    return float(cost[-1, -1])


def dtw_brute_force(a, b):
    """Exhaustive search over monotone alignment paths (lengths <= ~6)."""
    a, b = np.asarray(a), np.asarray(b)
    na, nb = a.shape[0], b.shape[0]

    def d(i, j):
        return float(np.sum((a[i] - b[j]) ** 2))

    best = [math.inf]

    def walk(i, j, acc):
        if acc >= best[0]:
            return
        if i == na - 1 and j == nb - 1:
            best[0] = min(best[0], acc)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            ni, nj = i + di, j + dj
            if ni < na and nj < nb:
                walk(ni, nj, acc + d(ni, nj))

    walk(0, 0, d(0, 0))
    return best[0]


def softmin(values, beta):
    m = min(values)
    return -beta * math.log(sum(math.exp(-(v - m) / beta) for v in values)) + m


def soft_dtw_dp(a, b, beta):
    a, b = np.asarray(a), np.asarray(b)
    na, nb = a.shape[0], b.shape[0]
    cell = np.zeros((na, nb))
    for i in range(na):
        for j in range(nb):
            d = float(np.sum((a[i] - b[j]) ** 2))
            if i == 0 and j == 0:
                cell[i, j] = d
            elif i == 0:
                cell[i, j] = d + cell[i, j - 1]
            elif j == 0:
                cell[i, j] = d + cell[i - 1, j]
            else:
                cell[i, j] = d + softmin(
                    [cell[i - 1, j], cell[i, j - 1], cell[i - 1, j - 1]], beta)
    return float(cell[-1, -1])


def term_two_series(alpha, R, gamma, H, M):
    """Decay-weighted average written out as the finite sum."""
    return sum(math.exp(-2.0 * gamma * i / H) for i in range(H)) * alpha ** 2 * R ** 2 / (H * M)


def svd_pinv(P):
    return np.linalg.pinv(P)


def enumerate_alignments_count(na, nb):
    """Delannoy-style path count, sanity check for the brute force."""
    table = np.zeros((na, nb), dtype=np.int64)
    table[0, :] = 1
    table[:, 0] = 1
    for i in range(1, na):
        for j in range(1, nb):
            table[i, j] = table[i - 1, j] + table[i, j - 1] + table[i - 1, j - 1]
    return int(table[-1, -1])


def uniform_ball_radius_quantile(n_dim, q):
    """Radius below which a fraction q of uniform-ball mass lies."""
    return q ** (1.0 / n_dim)
