"""numba implementations of the hot loops.

Signatures mirror :mod:`mamm.kernels._numpy` exactly; see that module for the
contracts. All kernels release the GIL so block workers can run them
concurrently from threads.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def kernel_matrix(a, b, r):
    n, m = a.shape[0], b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        ax, ay = a[i, 0], a[i, 1]
        for j in range(m):
            dx = ax - b[j, 0]
            dy = ay - b[j, 1]
            out[i, j] = math.exp(-math.sqrt(dx * dx + dy * dy) / r)
    return out


@njit(cache=True, nogil=True)
def nystrom_rows(coords, centers, r, col_mean, proj):
    n, L = coords.shape[0], centers.shape[0]
    k = proj.shape[1]
    out = np.zeros((n, k))
    c = np.empty(L)
    for i in range(n):
        sx, sy = coords[i, 0], coords[i, 1]
        for l in range(L):
            dx = sx - centers[l, 0]
            dy = sy - centers[l, 1]
            c[l] = math.exp(-math.sqrt(dx * dx + dy * dy) / r) - col_mean[l]
        # fixed accumulation order over l keeps each row independent of the block
        for l in range(L):
            a = c[l]
            for j in range(k):
                out[i, j] += a * proj[l, j]
    return out


@njit(cache=True, nogil=True)
def kmeans_assign(points, centers):
    n, L = points.shape[0], centers.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dist2 = np.empty(n)
    for i in range(n):
        best = np.inf
        arg = 0
        px, py = points[i, 0], points[i, 1]
        for l in range(L):
            dx = px - centers[l, 0]
            dy = py - centers[l, 1]
            d = dx * dx + dy * dy
            if d < best:
                best = d
                arg = l
        labels[i] = arg
        dist2[i] = best
    return labels, dist2


@njit(cache=True, nogil=True)
def mst_max_edge(points):
    n = points.shape[0]
    in_tree = np.zeros(n, dtype=np.bool_)
    best = np.full(n, np.inf)
    best[0] = 0.0
    longest = 0.0
    for _ in range(n):
        u = -1
        du = np.inf
        for v in range(n):
            if not in_tree[v] and best[v] < du:
                du = best[v]
                u = v
        in_tree[u] = True
        if du > longest:
            longest = du
        ux, uy = points[u, 0], points[u, 1]
        for v in range(n):
            if not in_tree[v]:
                dx = ux - points[v, 0]
                dy = uy - points[v, 1]
                d = math.sqrt(dx * dx + dy * dy)
                if d < best[v]:
                    best[v] = d
    return longest


@njit(cache=True, nogil=True)
def kernel_offdiag_sum(points, r):
    n = points.shape[0]
    total = 0.0
    for i in range(n):
        ix, iy = points[i, 0], points[i, 1]
        row = 0.0
        for j in range(i + 1, n):
            dx = ix - points[j, 0]
            dy = iy - points[j, 1]
            row += math.exp(-math.sqrt(dx * dx + dy * dy) / r)
        total += row
    return 2.0 * total
