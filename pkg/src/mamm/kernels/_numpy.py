"""Pure-numpy reference implementations of the hot loops."""

import numpy as np


def _pairwise_dist(a, b):
    dx = a[:, 0, None] - b[None, :, 0]
    dy = a[:, 1, None] - b[None, :, 1]
    return np.sqrt(dx * dx + dy * dy)


def kernel_matrix(a, b, r):
    """Exponential kernel ``exp(-|a_i - b_j| / r)`` for all pairs."""
    return np.exp(-_pairwise_dist(a, b) / r)


def nystrom_rows(coords, centers, r, col_mean, proj):
    """Rows ``(c(s_i) - col_mean) @ proj`` for every site ``s_i``.

    The product is accumulated knot by knot in a fixed order rather than
    through BLAS, so a row's value never depends on which other rows share
    its block.
    """
    c = kernel_matrix(coords, centers, r)
    c -= col_mean
    out = np.zeros((coords.shape[0], proj.shape[1]))
    for l in range(centers.shape[0]):
        out += c[:, l, None] * proj[l]
    return out


def kmeans_assign(points, centers):
    """Nearest-center labels and squared distances."""
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(points.shape[0]), labels]


def mst_max_edge(points):
    """Longest edge of the Euclidean MST by dense Prim, O(n^2) time, O(n) memory."""
    n = points.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    best[0] = 0.0
    longest = 0.0
    for _ in range(n):
        cand = np.where(in_tree, np.inf, best)
        u = int(cand.argmin())
        longest = max(longest, cand[u])
        in_tree[u] = True
        d = np.hypot(points[:, 0] - points[u, 0], points[:, 1] - points[u, 1])
        np.minimum(best, d, out=best, where=~in_tree)
    return float(longest)


def kernel_offdiag_sum(points, r, chunk=2048):
    """``1' C0 1`` for the zero-diagonal exponential kernel, in row chunks."""
    total = 0.0
    n = points.shape[0]
    for start in range(0, n, chunk):
        block = kernel_matrix(points[start:start + chunk], points, r)
        total += block.sum()
    return float(total - n)
