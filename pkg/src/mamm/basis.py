"""Moran eigenvector bases via k-means knots and Nystrom extension.

The pipeline is ``select_knots -> knot_eigen -> build_factory``; the factory
then turns any block of coordinates into rows of the approximate Moran
eigenvector matrix with :func:`nystrom_block`. Every factory object is
immutable, and row generation is a pure function of the coordinates, so
blocks can be produced in any order or partition.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import Delaunay, QhullError
from scipy.special import logsumexp

from . import kernels
from .errors import (
    DegenerateGeometryError,
    DegenerateInputError,
    DegenerateWeightsError,
    EmptyBasisError,
    InvalidInputError,
    InvalidParameterError,
)

EIGENVALUE_FLOOR = 1e-8  # relative to the largest eigenvalue
MAX_EIGENPAIRS = 200
MST_SITE_LIMIT = 100_000
SCALING_MODES = ("as_printed", "n_over_l")

_PRIM_LIMIT = 2048


def as_coords(points, name="coords"):
    """Validate and return an (n, 2) float array of planar coordinates."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError(f"{name} must have shape (n, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr).all(axis=1)))
        raise InvalidInputError(f"{name} contains {bad} row(s) with non-finite coordinates")
    return np.ascontiguousarray(arr)


def exp_kernel(d, r):
    """Exponential distance decay ``exp(-d / r)``."""
    if not np.isfinite(r) or r <= 0:
        raise InvalidParameterError(f"kernel range must be finite and positive, got {r!r}")
    d = np.asarray(d, dtype=np.float64)
    if np.any(~np.isfinite(d)) or np.any(d < 0):
        raise InvalidParameterError("distances must be finite and nonnegative")
    out = np.exp(-d / r)
    return float(out) if out.ndim == 0 else out


def proximity_matrix(points, r, zero_diagonal=True):
    """Dense exponential-kernel proximity matrix among ``points``.

    With ``zero_diagonal`` this is the C0 matrix used by the Moran
    coefficient; otherwise the diagonal holds the kernel at distance zero.
    """
    pts = as_coords(points, "points")
    C = kernels.kernel_matrix(pts, pts, r)
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 0.0 if zero_diagonal else 1.0)
    return C


def mst_range(points):
    """Length of the longest edge in the Euclidean minimum spanning tree.

    Duplicate locations are collapsed first (they join the tree at zero
    cost). Large inputs go through a Delaunay triangulation, which contains
    the Euclidean MST; small or collinear inputs use dense Prim.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 2:
        raise InvalidInputError("mst_range needs at least two points")
    pts = as_coords(pts, "points")
    uniq = np.unique(pts, axis=0)
    if uniq.shape[0] < 2:
        raise DegenerateGeometryError("all points coincide; the spanning tree has no edges")
    if uniq.shape[0] <= _PRIM_LIMIT:
        return kernels.mst_max_edge(uniq)
    try:
        tri = Delaunay(uniq)
    except QhullError:
        return kernels.mst_max_edge(uniq)
    if len(tri.coplanar):
        return kernels.mst_max_edge(uniq)
    s = tri.simplices
    edges = np.concatenate([s[:, [0, 1]], s[:, [1, 2]], s[:, [0, 2]]])
    edges.sort(axis=1)
    edges = np.unique(edges, axis=0)
    w = np.hypot(*(uniq[edges[:, 0]] - uniq[edges[:, 1]]).T)
    n = uniq.shape[0]
    graph = sparse.coo_matrix((w, (edges[:, 0], edges[:, 1])), shape=(n, n)).tocsr()
    tree = minimum_spanning_tree(graph)
    if tree.nnz != n - 1:
        return kernels.mst_max_edge(uniq)
    return float(tree.data.max())


@dataclass(frozen=True)
class KnotSet:
    centers: np.ndarray
    range_r: float
    range_source: str = "sites"

    def __post_init__(self):
        c = as_coords(self.centers, "centers")
        if c.shape[0] < 1:
            raise InvalidParameterError("a knot set needs at least one center")
        if not np.isfinite(self.range_r) or self.range_r <= 0:
            raise InvalidParameterError(f"range_r must be positive, got {self.range_r!r}")
        object.__setattr__(self, "centers", c)

    @property
    def L(self):
        return self.centers.shape[0]


def _kmeanspp(pts, L, rng):
    n = pts.shape[0]
    centers = np.empty((L, 2))
    centers[0] = pts[rng.integers(n)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for j in range(1, L):
        cum = np.cumsum(d2)
        total = cum[-1]
        if total > 0:
            idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[j] = pts[idx]
        np.minimum(d2, ((pts - centers[j]) ** 2).sum(axis=1), out=d2)
    return centers


def kmeans(points, L, seed=0, max_iter=100, rel_tol=1e-8):
    """Lloyd k-means with k-means++ seeding.

    Stops when no center moves by more than ``rel_tol`` times the coordinate
    span. An empty cluster is re-seeded at the point farthest from its
    assigned center.

    Returns
    -------
    centers : (L, 2) array
    n_iter : int
    """
    pts = as_coords(points, "points")
    n = pts.shape[0]
    if not 1 <= L <= n:
        raise InvalidParameterError(f"need 1 <= L <= N, got L={L}, N={n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(pts, L, rng)
    span = float(np.ptp(pts, axis=0).max())
    tol = rel_tol * span
    it = 0
    for it in range(1, max_iter + 1):
        labels, d2 = kernels.kmeans_assign(pts, centers)
        counts = np.bincount(labels, minlength=L)
        new = np.empty_like(centers)
        new[:, 0] = np.bincount(labels, weights=pts[:, 0], minlength=L)
        new[:, 1] = np.bincount(labels, weights=pts[:, 1], minlength=L)
        filled = counts > 0
        new[filled] /= counts[filled, None]
        if not filled.all():
            d2 = d2.copy()
            for j in np.flatnonzero(~filled):
                far = int(np.argmax(d2))
                new[j] = pts[far]
                d2[far] = -1.0
        move = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if move <= tol:
            break
    return centers, it


def select_knots(sites, L, seed=0, range_r=None, site_limit=MST_SITE_LIMIT, n_total=None):
    """k-means knots plus the kernel range.

    The range is the longest MST edge over ``sites`` when the (declared)
    sample size is at most ``site_limit``, and over the knot centers
    otherwise. ``n_total`` is the full dataset size when ``sites`` is only a
    sample of it. An explicit ``range_r`` skips the MST entirely.
    """
    pts = as_coords(sites, "sites")
    n = pts.shape[0]
    if L < 1 or L > n:
        raise InvalidParameterError(f"need 1 <= L <= N, got L={L}, N={n}")
    centers, _ = kmeans(pts, L, seed=seed)
    if range_r is not None:
        return KnotSet(centers, float(range_r), "given")
    n_total = n if n_total is None else int(n_total)
    if n_total <= site_limit:
        return KnotSet(centers, mst_range(pts), "sites")
    return KnotSet(centers, mst_range(centers), "knots")


@dataclass(frozen=True)
class KnotEigen:
    E_L: np.ndarray
    Lambda_L: np.ndarray
    col_mean_row: np.ndarray

    @property
    def L(self):
        return self.E_L.shape[0]

    @property
    def L_pos(self):
        return self.Lambda_L.shape[0]


def _fix_signs(E):
    idx = np.abs(E).argmax(axis=0)
    signs = np.sign(E[idx, np.arange(E.shape[1])])
    signs[signs == 0] = 1.0
    return E * signs


def knot_eigen(knots, max_pairs=MAX_EIGENPAIRS):
    """Positive eigenpairs of the doubly centered knot kernel matrix."""
    if knots.L < 2:
        raise InvalidParameterError("knot_eigen needs at least two knots")
    C = proximity_matrix(knots.centers, knots.range_r, zero_diagonal=False)
    col_mean = C.mean(axis=0)
    mcm = C - col_mean[None, :] - C.mean(axis=1)[:, None] + C.mean()
    mcm = 0.5 * (mcm + mcm.T)
    w, V = np.linalg.eigh(mcm)
    w, V = w[::-1], V[:, ::-1]
    if w[0] <= 0:
        raise EmptyBasisError(
            f"no positive eigenvalue for {knots.L} knots with range {knots.range_r:g} "
            f"({np.unique(knots.centers, axis=0).shape[0]} distinct locations)"
        )
    keep = w > EIGENVALUE_FLOOR * w[0]
    if max_pairs is not None:
        keep &= np.arange(w.size) < max_pairs
    return KnotEigen(_fix_signs(V[:, keep]), w[keep].copy(), col_mean)


def approx_eigenvalues(eig, N, scaling_mode="as_printed"):
    """Eigenvalues of the full-sample operator extrapolated from the knots.

    Returns the values and a boolean mask of the knot eigenpairs kept (those
    whose extrapolated value stays above the floor).
    """
    L = eig.L
    if N < L:
        raise InvalidParameterError(f"N={N} must be at least the knot count L={L}")
    if scaling_mode == "as_printed":
        factor = (N + L) / L
    elif scaling_mode == "n_over_l":
        factor = N / L
    else:
        raise InvalidParameterError(f"unknown scaling_mode {scaling_mode!r}; expected one of {SCALING_MODES}")
    lam = factor * (eig.Lambda_L + 1.0) - 1.0
    keep = lam > EIGENVALUE_FLOOR * max(lam.max(), 0.0)
    keep &= lam > 0
    return lam[keep], keep


@dataclass(frozen=True)
class BasisFactory:
    """Generates approximate Moran eigenvector rows for arbitrary sites."""

    knots: KnotSet
    eig: KnotEigen
    N: int
    lambda_hat: np.ndarray
    scaling_mode: str = "as_printed"

    @property
    def L_pos(self):
        return self.lambda_hat.shape[0]

    @cached_property
    def proj(self):
        # E_L (Lambda_L + I)^-1
        return np.ascontiguousarray(self.eig.E_L / (self.eig.Lambda_L + 1.0))

    def block(self, coords):
        return nystrom_block(self, coords)


def build_factory(knots, N, scaling_mode="as_printed", max_pairs=MAX_EIGENPAIRS):
    eig = knot_eigen(knots, max_pairs=max_pairs)
    lam, keep = approx_eigenvalues(eig, N, scaling_mode)
    if not keep.any():
        raise EmptyBasisError("every extrapolated eigenvalue fell below the floor")
    if not keep.all():
        eig = KnotEigen(eig.E_L[:, keep], eig.Lambda_L[keep], eig.col_mean_row)
    return BasisFactory(knots, eig, int(N), lam, scaling_mode)


def nystrom_block(factory, coords_block):
    """Approximate Moran eigenvector rows for one block of sites."""
    pts = as_coords(coords_block, "coords_block")
    if pts.shape[0] == 0:
        return np.zeros((0, factory.L_pos))
    return kernels.nystrom_rows(
        pts, factory.knots.centers, factory.knots.range_r, factory.eig.col_mean_row, factory.proj
    )


def moran_coefficient(values, C0):
    """Moran coefficient of ``values`` under the zero-diagonal weights ``C0``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    C0 = np.asarray(C0, dtype=np.float64)
    n = v.size
    if n < 2 or C0.shape != (n, n):
        raise InvalidInputError(f"need n >= 2 values and an (n, n) matrix; got {n} and {C0.shape}")
    total = C0.sum()
    if total == 0:
        raise DegenerateWeightsError("1'C0 1 is zero; the Moran coefficient is undefined")
    z = v - v.mean()
    den = z @ z
    if den <= n * (np.finfo(float).eps * np.abs(v).max()) ** 2:
        raise DegenerateInputError("values are constant; the Moran coefficient is undefined")
    return float(n / total * (z @ C0 @ z) / den)


def expected_mc(lambdas, alpha, mc_scale=1.0):
    """Expected Moran coefficient of a process whose spectrum is ``lambdas**alpha``.

    ``mc_scale`` is ``N / 1'C0 1``. Evaluated in log space so extreme
    ``alpha`` saturates cleanly at ``mc_scale * max(lambdas)`` or
    ``mc_scale * min(lambdas)``.
    """
    lam = np.asarray(lambdas, dtype=np.float64).ravel()
    if lam.size == 0:
        raise InvalidInputError("expected_mc needs at least one eigenvalue")
    if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
        raise InvalidInputError("eigenvalues must be finite and positive")
    log_lam = np.log(lam)
    num = logsumexp((2 * alpha + 1) * log_lam)
    den = logsumexp(2 * alpha * log_lam)
    return float(mc_scale * np.exp(num - den))


def mc_scale(points, r, n_total=None):
    """``N / 1'C0 1`` for the site set, estimated from ``points`` if it is a sample.

    With ``n_total`` larger than the number of points, the mean off-diagonal
    kernel value of the sample stands in for the full-sample mean.
    """
    pts = as_coords(points, "points")
    n = pts.shape[0]
    if n < 2:
        raise InvalidInputError("mc_scale needs at least two points")
    s = kernels.kernel_offdiag_sum(pts, r)
    if s <= 0:
        raise DegenerateWeightsError("1'C0 1 is zero")
    N = n if n_total is None else int(n_total)
    mean_offdiag = s / (n * (n - 1))
    return float(1.0 / ((N - 1) * mean_offdiag))
