"""Restricted likelihood on the compressed store, and its maximization.

Nothing here touches an N-row matrix: the likelihood is built entirely from
an :class:`~mamm.accumulate.InnerProductStore`.

Two evaluation paths exist. :func:`restricted_loglik` assembles the full
system and factorizes it; it is the reference. :class:`TermProfile` fixes
every term except one, factorizes the complement once, and then evaluates
the likelihood for that term's parameters through an ``L_p x L_p`` Schur
complement. :func:`optimize_term` and :func:`fit` use the profile path.

Variance parameters are handled relative to the residual variance: ``tau``
stored in the working :class:`VarianceParams` (with ``sigma2 = 1``) is the
ratio ``tau_p / sigma``, since that ratio is all the likelihood sees once
``sigma2`` is profiled out.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize
from scipy.linalg.lapack import dpotrf as _potrf, dtrtrs as _trtrs

from .errors import (
    DegenerateLikelihoodError,
    InvalidInputError,
    NumericalInconsistencyError,
    OptimizationFailureError,
    ParameterOutOfRangeError,
    SingularSystemError,
)
from .terms import GROUP, SVC, v_matrix

LOG_TAU2_BOX = (-20.0, 20.0)
ALPHA_BOX = (-10.0, 10.0)
_JITTERS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass
class VarianceParams:
    tau: np.ndarray
    alpha: np.ndarray
    sigma2: float = 1.0

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=np.float64).copy()
        self.alpha = np.asarray(self.alpha, dtype=np.float64).copy()
        if self.tau.shape != self.alpha.shape:
            raise InvalidInputError("tau and alpha must have one entry per term")
        if np.any(self.tau < 0) or not np.all(np.isfinite(self.tau)):
            raise InvalidInputError("tau must be finite and nonnegative")
        if not np.all(np.isfinite(self.alpha)):
            raise InvalidInputError("alpha must be finite")
        if not self.sigma2 > 0:
            raise InvalidInputError("sigma2 must be positive")

    @property
    def P(self):
        return self.tau.shape[0]

    def copy(self):
        return VarianceParams(self.tau, self.alpha, self.sigma2)

    def with_term(self, p, tau, alpha):
        out = self.copy()
        out.tau[p] = tau
        out.alpha[p] = alpha
        return out


@dataclass
class AssembledSystem:
    R: np.ndarray
    rhs: np.ndarray
    params: VarianceParams
    offsets: tuple

    @property
    def K(self):
        return self.offsets[0]

    def split(self, x):
        """Split a stacked coefficient vector into ``b`` and per-term ``u``."""
        o = self.offsets
        return x[:o[0]], [x[o[p]:o[p + 1]] for p in range(len(o) - 1)]


@dataclass
class FitResult:
    b_hat: np.ndarray
    u_hat: list
    theta_hat: VarianceParams
    ratio: VarianceParams
    sigma2_hat: float
    loglik_r: float
    n_sweeps: int
    converged: bool
    se_blocks: list
    b_cov: np.ndarray
    terms: list
    lambda_hat: np.ndarray
    N: int
    K: int
    trace: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    def v(self, p):
        """Diagonal of V(theta_hat_p)."""
        return v_matrix(self.terms[p], self.ratio.tau[p], self.ratio.alpha[p], 1.0, self.lambda_hat)

    def term_index(self, name_or_index):
        if isinstance(name_or_index, (int, np.integer)):
            if 0 <= name_or_index < len(self.terms):
                return int(name_or_index)
            from .errors import UnknownTermError
            raise UnknownTermError(f"term index {name_or_index} is outside 0..{len(self.terms) - 1}")
        for p, t in enumerate(self.terms):
            if t.name == name_or_index:
                return p
        from .errors import UnknownTermError
        raise UnknownTermError(f"no term named {name_or_index!r} in this fit")


class AscentMonitor:
    """Records the likelihood before and after every :func:`optimize_term` call."""

    def __init__(self):
        self.calls = 0
        self.worst_decrease = 0.0

    def record(self, before, after):
        self.calls += 1
        self.worst_decrease = max(self.worst_decrease, before - after)


ascent_monitor = AscentMonitor()


def _v_all(terms, lambda_hat, params):
    return [
        v_matrix(t, params.tau[p], params.alpha[p], params.sigma2, None if t.kind == GROUP else lambda_hat)
        for p, t in enumerate(terms)
    ]


def _offsets(store):
    return tuple(np.cumsum([store.K, *store.widths]).tolist())


def _assemble(store, vs, order=None):
    """Dense ``R`` and right-hand side with term blocks laid out in ``order``.

    The fixed-effect block always comes first. Returns the offsets of the
    blocks in layout order.
    """
    order = list(range(len(vs))) if order is None else list(order)
    K = store.K
    o = tuple(np.cumsum([K, *(vs[p].size for p in order)]).tolist())
    n = o[-1]
    R = np.empty((n, n))
    rhs = np.empty(n)
    R[:K, :K] = store.M_00
    rhs[:K] = store.m_0
    for i, p in enumerate(order):
        v = vs[p]
        sp = slice(o[i], o[i + 1])
        blk = store.M_0p[p] * v[None, :]
        R[:K, sp] = blk
        R[sp, :K] = blk.T
        rhs[sp] = v * store.m_p[p]
        for j in range(i, len(order)):
            q = order[j]
            sq = slice(o[j], o[j + 1])
            blk = v[:, None] * store.pair(p, q) * vs[q][None, :]
            R[sp, sq] = blk
            if j != i:
                R[sq, sp] = blk.T
        R[sp, sp] += np.eye(v.size)
    return R, rhs, o


def assemble_R(store, terms, lambda_hat, params):
    """Compressed mixed-model system ``R(theta)`` and its right-hand side."""
    if len(terms) != store.P or params.P != store.P:
        raise InvalidInputError(f"store has {store.P} terms; got {len(terms)} specs and {params.P} params")
    vs = _v_all(terms, lambda_hat, params)
    R, rhs, o = _assemble(store, vs)
    return AssembledSystem(R, rhs, params, o)


def cholesky(R, what="R(theta)"):
    """Lower Cholesky factor, escalating a diagonal jitter on failure."""
    try:
        Lc = linalg.cholesky(R, lower=True, check_finite=False)
        if np.all(np.isfinite(np.diagonal(Lc))):
            return Lc
    except linalg.LinAlgError:
        pass
    if not np.all(np.isfinite(R)):
        raise SingularSystemError(f"{what} has non-finite entries")
    scale = max(np.trace(R) / R.shape[0], np.finfo(float).tiny)
    for j in _JITTERS:
        try:
            return linalg.cholesky(R + j * scale * np.eye(R.shape[0]), lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(R))
    raise SingularSystemError(f"{what} is not positive definite (condition estimate {cond:.3g})", cond)


def _logdet(Lc):
    return 2.0 * float(np.log(np.diag(Lc)).sum())


def solve_coefficients(system, factor=None):
    """Solve ``R x = rhs``; returns ``(b_hat, [u_hat_1, ...])``."""
    Lc = cholesky(system.R) if factor is None else factor
    x = linalg.cho_solve((Lc, True), system.rhs, check_finite=False)
    return system.split(x)


def compute_d(store, system, b_hat, u_hat):
    """Residual-plus-penalty quadratic form from inner products only."""
    beta = np.concatenate([b_hat, *u_hat])
    K = store.K
    P0beta = system.R @ beta
    P0beta[K:] -= beta[K:]
    penalty = float(beta[K:] @ beta[K:])
    d = store.m_yy - 2.0 * float(beta @ system.rhs) + float(beta @ P0beta) + penalty
    if d < 0:
        if d < -1e-8 * max(store.m_yy, np.finfo(float).tiny):
            raise NumericalInconsistencyError(f"d(theta) = {d:.6g} is negative beyond rounding")
        d = 0.0
    return d


def _loglik_from(logdet, d, N, K):
    if not d > 0:
        raise DegenerateLikelihoodError("d(theta) is zero: the model fits the data exactly")
    nk = N - K
    return -0.5 * logdet - 0.5 * nk * (1.0 + math.log(2.0 * math.pi * d / nk))


def restricted_loglik(store, terms, lambda_hat, params):
    """Restricted log-likelihood by full assembly and factorization."""
    N, K = store.N_seen, store.K
    if N <= K:
        raise InvalidInputError(f"need N > K, got N={N}, K={K}")
    system = assemble_R(store, terms, lambda_hat, params)
    Lc = cholesky(system.R)
    b, u = solve_coefficients(system, Lc)
    d = compute_d(store, system, b, u)
    return _loglik_from(_logdet(Lc), d, N, K)


class TermProfile:
    """Restricted log-likelihood as a function of one term's parameters.

    With every other term fixed, R splits into a fixed complement ``A`` and
    the term block; ``ln|R| = ln|A| + ln|I + V Q V|`` and ``d`` follows from
    the same Schur complement ``Q``. Building the profile costs one
    factorization of ``A``; each evaluation afterwards is ``O(L_p^3)``.
    """

    def __init__(self, store, terms, lambda_hat, params, p):
        self.store, self.term, self.p = store, terms[p], p
        self.lam = None if self.term.kind == GROUP else lambda_hat
        self.sigma2 = params.sigma2
        self.N, self.K = store.N_seen, store.K
        vs = _v_all(terms, lambda_hat, params)
        vs[p] = np.ones(store.widths[p])
        # with term p laid out last, the leading block of the factor is the
        # factor of the complement and the trailing rows hold its solve with B
        order = [q for q in range(store.P) if q != p] + [p]
        R, rhs, o = _assemble(store, vs, order)
        m = o[-2]
        Lc = cholesky(R, "R(theta) with the profiled term at unit scale")
        La = Lc[:m, :m]
        W = Lc[m:, :m].T
        w = linalg.solve_triangular(La, rhs[:m], lower=True, check_finite=False)
        Q = store.pair(p, p) - W.T @ W
        self.Q = 0.5 * (Q + Q.T)
        self.q = store.m_p[p] - W.T @ w
        self.c0 = store.m_yy - float(w @ w)
        self.logdet_rest = _logdet(La)

    def loglik(self, tau, alpha=0.0):
        v = v_matrix(self.term, tau, alpha, self.sigma2, self.lam)
        S = self.Q * np.multiply.outer(v, v)
        S.flat[:: v.size + 1] += 1.0
        Ls, info = _potrf(S, lower=1, clean=0, overwrite_a=0)
        if info != 0:
            Ls = cholesky(S, "I + V Q V")
        t, _ = _trtrs(Ls, v * self.q, lower=1)
        d = self.c0 - float(t @ t)
        if d < 0:
            if d < -1e-8 * max(self.store.m_yy, np.finfo(float).tiny):
                raise NumericalInconsistencyError(f"d(theta) = {d:.6g} is negative beyond rounding")
            d = 0.0
        return _loglik_from(self.logdet_rest + _logdet(Ls), d, self.N, self.K)


def _to_coords(term, tau, alpha):
    lt = 2.0 * math.log(tau) if tau > 0 else LOG_TAU2_BOX[0]
    lt = min(max(lt, LOG_TAU2_BOX[0]), LOG_TAU2_BOX[1])
    if term.kind == GROUP:
        return np.array([lt])
    return np.array([lt, min(max(alpha, ALPHA_BOX[0]), ALPHA_BOX[1])])


def _from_coords(term, x):
    tau = math.exp(0.5 * x[0])
    alpha = 0.0 if term.kind == GROUP else float(x[1])
    return tau, alpha


def _simplex(x0):
    box = [LOG_TAU2_BOX, ALPHA_BOX][: x0.size]
    steps = [2.0, 0.5][: x0.size]
    pts = [x0]
    for i, (step, (lo, hi)) in enumerate(zip(steps, box)):
        x = x0.copy()
        x[i] = x0[i] + step if x0[i] + step <= hi else x0[i] - step
        x[i] = min(max(x[i], lo), hi)
        pts.append(x)
    return np.array(pts)


def optimize_term(store, terms, lambda_hat, params, p, starts=(), tol=1e-6, xatol=1e-4,
                  maxfev=2000, profile=None):
    """Maximize the restricted likelihood over term ``p``'s parameters.

    Nelder-Mead in ``(log tau^2, alpha)`` (``log tau^2`` alone for group
    terms) inside the box, started from the current value and each point in
    ``starts``. The current value is kept unless a start finds something
    strictly better, so the likelihood never decreases.

    Returns
    -------
    params : VarianceParams
        Copy of ``params`` with term ``p`` updated.
    loglik : float
        Restricted log-likelihood at the returned parameters.
    info : dict
        ``before``, ``nfev`` and the per-start results.
    """
    term = terms[p]
    prof = profile or TermProfile(store, terms, lambda_hat, params, p)
    probes = []

    def neg(x):
        tau, alpha = _from_coords(term, x)
        try:
            val = prof.loglik(tau, alpha)
        except (ParameterOutOfRangeError, SingularSystemError, NumericalInconsistencyError,
                DegenerateLikelihoodError):
            val = -np.inf
        probes.append((tuple(x), val))
        return -val if np.isfinite(val) else np.inf

    x_cur = _to_coords(term, params.tau[p], params.alpha[p])
    cur_tau, cur_alpha = params.tau[p], params.alpha[p]
    try:
        before = prof.loglik(cur_tau, cur_alpha)
    except (ParameterOutOfRangeError, SingularSystemError):
        before = -np.inf
    best_x, best_f = None, -before if np.isfinite(before) else np.inf
    bounds = [LOG_TAU2_BOX, ALPHA_BOX][: x_cur.size]
    runs = []
    x0s = [x_cur] + [np.asarray(s, dtype=np.float64)[: x_cur.size] for s in starts]
    for x0 in x0s:
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
        res = optimize.minimize(
            neg, x0, method="Nelder-Mead", bounds=bounds,
            options={"initial_simplex": _simplex(x0), "xatol": xatol, "fatol": tol, "maxfev": maxfev},
        )
        runs.append((res.x.copy(), float(res.fun), int(res.nfev)))
        if res.fun < best_f:
            best_x, best_f = res.x.copy(), float(res.fun)
    if not np.isfinite(best_f):
        raise OptimizationFailureError(
            f"likelihood was not finite at any probe for term {term.name!r}", probes
        )
    if best_x is None:
        new, after = params.copy(), before
    else:
        tau, alpha = _from_coords(term, best_x)
        new, after = params.with_term(p, tau, alpha), -best_f
    ascent_monitor.record(before, after)
    return new, after, {"before": before, "nfev": len(probes), "runs": runs}


@dataclass
class FitControls:
    outer_tol: float = 1e-5
    max_sweeps: int = 20
    tol: float = 1e-6
    xatol: float = 1e-4
    restart_alphas: tuple = (0.0, 1.0)
    restarts: str = "first"  # "first": restart points only on sweep 1; "always": every sweep


def ols(store):
    """OLS coefficients and residual variance from the fixed-effect block."""
    N, K = store.N_seen, store.K
    Lc = cholesky(store.M_00, "X'X")
    b = linalg.cho_solve((Lc, True), store.m_0, check_finite=False)
    rss = max(store.m_yy - float(b @ store.m_0), 0.0)
    return b, rss / (N - K)


def initial_params(terms, s2_ols=None):
    """Default start: each term gets ``sigma2_OLS / (2P)`` of variance, alpha 0."""
    P = len(terms)
    ratio = 1.0 / (2 * P) if P else 1.0
    return VarianceParams(np.full(P, math.sqrt(ratio)), np.zeros(P), 1.0)


def standard_errors(store, terms, lambda_hat, params, sigma2, covariate_index=None, factor=None):
    """Covariance blocks ``sigma2 * R^-1`` needed for effect standard errors.

    For each term the block covers ``(b_k, u_p)`` where ``b_k`` is the fixed
    coefficient of an SVC term's covariate, or ``u_p`` alone otherwise. Group
    terms keep only the diagonal. Also returns the fixed-effect covariance.
    """
    system = assemble_R(store, terms, lambda_hat, params)
    Lc = cholesky(system.R) if factor is None else factor
    Rinv = linalg.cho_solve((Lc, True), np.eye(system.R.shape[0]), check_finite=False)
    Rinv = 0.5 * (Rinv + Rinv.T)
    o = system.offsets
    covariate_index = covariate_index or {}
    blocks = []
    for p, t in enumerate(terms):
        idx = np.arange(o[p], o[p + 1])
        k = covariate_index.get(p) if t.kind == SVC else None
        if k is not None:
            idx = np.r_[k, idx]
        if t.kind == GROUP:
            blocks.append({"index": idx, "diag": sigma2 * np.diag(Rinv)[idx].copy(), "fixed": None})
        else:
            blocks.append({"index": idx, "cov": sigma2 * Rinv[np.ix_(idx, idx)], "fixed": k})
    b_cov = sigma2 * Rinv[: store.K, : store.K]
    return blocks, b_cov


def fit(store, terms, lambda_hat, init=None, controls=None, covariate_index=None):
    """Sequential term-wise REML fit.

    Sweeps :func:`optimize_term` over the terms until a sweep raises the
    likelihood by less than ``controls.outer_tol`` or ``max_sweeps`` is hit,
    then solves for the coefficients, profiles ``sigma2 = d / (N - K)`` and
    computes the standard-error blocks.
    """
    controls = controls or FitControls()
    N, K, P = store.N_seen, store.K, store.P
    if N <= K:
        raise InvalidInputError(f"need N > K, got N={N}, K={K}")
    if len(terms) != P:
        raise InvalidInputError(f"store has {P} terms but {len(terms)} specs were given")
    work = initial_params(terms) if init is None else VarianceParams(
        np.asarray(init.tau) / math.sqrt(init.sigma2), init.alpha, 1.0
    )
    restart_pts = [(math.log(0.5), a) for a in controls.restart_alphas]

    trace = []
    ll = restricted_loglik(store, terms, lambda_hat, work) if P else None
    converged = P == 0
    sweeps = 0
    while P and sweeps < controls.max_sweeps:
        sweeps += 1
        start_ll = ll
        use_restarts = controls.restarts == "always" or sweeps == 1
        for p in range(P):
            work, ll, _ = optimize_term(
                store, terms, lambda_hat, work, p,
                starts=restart_pts if use_restarts else (), tol=controls.tol, xatol=controls.xatol,
            )
            trace.append(ll)
        if ll - start_ll < controls.outer_tol:
            converged = True
            break

    system = assemble_R(store, terms, lambda_hat, work)
    Lc = cholesky(system.R)
    b, u = solve_coefficients(system, Lc)
    d = compute_d(store, system, b, u)
    sigma2 = d / (N - K)
    loglik = _loglik_from(_logdet(Lc), d, N, K)
    blocks, b_cov = standard_errors(store, terms, lambda_hat, work, sigma2, covariate_index, Lc)
    theta = VarianceParams(work.tau * math.sqrt(sigma2), work.alpha, sigma2) if sigma2 > 0 else work.copy()
    dropped = [bool(work.tau[p] ** 2 < 1e-12) for p in range(P)]
    return FitResult(
        b_hat=b, u_hat=u, theta_hat=theta, ratio=work, sigma2_hat=sigma2, loglik_r=loglik,
        n_sweeps=sweeps, converged=converged, se_blocks=blocks, b_cov=b_cov, terms=list(terms),
        lambda_hat=np.asarray(lambda_hat), N=N, K=K, trace=trace, dropped=dropped,
    )
