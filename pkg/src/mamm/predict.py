"""Effect recovery at training sites and prediction at new sites."""

from dataclasses import dataclass

import numpy as np

from .basis import nystrom_block
from .errors import InvalidInputError
from .terms import GROUP, SVC


@dataclass
class EffectSurface:
    """Per-row estimate of one term.

    ``value`` is the quantity one maps: the coefficient surface
    ``b_k + w_p(s)`` for an SVC term, the process ``w(s)`` for the residual
    term, the group effect for a group term. ``contribution`` is what the
    term adds to the fitted response (``A_p V u_p``). ``unseen`` flags rows
    whose group label was not in the training data.
    """

    term: str
    value: np.ndarray
    se: np.ndarray
    contribution: np.ndarray
    unseen: np.ndarray = None


def nystrom_extend(factory, new_coords):
    """Approximate eigenvector rows at new sites (same formula as training rows)."""
    return nystrom_block(factory, new_coords)


def _rowwise_quad(Z, cov):
    q = np.einsum("ij,ij->i", Z @ cov, Z)
    return np.sqrt(np.maximum(q, 0.0))


def recover_effects(fit, term, factory=None, coords_block=None, covariate_block=None,
                    labels_block=None, group_index=None, ebasis=None, allow_unknown=False):
    """Effect estimate and standard error of one term for a block of rows."""
    p = fit.term_index(term)
    t = fit.terms[p]
    v = fit.v(p)
    vu = v * fit.u_hat[p]
    blk = fit.se_blocks[p]
    if t.kind == GROUP:
        codes = group_index.codes(labels_block, allow_unknown=allow_unknown)
        unseen = codes < 0
        safe = np.where(unseen, 0, codes)
        eff = np.where(unseen, 0.0, vu[safe])
        prior_sd = float(np.sqrt(fit.sigma2_hat) * fit.ratio.tau[p])
        se = np.where(unseen, prior_sd, np.abs(v[safe]) * np.sqrt(np.maximum(blk["diag"][safe], 0.0)))
        return EffectSurface(t.name, eff, se, eff.copy(), unseen)

    E = nystrom_block(factory, coords_block) if ebasis is None else ebasis
    w = E @ vu
    EV = E * v[None, :]
    if t.kind == SVC:
        if covariate_block is None:
            raise InvalidInputError(f"term {t.name!r} needs covariate {t.covariate!r}")
        x = np.asarray(covariate_block, dtype=np.float64).ravel()
        k = blk["fixed"]
        b_k = fit.b_hat[k] if k is not None else 0.0
        Z = np.column_stack([np.ones(E.shape[0]), EV]) if k is not None else EV
        return EffectSurface(t.name, b_k + w, _rowwise_quad(Z, blk["cov"]), x * w)
    return EffectSurface(t.name, w, _rowwise_quad(EV, blk["cov"]), w.copy())


def predict_response(fit, factory, X_new, coords, covariates=None, labels=None, group_indexes=None):
    """Predicted mean response and its per-term decomposition.

    ``X_new`` holds the fixed-effect columns in training order. ``covariates``
    maps each SVC covariate name to its values; ``labels`` maps group label
    columns to their values (missing columns or unseen labels contribute 0).

    Returns ``(yhat, surfaces)`` with one :class:`EffectSurface` per term.
    """
    X_new = np.asarray(X_new, dtype=np.float64)
    n = X_new.shape[0]
    if X_new.ndim != 2 or X_new.shape[1] != fit.K:
        raise InvalidInputError(f"X_new must have {fit.K} columns, got shape {X_new.shape}")
    covariates = covariates or {}
    labels = labels or {}
    group_indexes = group_indexes or {}
    yhat = X_new @ fit.b_hat
    surfaces = []
    E = nystrom_block(factory, coords) if any(t.kind != GROUP for t in fit.terms) else None
    for p, t in enumerate(fit.terms):
        if t.kind == GROUP:
            lab = labels.get(t.labels)
            if lab is None:
                lab = np.full(n, None, dtype=object)
            s = recover_effects(fit, p, labels_block=lab, group_index=group_indexes[t.labels],
                                allow_unknown=True)
        elif t.kind == SVC:
            if t.covariate not in covariates:
                raise InvalidInputError(f"missing covariate column {t.covariate!r} for term {t.name!r}")
            s = recover_effects(fit, p, covariate_block=covariates[t.covariate], ebasis=E)
        else:
            s = recover_effects(fit, p, ebasis=E)
        yhat = yhat + s.contribution
        surfaces.append(s)
    return yhat, surfaces
