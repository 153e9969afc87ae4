"""Additive term declarations and their per-block basis matrices."""

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .basis import nystrom_block
from .errors import InvalidInputError, ParameterOutOfRangeError, UnknownGroupError
from .memtrack import tracker

RESIDUAL = "residual"
SVC = "svc"
GROUP = "group"
KINDS = (RESIDUAL, SVC, GROUP)


@dataclass(frozen=True)
class TermSpec:
    """One random-effect term.

    ``covariate`` names the data column that scales an SVC basis (it must
    also be a fixed-effect column); ``labels`` names the label column of a
    group term. ``width`` is filled in once the basis is known.
    """

    kind: str
    name: str
    covariate: str = None
    labels: str = None
    width: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown term kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == SVC and not self.covariate:
            raise InvalidInputError(f"SVC term {self.name!r} needs a covariate column")
        if self.kind == GROUP and not self.labels:
            raise InvalidInputError(f"group term {self.name!r} needs a label column")

    @property
    def spatial(self):
        return self.kind != GROUP

    @classmethod
    def residual(cls, name="w0"):
        return cls(RESIDUAL, name)

    @classmethod
    def svc(cls, covariate, name=None):
        return cls(SVC, name or f"svc_{covariate}", covariate=covariate)

    @classmethod
    def group(cls, labels, name=None):
        return cls(GROUP, name or f"group_{labels}", labels=labels)

    def with_width(self, width):
        if width < 1:
            raise InvalidInputError(f"term {self.name!r} has empty basis")
        return replace(self, width=int(width))


@dataclass
class GroupIndex:
    """Ordered distinct labels of one group column."""

    labels: list = field(default_factory=list)

    def __post_init__(self):
        self._index = pd.Index(self.labels)
        if not self._index.is_unique:
            raise InvalidInputError("group labels must be unique")

    @property
    def G(self):
        return len(self.labels)

    @classmethod
    def from_blocks(cls, blocks):
        seen = set()
        for b in blocks:
            seen.update(pd.unique(np.asarray(b, dtype=object).ravel()))
        return cls(sorted(seen, key=lambda v: (type(v).__name__, v)))

    def codes(self, labels_block, allow_unknown=False):
        """Integer code per row; ``-1`` for unseen labels when allowed."""
        codes = self._index.get_indexer(np.asarray(labels_block, dtype=object).ravel())
        if not allow_unknown and (codes < 0).any():
            bad = np.asarray(labels_block, dtype=object).ravel()[np.argmax(codes < 0)]
            raise UnknownGroupError(bad)
        return codes


def v_matrix(term, tau, alpha, sigma2, lambda_hat=None):
    """Diagonal of V(theta) for ``term``.

    Spatial terms scale the eigenvalue powers ``lambda_hat**alpha`` by
    ``tau / sigma``; group terms are ``tau / sigma`` times the identity.
    Returned as a 1-D array holding the diagonal.
    """
    scale = tau / np.sqrt(sigma2)
    if term.kind == GROUP:
        width = term.width
        v = np.full(width, scale)
    else:
        with np.errstate(over="ignore", invalid="ignore"):
            v = scale * np.power(np.asarray(lambda_hat, dtype=np.float64), alpha)
    if not np.all(np.isfinite(v)):
        raise ParameterOutOfRangeError(
            f"V for term {term.name!r} is not finite at tau={tau!r}, alpha={alpha!r}"
        )
    return v


def build_term_block(term, factory=None, coords_block=None, covariate_block=None,
                     labels_block=None, group_index=None, ebasis=None):
    """Basis matrix A_p for one block of rows.

    ``ebasis`` may carry a precomputed Nystrom block for these coordinates so
    several spatial terms share one kernel evaluation.
    """
    if term.kind == GROUP:
        codes = group_index.codes(labels_block)
        out = np.zeros((codes.size, group_index.G))
        out[np.arange(codes.size), codes] = 1.0
        return tracker.register(out)
    if ebasis is None:
        E = tracker.register(nystrom_block(factory, coords_block))
    else:
        E = ebasis  # registered by whoever built it
    if term.kind == RESIDUAL:
        return E
    x = np.asarray(covariate_block, dtype=np.float64).ravel()
    if x.size != E.shape[0]:
        raise InvalidInputError(
            f"covariate block has {x.size} rows but the coordinate block has {E.shape[0]}"
        )
    return tracker.register(x[:, None] * E)
