"""Block-streaming orchestration: scan, accumulate, fit, recover.

A *source* is a zero-argument callable returning a fresh iterator of
``pandas.DataFrame`` blocks, so the data can be traversed several times
without ever being held whole. :func:`frame_source` wraps an in-memory frame
and :func:`csv_source` a delimited text file.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import basis, memtrack, reml
from .accumulate import accumulate_stream, finalize
from .errors import EmptyDataError, InvalidInputError
from .predict import recover_effects, predict_response
from .terms import GROUP, SVC, GroupIndex, TermSpec, build_term_block

INTERCEPT = "(intercept)"


@dataclass
class ModelSpec:
    """Column bindings and term layout.

    Fixed effects are ``[intercept] + svc + fixed``; every SVC covariate is
    also a fixed column so its constant mean lives in ``b``. Random terms are
    ``[residual] + one per SVC covariate + one per group column``.
    """

    response: str
    coords: tuple = ("x", "y")
    svc: list = field(default_factory=list)
    fixed: list = field(default_factory=list)
    groups: list = field(default_factory=list)
    intercept: bool = True
    residual: bool = True

    def __post_init__(self):
        self.coords = tuple(self.coords)
        self.svc, self.fixed, self.groups = list(self.svc), list(self.fixed), list(self.groups)
        if len(self.coords) != 2:
            raise InvalidInputError("coords must name exactly two columns")
        dup = set(self.svc) & set(self.fixed)
        if dup:
            raise InvalidInputError(f"columns listed as both svc and fixed: {sorted(dup)}")
        if not self.fixed_names:
            raise InvalidInputError("the model needs at least one fixed-effect column")

    @property
    def fixed_names(self):
        return ([INTERCEPT] if self.intercept else []) + self.svc + self.fixed

    @property
    def numeric_columns(self):
        cols = [self.response, *self.coords, *self.svc, *self.fixed]
        return list(dict.fromkeys(cols))

    @property
    def columns(self):
        return self.numeric_columns + [g for g in self.groups if g not in self.numeric_columns]

    def terms(self):
        out = [TermSpec.residual()] if self.residual else []
        out += [TermSpec.svc(c) for c in self.svc]
        out += [TermSpec.group(g) for g in self.groups]
        return out

    def covariate_index(self, terms):
        names = self.fixed_names
        return {p: names.index(t.covariate) for p, t in enumerate(terms) if t.kind == SVC}

    def to_dict(self):
        return {"response": self.response, "coords": list(self.coords), "svc": self.svc,
                "fixed": self.fixed, "groups": self.groups, "intercept": self.intercept,
                "residual": self.residual}


@dataclass
class FitOptions:
    n_knots: int = 200
    max_pairs: int = basis.MAX_EIGENPAIRS
    block_rows: int = 10_000
    workers: int = 1
    deterministic: bool = True
    seed: int = 0
    scaling_mode: str = "as_printed"
    reservoir: int = 100_000
    site_limit: int = basis.MST_SITE_LIMIT
    mc_sample: int = 5000
    controls: reml.FitControls = field(default_factory=reml.FitControls)


@dataclass
class FittedModel:
    spec: ModelSpec
    factory: basis.BasisFactory
    fit: reml.FitResult
    group_indexes: dict
    mc_scale: float
    info: dict = field(default_factory=dict)

    def expected_mc(self):
        """Expected Moran coefficient at each spatial term's fitted alpha."""
        return {
            t.name: basis.expected_mc(self.factory.lambda_hat, self.fit.ratio.alpha[p], self.mc_scale)
            for p, t in enumerate(self.fit.terms) if t.kind != GROUP
        }

    def effects(self, source):
        """Per-row fitted values and term effects with SEs over a source."""
        return pd.concat(list(iter_effects(self, source)), ignore_index=True)

    def predict(self, frame):
        return predict_frame(self, frame)


# --------------------------------------------------------------------- sources

def frame_source(df, block_rows=10_000):
    def open_blocks():
        for start in range(0, len(df), block_rows):
            yield df.iloc[start:start + block_rows]
    return open_blocks


def read_header(path, sep=","):
    with open(path, newline="") as fh:
        row = next(csv.reader(fh, delimiter=sep), None)
    if row is None:
        raise EmptyDataError(f"{path}: file is empty")
    return [c.strip() for c in row]


def csv_source(path, block_rows=10_000, sep=","):
    """Blocks of string-valued rows from a delimited file with a header.

    A row whose field count differs from the header raises
    :class:`InvalidInputError` naming its line. Blank lines are skipped.
    Numeric parsing happens in :func:`clean_block`.
    """
    header = read_header(path, sep)

    def open_blocks():
        with open(path, newline="") as fh:
            reader = csv.reader(fh, delimiter=sep)
            next(reader)
            rows, start = [], 0
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise InvalidInputError(
                        f"{path}: malformed row at line {reader.line_num}: "
                        f"expected {len(header)} fields, found {len(row)}"
                    )
                rows.append(row)
                if len(rows) == block_rows:
                    yield pd.DataFrame(rows, columns=header, index=pd.RangeIndex(start, start + len(rows)))
                    start += len(rows)
                    rows = []
            if rows:
                yield pd.DataFrame(rows, columns=header, index=pd.RangeIndex(start, start + len(rows)))
    return open_blocks


def clean_block(spec, df):
    """Drop rows with missing, unparsable or non-finite model values.

    Returns the cleaned block (original index preserved) and the number of
    rows rejected.
    """
    missing = [c for c in spec.columns if c not in df.columns]
    if missing:
        raise InvalidInputError(f"input is missing column(s): {missing}")
    num = df[spec.numeric_columns].apply(pd.to_numeric, errors="coerce")
    ok = np.isfinite(num.to_numpy(dtype=np.float64)).all(axis=1)
    for g in spec.groups:
        lab = df[g]
        ok &= (lab.notna() & (lab.astype(str).str.strip() != "")).to_numpy()
    out = num[ok]
    for g in spec.groups:
        out = out.assign(**{g: df.loc[ok, g].to_numpy()}) if g not in out.columns else out
    return out, int((~ok).sum())


def _design(spec, blk):
    coords = blk[list(spec.coords)].to_numpy(dtype=np.float64)
    cols = [np.ones(len(blk)) if c == INTERCEPT else blk[c].to_numpy(dtype=np.float64)
            for c in spec.fixed_names]
    X = np.column_stack(cols) if cols else np.zeros((len(blk), 0))
    return coords, X


# ---------------------------------------------------------------------- passes

def scan(source, spec, seed=0, reservoir=100_000):
    """Pass 1: row count, group labels and a uniform reservoir of sites."""
    rng = np.random.default_rng([seed, 0x5EED])
    n = rejected = 0
    labels = {g: set() for g in spec.groups}
    keep_keys = np.empty(0)
    keep_xy = np.empty((0, 2))
    for raw in source():
        blk, bad = clean_block(spec, raw)
        rejected += bad
        n += len(blk)
        for g in spec.groups:
            labels[g].update(pd.unique(blk[g]))
        xy = blk[list(spec.coords)].to_numpy(dtype=np.float64)
        # one key per raw row keeps the sample independent of the block partition
        keys = rng.random(len(raw))[raw.index.isin(blk.index)]
        keep_keys = np.concatenate([keep_keys, keys])
        keep_xy = np.vstack([keep_xy, xy])
        if keep_keys.size > 2 * reservoir:
            top = np.argsort(keep_keys, kind="stable")[:reservoir]
            top.sort()
            keep_keys, keep_xy = keep_keys[top], keep_xy[top]
    if n == 0:
        raise EmptyDataError("no usable rows in the input")
    if keep_keys.size > reservoir:
        top = np.sort(np.argsort(keep_keys, kind="stable")[:reservoir])
        keep_xy = keep_xy[top]
    group_indexes = {
        g: GroupIndex(sorted(v, key=lambda x: (type(x).__name__, x))) for g, v in labels.items()
    }
    return {"N": n, "rejected": rejected, "sample": keep_xy, "group_indexes": group_indexes}


def make_factory(sample, N, options):
    knots = basis.select_knots(sample, min(options.n_knots, sample.shape[0]), seed=options.seed,
                               site_limit=options.site_limit, n_total=N)
    return basis.build_factory(knots, N, options.scaling_mode, options.max_pairs)


def _bound_terms(spec, factory, group_indexes):
    out = []
    for t in spec.terms():
        w = group_indexes[t.labels].G if t.kind == GROUP else factory.L_pos
        out.append(t.with_width(w))
    return out


def block_builder(spec, terms, factory, group_indexes):
    """``build(raw_block) -> (X, y, A_blocks)`` for :func:`accumulate_stream`."""
    spatial = any(t.kind != GROUP for t in terms)

    def build(raw):
        blk, _ = clean_block(spec, raw)
        coords, X = _design(spec, blk)
        y = blk[spec.response].to_numpy(dtype=np.float64)
        E = memtrack.tracker.register(basis.nystrom_block(factory, coords)) if spatial else None
        A = []
        for t in terms:
            if t.kind == GROUP:
                A.append(build_term_block(t, labels_block=blk[t.labels].to_numpy(),
                                          group_index=group_indexes[t.labels]))
            elif t.kind == SVC:
                A.append(build_term_block(t, covariate_block=blk[t.covariate].to_numpy(), ebasis=E))
            else:
                A.append(build_term_block(t, ebasis=E))
        return X, y, A
    return build


def fit_source(source, spec, options=None, factory=None, scan_result=None):
    """Fit the model by streaming ``source`` (pass 1, pass 2, then REML).

    A prebuilt ``factory`` skips knot selection.
    """
    options = options or FitOptions()
    timings = {}
    t0 = time.perf_counter()
    sc = scan_result or scan(source, spec, options.seed, options.reservoir)
    N = sc["N"]
    timings["scan"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if factory is None:
        factory = make_factory(sc["sample"], N, options)
    sub = sc["sample"][: options.mc_sample]
    mcs = basis.mc_scale(sub, factory.knots.range_r, n_total=N if sub.shape[0] < N else None)
    timings["basis"] = time.perf_counter() - t0

    terms = _bound_terms(spec, factory, sc["group_indexes"])
    t0 = time.perf_counter()
    with memtrack.tracking() as trk:
        store = accumulate_stream(source(), len(spec.fixed_names), [t.width for t in terms],
                                  block_builder(spec, terms, factory, sc["group_indexes"]),
                                  workers=options.workers, deterministic=options.deterministic)
        mem = trk.snapshot()
    store = finalize(store, N)
    timings["accumulate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    res = reml.fit(store, terms, factory.lambda_hat, controls=options.controls,
                   covariate_index=spec.covariate_index(terms))
    timings["fit"] = time.perf_counter() - t0

    info = {
        "N": N, "rejected": sc["rejected"], "K": store.K, "widths": list(store.widths),
        "range_r": factory.knots.range_r, "range_source": factory.knots.range_source,
        "n_knots": factory.knots.L, "L_pos": factory.L_pos, "timings": timings, "memory": mem,
        "block_rows": options.block_rows, "workers": options.workers,
    }
    model = FittedModel(spec, factory, res, sc["group_indexes"], mcs, info)
    model.store = store
    return model


def fit_frame(df, spec, options=None, factory=None):
    options = options or FitOptions()
    return fit_source(frame_source(df, options.block_rows), spec, options, factory)


def _block_effects(model, blk):
    spec, fit = model.spec, model.fit
    coords, X = _design(spec, blk)
    E = None
    if any(t.kind != GROUP for t in fit.terms):
        E = memtrack.tracker.register(basis.nystrom_block(model.factory, coords))
    fitted = X @ fit.b_hat
    cols = {}
    for p, t in enumerate(fit.terms):
        if t.kind == GROUP:
            s = recover_effects(fit, p, labels_block=blk[t.labels].to_numpy(),
                                group_index=model.group_indexes[t.labels])
        elif t.kind == SVC:
            s = recover_effects(fit, p, covariate_block=blk[t.covariate].to_numpy(), ebasis=E)
        else:
            s = recover_effects(fit, p, ebasis=E)
        fitted = fitted + s.contribution
        cols[t.name] = s.value
        cols[f"{t.name}_se"] = s.se
    out = pd.DataFrame({"row": blk.index.to_numpy(), "fitted": fitted, **cols})
    return out


def iter_effects(model, source):
    """Pass 3: recover per-row effects block by block."""
    for raw in source():
        blk, _ = clean_block(model.spec, raw)
        yield _block_effects(model, blk)


def predict_frame(model, frame):
    """Predictions and effect decomposition for a frame of new sites."""
    spec, fit = model.spec, model.fit
    need = [*spec.coords, *spec.svc, *spec.fixed]
    missing = [c for c in need if c not in frame.columns]
    if missing:
        raise InvalidInputError(f"prediction input is missing column(s): {missing}")
    if len(frame) == 0:
        cols = ["row", "yhat"] + [c for t in fit.terms for c in (t.name, f"{t.name}_se")]
        return pd.DataFrame({c: np.empty(0) for c in cols})
    num = frame[need].apply(pd.to_numeric, errors="coerce")
    coords = num[list(spec.coords)].to_numpy(dtype=np.float64)
    X = np.column_stack([np.ones(len(frame)) if c == INTERCEPT else num[c].to_numpy(dtype=np.float64)
                         for c in spec.fixed_names])
    covs = {c: num[c].to_numpy(dtype=np.float64) for c in spec.svc}
    labels = {g: frame[g].to_numpy() for g in spec.groups if g in frame.columns}
    yhat, surfaces = predict_response(fit, model.factory, X, coords, covs, labels, model.group_indexes)
    out = {"row": frame.index.to_numpy(), "yhat": yhat}
    for s in surfaces:
        out[s.term] = s.value
        out[f"{s.term}_se"] = s.se
        if s.unseen is not None:
            out[f"{s.term}_unseen"] = s.unseen
    return pd.DataFrame(out)
