"""Synthetic data and replicated fitting experiments.

Datasets follow an additive design with six SVC covariates (three
large-scale, three small-scale), a moderate-scale residual process and
exchangeable group effects. Each replicate is fitted twice: with the group
term (``mamm``) and without it (``mamm_g``).
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd

from . import basis
from .errors import InvalidInputError, InvalidParameterError, MammError
from .pipeline import FitOptions, ModelSpec, fit_frame

SVC_EXPONENTS_LARGE = 3.0
SVC_EXPONENTS_SMALL = 0.5
RESIDUAL_EXPONENT = 1.0
NOISE_RATIO = 0.3


@dataclass(frozen=True)
class SimConfig:
    N: int = 1000
    s_x: float = 0.5
    tau_g2_ratio: float = 1.0
    tau2: float = 1.0
    n_svc_large: int = 3
    n_svc_small: int = 3
    group_size: int = 20
    seed: int = 0
    L: int = None
    surface_scaling: str = "unit"  # "unit" or "raw"

    @property
    def n_knots(self):
        return self.L if self.L is not None else min(200, self.N // 2)

    @property
    def n_svc(self):
        return self.n_svc_large + self.n_svc_small


@dataclass
class SimDataset:
    coords: np.ndarray
    X: np.ndarray
    y: np.ndarray
    w0: np.ndarray
    W: np.ndarray          # (N, n_svc) true SVC surfaces, mean 1
    g: np.ndarray          # per-row group effect
    group_effects: np.ndarray
    labels: np.ndarray
    sigma: float
    factory: basis.BasisFactory
    config: SimConfig

    def frame(self):
        cols = {"sx": self.coords[:, 0], "sy": self.coords[:, 1]}
        for p in range(self.X.shape[1]):
            cols[f"x{p + 1}"] = self.X[:, p]
        cols["grp"] = self.labels
        cols["y"] = self.y
        return pd.DataFrame(cols)


def _spatial(E, lam, exponent, rng):
    """``E @ gamma`` with ``gamma ~ N(0, diag(lam**exponent))``."""
    return E @ (rng.standard_normal(lam.size) * lam ** (0.5 * exponent))


def generate_covariate(E, lambda_hat, s_x, rng):
    """Covariate mixing white noise with a unit-variance spatial pattern.

    Returns the covariate and its rescaled spatial component.
    """
    if not 0.0 <= s_x < 1.0:
        raise InvalidParameterError(f"s_x must lie in [0, 1), got {s_x}")
    rng = np.random.default_rng(rng)
    eps = rng.standard_normal(E.shape[0])
    raw = _spatial(E, lambda_hat, 1.0, rng)
    spatial = raw / raw.std(ddof=1)
    return (1.0 - s_x) * eps + s_x * spatial, spatial


def _surface(E, lam, exponent, tau2, scaling, rng):
    s = _spatial(E, lam, exponent, rng)
    if scaling == "unit":
        return np.sqrt(tau2) * s / s.std(ddof=1)
    if scaling == "raw":
        return np.sqrt(tau2) * s
    raise InvalidParameterError(f"unknown surface_scaling {scaling!r}")


def assign_groups(N, group_size, rng):
    """Random partition into ``N // group_size`` groups; leftovers join the last."""
    G = N // group_size
    labels = np.empty(N, dtype=np.int64)
    labels[rng.permutation(N)] = np.minimum(np.arange(N) // group_size, G - 1)
    return labels, G


def generate_dataset(config):
    if config.N < 2 * config.group_size:
        raise InvalidParameterError(f"N={config.N} must be at least twice the group size {config.group_size}")
    if not 0.0 <= config.s_x < 1.0:
        raise InvalidParameterError(f"s_x must lie in [0, 1), got {config.s_x}")
    N = config.N
    ss = np.random.SeedSequence(config.seed)
    site_ss, knot_ss, draw_ss = ss.spawn(3)
    coords = np.random.default_rng(site_ss).random((N, 2))
    knots = basis.select_knots(coords, config.n_knots, seed=int(knot_ss.generate_state(1)[0]))
    factory = basis.build_factory(knots, N, max_pairs=None)
    E = factory.block(coords)
    lam = factory.lambda_hat
    rng = np.random.default_rng(draw_ss)

    X = np.empty((N, config.n_svc))
    for p in range(config.n_svc):
        X[:, p], _ = generate_covariate(E, lam, config.s_x, rng)
    W = np.empty((N, config.n_svc))
    for p in range(config.n_svc):
        expo = SVC_EXPONENTS_LARGE if p < config.n_svc_large else SVC_EXPONENTS_SMALL
        W[:, p] = 1.0 + _surface(E, lam, expo, config.tau2, config.surface_scaling, rng)
    w0 = _surface(E, lam, RESIDUAL_EXPONENT, config.tau2, config.surface_scaling, rng)
    labels, G = assign_groups(N, config.group_size, rng)
    tau_g2 = config.tau_g2_ratio * config.tau2
    group_effects = np.sqrt(tau_g2) * rng.standard_normal(G)
    g = group_effects[labels]
    signal = (X * W).sum(axis=1) + g + w0
    sigma = NOISE_RATIO * signal.std(ddof=1)
    y = signal + sigma * rng.standard_normal(N)
    return SimDataset(coords, X, y, w0, W, g, group_effects, labels, float(sigma), factory, config)


def rmse(estimates, truth):
    """Root mean squared error over replicates and rows.

    ``estimates`` is one array per replicate (or a 2-D array with replicates
    in rows); ``truth`` is the common true vector.
    """
    truth = np.asarray(truth, dtype=np.float64).ravel()
    est = np.asarray(estimates, dtype=np.float64)
    if est.ndim == 1:
        est = est[None, :]
    if est.shape[-1] != truth.size:
        raise InvalidInputError(f"estimates have {est.shape[-1]} rows but truth has {truth.size}")
    return float(np.sqrt(np.mean((est - truth[None, :]) ** 2)))


def model_spec(config, with_groups=True):
    covs = [f"x{p + 1}" for p in range(config.n_svc)]
    return ModelSpec(response="y", coords=("sx", "sy"), svc=covs,
                     groups=["grp"] if with_groups else [])


def _true_terms(ds):
    truth = {f"svc_x{p + 1}": ds.W[:, p] for p in range(ds.W.shape[1])}
    truth["w0"] = ds.w0
    truth["group_grp"] = ds.g
    return truth


def fit_replicate(config, options=None):
    """Generate one dataset and fit both models.

    Returns a list of per-model records: squared-error sums per term, fitted
    alphas, convergence flag and wall time.
    """
    options = options or FitOptions(block_rows=config.N)
    ds = generate_dataset(config)
    df = ds.frame()
    truth = _true_terms(ds)
    records = []
    for label, with_groups in (("mamm", True), ("mamm_g", False)):
        spec = model_spec(config, with_groups)
        t0 = time.perf_counter()
        rec = {"model": label, "seed": config.seed}
        try:
            model = fit_frame(df, spec, options, factory=ds.factory)
            eff = model.effects(lambda: iter([df]))
        except MammError as exc:
            rec.update(error=f"{type(exc).__name__}: {exc}", time=time.perf_counter() - t0)
            records.append(rec)
            continue
        rec["time"] = time.perf_counter() - t0
        rec["converged"] = model.fit.converged
        rec["sweeps"] = model.fit.n_sweeps
        for name, true in truth.items():
            est = eff[name].to_numpy() if name in eff else np.zeros_like(true)
            rec[f"mse_{name}"] = float(np.mean((est - true) ** 2))
        for p, t in enumerate(model.fit.terms):
            if t.kind != "group":
                rec[f"alpha_{t.name}"] = float(model.fit.ratio.alpha[p])
            rec[f"tau2_{t.name}"] = float(model.fit.theta_hat.tau[p] ** 2)
        rec["sigma2"] = model.fit.sigma2_hat
        records.append(rec)
    return records


def _cell_configs(grid, base):
    return [replace(base, **cell) for cell in grid]


def replicate_seed(seed, cell, rep):
    return int(np.random.SeedSequence([seed, cell, rep]).generate_state(1)[0])


def _run_one(args):
    cell, rep, cfg, options = args
    out = fit_replicate(cfg, options)
    for r in out:
        r.update(cell=cell, rep=rep)
    return out


def run_experiment(grid, replicates, base=None, seed=0, options=None, workers=1):
    """Fit both models to ``replicates`` datasets per grid cell.

    Parameters
    ----------
    grid : list of dict
        Each dict overrides :class:`SimConfig` fields for one cell.
    replicates : int
    base : SimConfig, optional
    seed : int
        Root seed; replicate seeds derive from ``(seed, cell, rep)``.

    Returns
    -------
    summary : DataFrame
        One row per cell and term: pooled RMSE and median alpha for both
        models. Contains no timing columns so it is byte-reproducible.
    records : DataFrame
        One row per cell, replicate and model, including wall times.
    """
    base = base or SimConfig()
    cells = _cell_configs(grid, base)
    jobs = []
    for c, cfg in enumerate(cells):
        for r in range(replicates):
            cfg_r = replace(cfg, seed=replicate_seed(seed, c, r))
            jobs.append((c, r, cfg_r, options))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    records = pd.DataFrame([r for res in results for r in res])
    summary = summarize(records, cells)
    return summary, records


def term_names(config):
    return [f"svc_x{p + 1}" for p in range(config.n_svc)] + ["w0", "group_grp"]


def summarize(records, cells):
    rows = []
    for c, cfg in enumerate(cells):
        sub = records[records["cell"] == c]
        for name in term_names(cfg):
            row = {"cell": c, "N": cfg.N, "s_x": cfg.s_x, "tau_g2_ratio": cfg.tau_g2_ratio, "term": name}
            for model in ("mamm", "mamm_g"):
                m = sub[sub["model"] == model]
                ok = m[m.get("error", pd.Series(index=m.index, dtype=object)).isna()] if "error" in m else m
                col = f"mse_{name}"
                row[f"rmse_{model}"] = float(np.sqrt(ok[col].mean())) if col in ok and len(ok) else np.nan
                acol = f"alpha_{name}"
                row[f"alpha_median_{model}"] = float(ok[acol].median()) if acol in ok and len(ok) else np.nan
                row[f"n_ok_{model}"] = int(len(ok))
            rows.append(row)
    return pd.DataFrame(rows)


def config_dict(config):
    return asdict(config)
