"""Self-describing model file: everything prediction needs, no training data.

The file is a ``.npz`` archive. A JSON ``meta`` entry carries the format
tag, version, model spec, term layout, scalar estimates and group labels;
the arrays (knots, eigenpairs, coefficients, SE blocks) sit alongside it.
Nothing is pickled.
"""

import json
from pathlib import Path

import numpy as np

from . import reml
from .basis import BasisFactory, KnotEigen, KnotSet
from .errors import ModelFormatError
from .terms import GroupIndex, TermSpec

MODEL_FORMAT = "mamm-model"
MODEL_VERSION = 1


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def _meta(model):
    fit = model.fit
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "spec": model.spec.to_dict(),
        "terms": [{"kind": t.kind, "name": t.name, "covariate": t.covariate, "labels": t.labels,
                   "width": t.width} for t in fit.terms],
        "range_r": model.factory.knots.range_r,
        "range_source": model.factory.knots.range_source,
        "N": model.factory.N,
        "scaling_mode": model.factory.scaling_mode,
        "sigma2_hat": fit.sigma2_hat,
        "loglik_r": fit.loglik_r,
        "n_sweeps": fit.n_sweeps,
        "converged": fit.converged,
        "N_fit": fit.N,
        "K": fit.K,
        "dropped": fit.dropped,
        "se_fixed": [blk["fixed"] for blk in fit.se_blocks],
        "mc_scale": model.mc_scale,
        "groups": {g: [_plain(v) for v in gi.labels] for g, gi in model.group_indexes.items()},
        "info": json.loads(json.dumps(model.info, default=_plain)),
    }


def save_model(model, path):
    """Write ``model`` to ``path`` (``.npz`` appended by numpy if missing)."""
    fit, fac = model.fit, model.factory
    arrays = {
        "knots": fac.knots.centers,
        "E_L": fac.eig.E_L,
        "Lambda_L": fac.eig.Lambda_L,
        "col_mean_row": fac.eig.col_mean_row,
        "lambda_hat": fac.lambda_hat,
        "b_hat": fit.b_hat,
        "b_cov": fit.b_cov,
        "tau": fit.ratio.tau,
        "alpha": fit.ratio.alpha,
        "trace": np.asarray(fit.trace, dtype=np.float64),
    }
    for p, blk in enumerate(fit.se_blocks):
        arrays[f"u_{p}"] = fit.u_hat[p]
        arrays[f"se_index_{p}"] = blk["index"]
        arrays[f"se_{p}"] = blk["diag"] if "diag" in blk else blk["cov"]
    np.savez(path, meta=np.array(json.dumps(_meta(model))), **arrays)


def load_model(path):
    """Read a model file written by :func:`save_model`."""
    from .pipeline import FittedModel, ModelSpec

    path = Path(path)
    try:
        f = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ModelFormatError(f"{path}: not a readable model file ({exc})") from exc
    with f:
        if "meta" not in f.files:
            raise ModelFormatError(f"{path}: no metadata entry")
        meta = json.loads(str(f["meta"]))
        if meta.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"{path}: format {meta.get('format')!r} is not {MODEL_FORMAT!r}")
        if meta.get("version") != MODEL_VERSION:
            raise ModelFormatError(
                f"{path}: model file version {meta.get('version')} is not supported (expected {MODEL_VERSION})"
            )
        a = {k: f[k].copy() for k in f.files if k != "meta"}

    knots = KnotSet(a["knots"], float(meta["range_r"]), meta["range_source"])
    eig = KnotEigen(a["E_L"], a["Lambda_L"], a["col_mean_row"])
    factory = BasisFactory(knots, eig, int(meta["N"]), a["lambda_hat"], meta["scaling_mode"])
    terms = [TermSpec(**t) for t in meta["terms"]]
    P = len(terms)
    sigma2 = float(meta["sigma2_hat"])
    ratio = reml.VarianceParams(a["tau"], a["alpha"], 1.0)
    theta = reml.VarianceParams(ratio.tau * np.sqrt(sigma2), ratio.alpha, sigma2)
    blocks = []
    for p, t in enumerate(terms):
        blk = {"index": a[f"se_index_{p}"], "fixed": meta["se_fixed"][p]}
        blk["diag" if t.kind == "group" else "cov"] = a[f"se_{p}"]
        blocks.append(blk)
    fit = reml.FitResult(
        b_hat=a["b_hat"], u_hat=[a[f"u_{p}"] for p in range(P)], theta_hat=theta, ratio=ratio,
        sigma2_hat=sigma2, loglik_r=float(meta["loglik_r"]), n_sweeps=int(meta["n_sweeps"]),
        converged=bool(meta["converged"]), se_blocks=blocks, b_cov=a["b_cov"], terms=terms,
        lambda_hat=a["lambda_hat"], N=int(meta["N_fit"]), K=int(meta["K"]),
        trace=a["trace"].tolist(), dropped=list(meta["dropped"]),
    )
    groups = {g: GroupIndex(labels) for g, labels in meta["groups"].items()}
    return FittedModel(ModelSpec(**meta["spec"]), factory, fit, groups, float(meta["mc_scale"]),
                       meta["info"])
