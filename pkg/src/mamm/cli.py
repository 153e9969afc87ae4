"""Command-line interface: ``mamm fit | predict | simulate | inspect``.

Settings come from an optional YAML file of flat key/value pairs; command
line flags override it. Every resolved setting is echoed into the summary.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import basis, errors, kernels, reml, sim
from .modelfile import load_model, save_model
from .pipeline import FitOptions, ModelSpec, csv_source, fit_source, iter_effects, predict_frame, read_header

log = logging.getLogger("mamm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

FIT_DEFAULTS = {
    "input": None,
    "sep": ",",
    "response": None,
    "coords": ["x", "y"],
    "svc": [],
    "fixed": [],
    "groups": [],
    "intercept": True,
    "residual": True,
    "knots": 200,
    "max_pairs": basis.MAX_EIGENPAIRS,
    "block_rows": 10_000,
    "workers": 1,
    "deterministic": True,
    "seed": 0,
    "scaling_mode": "as_printed",
    "reservoir": 100_000,
    "outer_tol": 1e-5,
    "max_sweeps": 20,
    "tol": 1e-6,
    "xatol": 1e-4,
    "output": "mamm-out",
    "summary_format": "yaml",
}

SIM_DEFAULTS = {
    "replicates": 50,
    "seed": 0,
    "workers": 1,
    "base": {},
    "grid": [{}],
    "output": "mamm-sim",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _exit_code(exc):
    if isinstance(exc, (UsageError, errors.InvalidParameterError)):
        return EXIT_USAGE
    if isinstance(exc, (errors.SingularSystemError, errors.NumericalInconsistencyError,
                        errors.DegenerateLikelihoodError, errors.OptimizationFailureError,
                        errors.EmptyBasisError, errors.ParameterOutOfRangeError)):
        return EXIT_NUMERIC
    if isinstance(exc, (errors.MammError, OSError, UnicodeDecodeError)):
        return EXIT_DATA
    raise exc


# ---------------------------------------------------------------- configuration

def load_config(path, defaults):
    cfg = dict(defaults)
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping of keys to values")
    unknown = sorted(set(data) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    cfg.update(data)
    return cfg


def _override(cfg, args, keys):
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _as_list(v):
    if v is None:
        return []
    return [v] if isinstance(v, str) else list(v)


def validate_fit_config(cfg):
    if not cfg["input"]:
        raise UsageError("no input file given")
    if not cfg["response"]:
        raise UsageError("no response column given")
    for k in ("svc", "fixed", "groups", "coords"):
        cfg[k] = _as_list(cfg[k])
    if len(cfg["coords"]) != 2:
        raise UsageError("coords must name exactly two columns")
    if int(cfg["knots"]) < 2:
        raise UsageError(f"knots must be at least 2, got {cfg['knots']}")
    if int(cfg["block_rows"]) < 1:
        raise UsageError(f"block_rows must be at least 1, got {cfg['block_rows']}")
    if int(cfg["workers"]) < 1:
        raise UsageError(f"workers must be at least 1, got {cfg['workers']}")
    if cfg["scaling_mode"] not in basis.SCALING_MODES:
        raise UsageError(f"scaling_mode must be one of {basis.SCALING_MODES}")
    if cfg["summary_format"] not in ("yaml", "json"):
        raise UsageError("summary_format must be yaml or json")
    return cfg


def fit_options(cfg):
    controls = reml.FitControls(outer_tol=float(cfg["outer_tol"]), max_sweeps=int(cfg["max_sweeps"]),
                                tol=float(cfg["tol"]), xatol=float(cfg["xatol"]))
    return FitOptions(n_knots=int(cfg["knots"]), max_pairs=int(cfg["max_pairs"]),
                      block_rows=int(cfg["block_rows"]), workers=int(cfg["workers"]),
                      deterministic=bool(cfg["deterministic"]), seed=int(cfg["seed"]),
                      scaling_mode=cfg["scaling_mode"], reservoir=int(cfg["reservoir"]),
                      controls=controls)


def model_spec(cfg):
    return ModelSpec(response=cfg["response"], coords=tuple(cfg["coords"]), svc=cfg["svc"],
                     fixed=cfg["fixed"], groups=cfg["groups"], intercept=bool(cfg["intercept"]),
                     residual=bool(cfg["residual"]))


# -------------------------------------------------------------------- commands

def _plain(obj):
    """Recursively convert numpy scalars and arrays for YAML/JSON output."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def summarize_model(model):
    fit = model.fit
    mc = model.expected_mc()
    se_b = np.sqrt(np.maximum(np.diag(fit.b_cov), 0.0))
    terms = []
    for p, t in enumerate(fit.terms):
        row = {"name": t.name, "kind": t.kind, "width": t.width,
               "tau2": float(fit.theta_hat.tau[p] ** 2), "dropped": bool(fit.dropped[p])}
        if t.kind != "group":
            row["alpha"] = float(fit.ratio.alpha[p])
            row["expected_mc"] = float(mc[t.name])
        terms.append(row)
    return {
        "sigma2": float(fit.sigma2_hat),
        "loglik_r": float(fit.loglik_r),
        "sweeps": int(fit.n_sweeps),
        "converged": bool(fit.converged),
        "N": int(fit.N),
        "K": int(fit.K),
        "coefficients": {name: {"estimate": float(b), "se": float(s)}
                         for name, b, s in zip(model.spec.fixed_names, fit.b_hat, se_b)},
        "terms": terms,
        "mc_scale": float(model.mc_scale),
    }


def _write_summary(path, data, fmt):
    data = _plain(data)
    with open(path, "w") as fh:
        if fmt == "json":
            json.dump(data, fh, indent=2, sort_keys=False)
            fh.write("\n")
        else:
            yaml.safe_dump(data, fh, sort_keys=False)


def _write_csv_stream(frames, path):
    n = 0
    with open(path, "w", newline="") as fh:
        first = True
        for df in frames:
            df.to_csv(fh, header=first, index=False, float_format="%.17g")
            first = False
            n += len(df)
    return n, first


def run_fit(cfg):
    """Scan, accumulate, fit, then recover effects; returns the summary dict."""
    cfg = validate_fit_config(dict(cfg))
    path = Path(cfg["input"])
    spec = model_spec(cfg)
    header = read_header(path, cfg["sep"])
    missing = [c for c in spec.columns if c not in header]
    if missing:
        raise errors.InvalidInputError(f"{path}: column(s) not in header: {missing}")
    options = fit_options(cfg)
    source = csv_source(path, options.block_rows, cfg["sep"])
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)

    model = fit_source(source, spec, options)
    t0 = time.perf_counter()
    n_rows, empty = _write_csv_stream(iter_effects(model, source), out / "effects.csv")
    model.info["timings"]["effects"] = time.perf_counter() - t0
    save_model(model, out / "model.npz")

    summary = {"config": cfg, **summarize_model(model)}
    info = model.info
    summary.update({
        "rows_used": info["N"], "rows_rejected": info["rejected"], "range_r": info["range_r"],
        "range_source": info["range_source"], "n_knots": info["n_knots"], "L_pos": info["L_pos"],
        "backend": kernels.BACKEND, "timings": info["timings"], "memory": info["memory"],
    })
    _write_summary(out / f"summary.{cfg['summary_format']}", summary, cfg["summary_format"])
    log.info("fit %d rows (%d rejected); effects written for %d rows", info["N"], info["rejected"], n_rows)
    return summary


def run_predict(model_path, input_path, output_path, sep=",", block_rows=10_000):
    """Stream a new-site table through a saved model; returns rows written."""
    model = load_model(model_path)
    header = read_header(input_path, sep)
    need = [*model.spec.coords, *model.spec.svc, *model.spec.fixed]
    missing = [c for c in need if c not in header]
    if missing:
        raise errors.InvalidInputError(f"{input_path}: column(s) not in header: {missing}")
    source = csv_source(input_path, block_rows, sep)
    frames = (predict_frame(model, blk) for blk in source())
    n, empty = _write_csv_stream(frames, output_path)
    if empty:
        pd.DataFrame(columns=predict_frame(model, pd.DataFrame(columns=header)).columns).to_csv(
            output_path, index=False)
    return n


def run_simulate(cfg):
    """Run a replicated experiment and write summary, seeds and per-fit records."""
    grid = cfg["grid"] or [{}]
    if not isinstance(grid, list) or not all(isinstance(c, dict) for c in grid):
        raise UsageError("grid must be a list of mappings")
    allowed = {f.name for f in fields(sim.SimConfig)} - {"seed"}
    for cell in [cfg["base"], *grid]:
        bad = sorted(set(cell) - allowed)
        if bad:
            raise UsageError(f"unknown simulation field(s): {', '.join(bad)}")
    base = sim.SimConfig(**cfg["base"])
    R = int(cfg["replicates"])
    if R < 1:
        raise UsageError("replicates must be at least 1")
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    summary, records = sim.run_experiment(grid, R, base=base, seed=int(cfg["seed"]),
                                          workers=int(cfg["workers"]))
    elapsed = time.perf_counter() - t0
    summary.to_csv(out / "summary.csv", index=False, float_format="%.17g")
    cells = sim._cell_configs(grid, base)
    root = int(cfg["seed"])
    seeds = pd.DataFrame([
        {"cell": c, "rep": r, "seed": sim.replicate_seed(root, c, r),
         **{k: v for k, v in asdict(cfg_c).items() if k != "seed"}}
        for c, cfg_c in enumerate(cells) for r in range(R)
    ])
    seeds.to_csv(out / "seeds.csv", index=False)
    records.to_csv(out / "records.csv", index=False, float_format="%.17g")
    _write_summary(out / "run.yaml", {"config": cfg, "elapsed_seconds": elapsed}, "yaml")
    return summary


def inspect_model(path):
    model = load_model(path)
    data = summarize_model(model)
    data["spec"] = model.spec.to_dict()
    data["n_knots"] = model.factory.knots.L
    data["L_pos"] = model.factory.L_pos
    data["range_r"] = model.factory.knots.range_r
    data["groups"] = {g: gi.G for g, gi in model.group_indexes.items()}
    return data


# ------------------------------------------------------------------- argparse

def build_parser():
    ap = _Parser(prog="mamm", description="Memory-free additive mixed models with Moran eigenvector bases.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a model to a delimited file")
    f.add_argument("input", nargs="?")
    f.add_argument("-c", "--config")
    f.add_argument("-o", "--output")
    f.add_argument("--sep")
    f.add_argument("--response")
    f.add_argument("--coords", nargs=2, metavar=("X", "Y"))
    f.add_argument("--svc", nargs="*")
    f.add_argument("--fixed", nargs="*")
    f.add_argument("--groups", nargs="*")
    f.add_argument("--no-intercept", dest="intercept", action="store_const", const=False)
    f.add_argument("--no-residual", dest="residual", action="store_const", const=False)
    f.add_argument("--knots", type=int)
    f.add_argument("--max-pairs", dest="max_pairs", type=int)
    f.add_argument("--block-rows", dest="block_rows", type=int)
    f.add_argument("--workers", type=int)
    f.add_argument("--nondeterministic", dest="deterministic", action="store_const", const=False)
    f.add_argument("--seed", type=int)
    f.add_argument("--scaling-mode", dest="scaling_mode", choices=basis.SCALING_MODES)
    f.add_argument("--reservoir", type=int)
    f.add_argument("--outer-tol", dest="outer_tol", type=float)
    f.add_argument("--max-sweeps", dest="max_sweeps", type=int)
    f.add_argument("--tol", type=float)
    f.add_argument("--summary-format", dest="summary_format", choices=("yaml", "json"))

    p = sub.add_parser("predict", help="predict at new sites with a saved model")
    p.add_argument("model")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--sep", default=",")
    p.add_argument("--block-rows", dest="block_rows", type=int, default=10_000)

    s = sub.add_parser("simulate", help="run a replicated simulation experiment")
    s.add_argument("-c", "--config")
    s.add_argument("-o", "--output")
    s.add_argument("--replicates", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)

    i = sub.add_parser("inspect", help="print a model file's parameters")
    i.add_argument("model")
    i.add_argument("--json", action="store_true")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command is None:
        ap.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "fit":
            cfg = load_config(args.config, FIT_DEFAULTS)
            _override(cfg, args, [k for k in FIT_DEFAULTS if k != "input"])
            if args.input:
                cfg["input"] = args.input
            summary = run_fit(cfg)
            print(f"sigma2={summary['sigma2']:.6g} loglik_r={summary['loglik_r']:.6f} "
                  f"sweeps={summary['sweeps']} -> {cfg['output']}")
        elif args.command == "predict":
            if args.block_rows < 1:
                raise UsageError("block-rows must be at least 1")
            n = run_predict(args.model, args.input, args.output, args.sep, args.block_rows)
            print(f"{n} rows -> {args.output}")
        elif args.command == "simulate":
            cfg = load_config(args.config, SIM_DEFAULTS)
            _override(cfg, args, ["output", "replicates", "seed", "workers"])
            summary = run_simulate(cfg)
            print(f"{len(summary)} summary rows -> {cfg['output']}")
        elif args.command == "inspect":
            data = _plain(inspect_model(args.model))
            if args.json:
                print(json.dumps(data, indent=2))
            else:
                print(yaml.safe_dump(data, sort_keys=False), end="")
    except Exception as exc:  # mapped to an exit code, or re-raised if unexpected
        code = _exit_code(exc)
        print(f"mamm {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
