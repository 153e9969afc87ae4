import json

import numpy as np
import pandas as pd
import pytest
import yaml

from mamm import cli, sim
from mamm.pipeline import csv_source, fit_source, iter_effects

N_ROWS = 1200


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    ds = sim.generate_dataset(sim.SimConfig(N=N_ROWS, seed=21))
    df = ds.frame()
    path = d / "train.csv"
    df.to_csv(path, index=False, float_format="%.17g")
    return path, df


def fit_args(path, out, *extra):
    return ["fit", str(path), "-o", str(out), "--response", "y", "--coords", "sx", "sy",
            "--knots", "40", *extra]


@pytest.fixture(scope="module")
def fitted_dir(data_csv, tmp_path_factory):
    path, _ = data_csv
    out = tmp_path_factory.mktemp("fit")
    code = cli.main(fit_args(path, out, "--svc", "x1", "x4", "--fixed", "x2", "--groups", "grp",
                             "--block-rows", "250"))
    assert code == cli.EXIT_OK
    return out


def test_fit_writes_artifacts(fitted_dir):
    assert {p.name for p in fitted_dir.iterdir()} >= {"effects.csv", "model.npz", "summary.yaml"}
    summary = yaml.safe_load((fitted_dir / "summary.yaml").read_text())
    assert summary["N"] == N_ROWS and summary["rows_rejected"] == 0
    names = [t["name"] for t in summary["terms"]]
    assert names == ["w0", "svc_x1", "svc_x4", "group_grp"]
    for t in summary["terms"]:
        if t["kind"] != "group":
            assert "alpha" in t and "expected_mc" in t
    assert set(summary["timings"]) >= {"scan", "basis", "accumulate", "fit", "effects"}
    assert summary["memory"]["max_rows"] <= 250
    assert summary["config"]["block_rows"] == 250 and summary["config"]["knots"] == 40
    eff = pd.read_csv(fitted_dir / "effects.csv")
    assert len(eff) == N_ROWS
    assert list(eff.columns[:2]) == ["row", "fitted"]
    assert (eff.filter(like="_se") >= 0).all().all()


def test_effects_match_in_process_recovery_bitwise(data_csv, fitted_dir):
    path, _ = data_csv
    cfg = dict(cli.FIT_DEFAULTS, input=str(path), response="y", coords=["sx", "sy"], knots=40,
               svc=["x1", "x4"], fixed=["x2"], groups=["grp"], block_rows=250)
    cfg = cli.validate_fit_config(cfg)
    src = csv_source(path, 250)
    model = fit_source(src, cli.model_spec(cfg), cli.fit_options(cfg))
    want = pd.concat(list(iter_effects(model, src)), ignore_index=True)
    got = pd.read_csv(fitted_dir / "effects.csv", float_precision="round_trip")
    assert np.array_equal(got.to_numpy(), want.to_numpy())


def test_fixed_only_fit_is_ols(data_csv, tmp_path):
    path, df = data_csv
    assert cli.main(fit_args(path, tmp_path, "--fixed", "x1", "x2", "--no-residual",
                             "--summary-format", "json")) == 0
    X = np.column_stack([np.ones(len(df)), df["x1"], df["x2"]])
    b, rss, *_ = np.linalg.lstsq(X, df["y"].to_numpy(), rcond=None)
    eff = pd.read_csv(tmp_path / "effects.csv")
    np.testing.assert_allclose(eff["fitted"], X @ b, rtol=1e-10, atol=1e-10)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["sigma2"] == pytest.approx(rss[0] / (len(df) - 3), rel=1e-10)
    assert summary["sweeps"] == 0


def test_block_target_does_not_change_the_fit(data_csv, tmp_path):
    path, _ = data_csv
    got = []
    for rows in (10_000, 1_000):
        out = tmp_path / str(rows)
        # default knot count: a handful of knots leaves alpha weakly identified
        args = fit_args(path, out, "--svc", "x1", "--block-rows", str(rows))
        args[args.index("--knots") + 1] = "200"
        assert cli.main(args) == 0
        got.append(yaml.safe_load((out / "summary.yaml").read_text()))
    a, b = got
    assert a["loglik_r"] == pytest.approx(b["loglik_r"], abs=1e-6)
    for ta, tb in zip(a["terms"], b["terms"]):
        assert np.log(ta["tau2"]) == pytest.approx(np.log(tb["tau2"]), abs=1e-6)
        assert ta["alpha"] == pytest.approx(tb["alpha"], abs=1e-6)


def test_predict_training_table_matches_effects(data_csv, fitted_dir, tmp_path):
    path, _ = data_csv
    out = tmp_path / "pred.csv"
    assert cli.main(["predict", str(fitted_dir / "model.npz"), str(path), "-o", str(out),
                     "--block-rows", "333"]) == 0
    pred = pd.read_csv(out)
    eff = pd.read_csv(fitted_dir / "effects.csv")
    assert len(pred) == N_ROWS
    np.testing.assert_allclose(pred["yhat"], eff["fitted"], rtol=1e-10, atol=1e-10)
    for c in ("w0", "svc_x1", "svc_x4", "group_grp", "svc_x1_se"):
        np.testing.assert_allclose(pred[c], eff[c], rtol=1e-10, atol=1e-10)
    assert not pred["group_grp_unseen"].any()


def test_predict_empty_table(data_csv, fitted_dir, tmp_path):
    _, df = data_csv
    empty = tmp_path / "empty.csv"
    df.iloc[:0].to_csv(empty, index=False)
    out = tmp_path / "pred.csv"
    assert cli.main(["predict", str(fitted_dir / "model.npz"), str(empty), "-o", str(out)]) == 0
    pred = pd.read_csv(out)
    assert len(pred) == 0 and "yhat" in pred.columns


def test_predict_missing_column_is_a_data_error(data_csv, fitted_dir, tmp_path):
    _, df = data_csv
    p = tmp_path / "nox4.csv"
    df.drop(columns="x4").head(5).to_csv(p, index=False)
    assert cli.main(["predict", str(fitted_dir / "model.npz"), str(p), "-o", str(tmp_path / "o.csv")]) == 2


def test_inspect(fitted_dir, capsys):
    assert cli.main(["inspect", str(fitted_dir / "model.npz"), "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["spec"]["svc"] == ["x1", "x4"] and data["n_knots"] == 40
    assert data["groups"]["grp"] == N_ROWS // 20
    assert cli.main(["inspect", str(fitted_dir / "model.npz")]) == 0
    assert "sigma2" in yaml.safe_load(capsys.readouterr().out)


# ----------------------------------------------------------------- failures

def test_malformed_row_reports_line(data_csv, tmp_path, capsys):
    _, df = data_csv
    p = tmp_path / "bad.csv"
    lines = df.head(50).to_csv(index=False).splitlines()
    lines[17] = lines[17] + ",999"
    p.write_text("\n".join(lines) + "\n")
    assert cli.main(fit_args(p, tmp_path / "o")) == cli.EXIT_DATA
    assert "line 18" in capsys.readouterr().err


def test_nonfinite_rows_are_rejected_with_count(data_csv, tmp_path):
    _, df = data_csv
    bad = df.head(300).copy()
    bad.loc[[3, 10], "y"] = np.nan
    bad.loc[20, "x1"] = np.inf
    p = tmp_path / "nan.csv"
    bad.to_csv(p, index=False)
    out = tmp_path / "o"
    assert cli.main(fit_args(p, out, "--svc", "x1")) == 0
    summary = yaml.safe_load((out / "summary.yaml").read_text())
    assert summary["rows_rejected"] == 3 and summary["N"] == 297


def test_usage_errors(data_csv, tmp_path, capsys):
    path, _ = data_csv
    with pytest.raises(SystemExit) as ei:
        cli.main(["fit", "--bogus"])
    assert ei.value.code == cli.EXIT_USAGE
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["fit", str(path), "-o", str(tmp_path)]) == cli.EXIT_USAGE  # no response
    assert cli.main(fit_args(path, tmp_path, "--knots", "1")) == cli.EXIT_USAGE
    cfg = tmp_path / "c.yaml"
    cfg.write_text("respons: y\n")
    assert cli.main(["fit", str(path), "-c", str(cfg)]) == cli.EXIT_USAGE
    assert "respons" in capsys.readouterr().err


def test_missing_column_and_file(data_csv, tmp_path):
    path, _ = data_csv
    assert cli.main(fit_args(path, tmp_path, "--svc", "nope")) == cli.EXIT_DATA
    assert cli.main(fit_args(tmp_path / "absent.csv", tmp_path)) == cli.EXIT_DATA


def test_degenerate_fit_is_a_numerical_failure(tmp_path, capsys):
    rng = np.random.default_rng(0)
    df = pd.DataFrame({"sx": rng.random(60), "sy": rng.random(60), "y": 2.5})
    p = tmp_path / "const.csv"
    df.to_csv(p, index=False)
    assert cli.main(fit_args(p, tmp_path / "o", "--no-residual")) == cli.EXIT_NUMERIC
    assert "error" in capsys.readouterr().err


def test_config_file_with_overrides(data_csv, tmp_path):
    path, _ = data_csv
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"input": str(path), "response": "y", "coords": ["sx", "sy"],
                                   "fixed": ["x1"], "residual": False, "knots": 30,
                                   "output": str(tmp_path / "a")}))
    assert cli.main(["fit", "-c", str(cfg), "--knots", "25"]) == 0
    s = yaml.safe_load((tmp_path / "a" / "summary.yaml").read_text())
    assert s["config"]["knots"] == 25 and s["config"]["fixed"] == ["x1"]


# ----------------------------------------------------------------- simulate

def test_simulate_is_reproducible(tmp_path):
    cfg = tmp_path / "sim.yaml"
    cfg.write_text(yaml.safe_dump({"replicates": 1, "seed": 3, "base": {"N": 100, "L": 20},
                                   "grid": [{"tau_g2_ratio": 0.0}, {"tau_g2_ratio": 1.0}]}))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["simulate", "-c", str(cfg), "-o", str(out)]) == 0
        outs.append(out)
    a, b = ((o / "summary.csv").read_bytes() for o in outs)
    assert a == b
    summary = pd.read_csv(outs[0] / "summary.csv")
    assert sorted(set(summary["cell"])) == [0, 1]
    assert len(summary) == 2 * 8
    seeds = pd.read_csv(outs[0] / "seeds.csv")
    assert len(seeds) == 2 and seeds["seed"].nunique() == 2


def test_simulate_rejects_unknown_fields(tmp_path):
    cfg = tmp_path / "sim.yaml"
    cfg.write_text(yaml.safe_dump({"grid": [{"n": 5}]}))
    assert cli.main(["simulate", "-c", str(cfg), "-o", str(tmp_path / "o")]) == cli.EXIT_USAGE
