import numpy as np
import pytest

from mamm import basis, sim
from mamm.errors import InvalidInputError, InvalidParameterError


@pytest.fixture(scope="module")
def ds():
    return sim.generate_dataset(sim.SimConfig(N=400, seed=11))


def test_rmse_examples():
    t = np.arange(5.0)
    assert sim.rmse([t, t], t) == 0
    assert sim.rmse(t - 2.5, t) == pytest.approx(2.5, rel=1e-15)
    assert sim.rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(np.sqrt(12.5), rel=1e-15)
    with pytest.raises(InvalidInputError):
        sim.rmse([1.0, 2.0, 3.0], [0.0, 0.0])


def test_covariate_spatial_part_has_unit_variance(ds):
    E = ds.factory.block(ds.coords)
    x, s = sim.generate_covariate(E, ds.factory.lambda_hat, 0.5, 3)
    assert s.var(ddof=1) == pytest.approx(1.0, abs=1e-10)
    x2, _ = sim.generate_covariate(E, ds.factory.lambda_hat, 0.5, 3)
    assert np.array_equal(x, x2)


def test_covariate_without_spatial_part():
    N = 1000
    rng = np.random.default_rng(4)
    pts = rng.random((N, 2))
    fac = basis.build_factory(basis.select_knots(pts, 50, seed=0), N)
    x, _ = sim.generate_covariate(fac.block(pts), fac.lambda_hat, 0.0, 9)
    # sampling SE of a normal variance is sqrt(2 / (N - 1))
    assert abs(x.var(ddof=1) - 1.0) <= 3 * np.sqrt(2.0 / (N - 1))


@pytest.mark.parametrize("s_x", [-0.1, 1.0, 1.5])
def test_covariate_rejects_bad_mixing(ds, s_x):
    E = ds.factory.block(ds.coords[:10])
    with pytest.raises(InvalidParameterError):
        sim.generate_covariate(E, ds.factory.lambda_hat, s_x, 0)


def test_dataset_shapes_and_noise_ratio(ds):
    N = ds.config.N
    assert ds.X.shape == (N, 6) and ds.W.shape == (N, 6) and ds.y.shape == (N,)
    signal = (ds.X * ds.W).sum(axis=1) + ds.g + ds.w0
    assert ds.sigma == pytest.approx(0.3 * signal.std(ddof=1), rel=1e-10)
    assert ds.factory.knots.L == min(200, N // 2)


def test_group_count_and_broadcast(ds):
    N = ds.config.N
    assert ds.group_effects.size == N // 20
    assert np.array_equal(ds.g, ds.group_effects[ds.labels])
    counts = np.bincount(ds.labels)
    assert counts.min() >= 20


def test_group_remainder_joins_last_group():
    labels, G = sim.assign_groups(107, 20, np.random.default_rng(0))
    assert G == 5
    assert np.bincount(labels).tolist() == [20, 20, 20, 20, 27]


def test_zero_group_variance():
    d = sim.generate_dataset(sim.SimConfig(N=200, seed=1, tau_g2_ratio=0.0))
    assert np.all(d.g == 0)


def test_dataset_is_deterministic():
    a = sim.generate_dataset(sim.SimConfig(N=150, seed=5))
    b = sim.generate_dataset(sim.SimConfig(N=150, seed=5))
    for f in ("coords", "X", "y", "w0", "W", "g", "labels"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    c = sim.generate_dataset(sim.SimConfig(N=150, seed=6))
    assert not np.array_equal(a.y, c.y)


def test_invalid_configs():
    with pytest.raises(InvalidParameterError):
        sim.generate_dataset(sim.SimConfig(N=39))
    with pytest.raises(InvalidParameterError):
        sim.generate_dataset(sim.SimConfig(N=100, s_x=1.0))
    with pytest.raises(InvalidParameterError):
        sim.generate_dataset(sim.SimConfig(N=100, surface_scaling="odd"))


def test_large_scale_surfaces_have_higher_moran():
    wins = total = 0
    for rep in range(10):
        d = sim.generate_dataset(sim.SimConfig(N=500, seed=100 + rep))
        C0 = basis.proximity_matrix(d.coords, d.factory.knots.range_r)
        mc = [basis.moran_coefficient(d.W[:, p], C0) for p in range(6)]
        for big in mc[:3]:
            for small in mc[3:]:
                wins += big > small
                total += 1
    assert wins >= 0.9 * total


def test_model_spec_and_terms():
    cfg = sim.SimConfig(N=100)
    assert sim.model_spec(cfg).groups == ["grp"]
    assert sim.model_spec(cfg, with_groups=False).groups == []
    assert sim.term_names(cfg) == [f"svc_x{p}" for p in range(1, 7)] + ["w0", "group_grp"]


@pytest.fixture(scope="module")
def tiny_experiment():
    base = sim.SimConfig(N=120, L=30)
    grid = [{"tau_g2_ratio": 0.0}, {"tau_g2_ratio": 1.0}]
    return grid, base, sim.run_experiment(grid, 1, base=base, seed=7)


def test_experiment_summary_rows(tiny_experiment):
    grid, base, (summary, records) = tiny_experiment
    assert len(summary) == len(grid) * len(sim.term_names(base))
    assert len(records) == 2 * len(grid)
    assert set(records["model"]) == {"mamm", "mamm_g"}
    assert (summary["rmse_mamm"] >= 0).all()
    assert "time" not in summary.columns


def test_experiment_is_reproducible(tiny_experiment):
    grid, base, (summary, _) = tiny_experiment
    again, _ = sim.run_experiment(grid, 1, base=base, seed=7)
    assert summary.to_csv(index=False) == again.to_csv(index=False)


def test_replicate_seeds_are_distinct():
    seeds = {sim.replicate_seed(0, c, r) for c in range(3) for r in range(50)}
    assert len(seeds) == 150
