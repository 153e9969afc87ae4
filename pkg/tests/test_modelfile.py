import json

import numpy as np
import pytest

from mamm import sim
from mamm.errors import ModelFormatError
from mamm.modelfile import MODEL_VERSION, load_model, save_model
from mamm.pipeline import FitOptions, ModelSpec, fit_frame


@pytest.fixture(scope="module")
def model_and_frame():
    ds = sim.generate_dataset(sim.SimConfig(N=300, seed=2))
    df = ds.frame()
    spec = ModelSpec("y", ("sx", "sy"), svc=["x1"], fixed=["x2"], groups=["grp"])
    return fit_frame(df, spec, FitOptions(n_knots=30)), df


def test_round_trip_predictions_are_identical(model_and_frame, tmp_path):
    model, df = model_and_frame
    save_model(model, tmp_path / "m.npz")
    back = load_model(tmp_path / "m.npz")
    a, b = model.predict(df), back.predict(df)
    assert a.columns.tolist() == b.columns.tolist()
    for c in a.columns:
        assert np.array_equal(a[c].to_numpy(), b[c].to_numpy()), c
    assert back.fit.loglik_r == model.fit.loglik_r
    assert back.spec.to_dict() == model.spec.to_dict()
    assert back.expected_mc() == model.expected_mc()


def _rewrite_meta(src, dst, **changes):
    with np.load(src) as f:
        arrays = {k: f[k] for k in f.files}
    meta = json.loads(str(arrays.pop("meta")))
    meta.update(changes)
    np.savez(dst, meta=np.array(json.dumps(meta)), **arrays)


def test_version_mismatch(model_and_frame, tmp_path):
    model, _ = model_and_frame
    save_model(model, tmp_path / "m.npz")
    _rewrite_meta(tmp_path / "m.npz", tmp_path / "v.npz", version=MODEL_VERSION + 1)
    with pytest.raises(ModelFormatError, match="version"):
        load_model(tmp_path / "v.npz")
    _rewrite_meta(tmp_path / "m.npz", tmp_path / "f.npz", format="something-else")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "f.npz")


def test_unreadable_files(tmp_path):
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "junk.npz")
    np.savez(tmp_path / "nometa.npz", a=np.zeros(2))
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "nometa.npz")
