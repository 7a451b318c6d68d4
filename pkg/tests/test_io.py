import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ogpo.envs import make_env, scripted_demos
from ogpo.io import (CheckpointError, MetricsWriter, export_learning_curve, load_checkpoint, load_dataset,
                     read_manifest, read_metrics, save_checkpoint, save_dataset)

finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(a=arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 3)), elements=finite),
       b=arrays(np.float64, st.integers(1, 5), elements=finite))
def test_checkpoint_round_trip_is_byte_stable(tmp_path_factory, a, b):
    d = tmp_path_factory.mktemp("ck")
    save_checkpoint(d / "x", {"net/a": a, "net/b": b}, "ogpo", "h1", {"k": 1})
    arrays_, manifest = load_checkpoint(d / "x", "ogpo", "h1")
    assert np.array_equal(arrays_["net/a"], a) and np.array_equal(arrays_["net/b"], b)
    save_checkpoint(d / "y", arrays_, "ogpo", "h1", {"k": 1})
    assert (d / "x").read_bytes() == (d / "y").read_bytes()
    assert manifest["meta"] == {"k": 1}


def test_checkpoint_validation(tmp_path):
    p = tmp_path / "c"
    save_checkpoint(p, {"w": np.ones(3)}, "ogpo", "abc")
    with pytest.raises(CheckpointError):
        load_checkpoint(p, algo="qc")
    with pytest.raises(CheckpointError):
        load_checkpoint(p, config_hash="zzz")
    arrays_, _ = load_checkpoint(p, algo="qc", config_hash="zzz", force=True)
    assert np.array_equal(arrays_["w"], np.ones(3))
    raw = p.read_bytes()
    (tmp_path / "t").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t")
    (tmp_path / "h").write_bytes(raw[:4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "h")
    assert read_manifest(p)["algo"] == "ogpo"


def test_dataset_round_trip(tmp_path, rng):
    eps = scripted_demos(make_env("point-reach"), 4, 0.1, rng)
    save_dataset(tmp_path / "d.jsonl", eps, "point-reach", 4, 2, 4, {"noise_std": 0.1})
    header, back = load_dataset(tmp_path / "d.jsonl")
    assert header["episodes"] == 4 and header["noise_std"] == 0.1
    for e, f in zip(eps, back):
        assert np.array_equal(e.obs, f.obs) and np.array_equal(e.actions, f.actions) and e.success == f.success


def test_metrics_writer_and_curve(tmp_path):
    with MetricsWriter(tmp_path / "m.jsonl") as w:
        w.write({"phase": "eval", "step": 0, "success_rate": 0.5, "mean_succ_len": None, "mean_return": -3.0})
        w.write({"phase": "train", "step": 5, "loss": float("nan")})
        w.write({"phase": "eval", "step": 10, "success_rate": np.float64(0.75), "mean_succ_len": 4.0,
                 "mean_return": -1.0})
        with pytest.raises(ValueError):
            w.write({"phase": "eval", "step": 3})
        with pytest.raises(ValueError):
            w.write({"step": 3})
    recs = read_metrics(tmp_path / "m.jsonl")
    assert recs[1]["loss"] is None
    assert export_learning_curve(tmp_path / "m.jsonl", tmp_path / "c.csv") == 2
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "step,success_rate,mean_succ_len,mean_return" and lines[1] == "0,0.5,,-3.0"
