import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ogpo.config import ALGOS, PRESETS, TrainerConfig


@pytest.mark.parametrize("algo", ALGOS)
def test_presets_resolve(algo):
    cfg = TrainerConfig(algo=algo).resolved()
    assert cfg.advantage is not None and cfg.bc_coeff is not None and cfg.best_of_n is not None
    for k, v in PRESETS.get(algo, {}).items():
        assert getattr(cfg, k) == v


def test_explicit_fields_beat_presets():
    cfg = TrainerConfig(algo="ogpo-plus", best_of_n=0, bc_coeff=0.5).resolved()
    assert cfg.best_of_n == 0 and cfg.bc_coeff == 0.5


def test_variant_dispatch_by_config():
    assert TrainerConfig(algo="ogpo-ca").resolved().advantage == "conservative"
    assert TrainerConfig(algo="ogpo-chi2").resolved().advantage == "chi2"
    plus = TrainerConfig(algo="ogpo-plus").resolved()
    assert (plus.bc_coeff, plus.best_of_n, plus.G, plus.M, plus.clip_eps) == (1.0, 8, 32, 10, 0.01)


@pytest.mark.parametrize("bad", [
    {"algo": "sac"}, {"gamma": 1.5}, {"sigma": 0.0}, {"G": 1}, {"clip_eps": 0.0}, {"r_offline": 2.0},
    {"tau": -0.1}, {"q_agg": "max"}, {"advantage": "rank"}, {"M": 1, "algo": "ogpo-plus"}, {"demo_target": 1.0},
    {"actor_schedule": "linear"},
])
def test_validation(bad):
    with pytest.raises(ValueError):
        TrainerConfig(**bad)


def test_unknown_keys_rejected():
    with pytest.raises(ValueError):
        TrainerConfig.from_dict({"learning_rate": 1.0})


@given(seed=st.integers(0, 1000), G=st.integers(2, 64), hidden=st.lists(st.integers(1, 128), min_size=1, max_size=3))
def test_json_round_trip(seed, G, hidden):
    cfg = TrainerConfig(seed=seed, G=G, actor_hidden=tuple(hidden))
    back = TrainerConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg and back.config_hash() == cfg.config_hash()


def test_hash_tracks_resolved_values():
    assert TrainerConfig(algo="ogpo-plus").config_hash() == TrainerConfig(algo="ogpo-plus", best_of_n=8).config_hash()
    assert TrainerConfig(seed=0).config_hash() != TrainerConfig(seed=1).config_hash()


def test_save_load(tmp_path):
    cfg = TrainerConfig(algo="qc", seed=3)
    cfg.save(tmp_path / "c.json")
    assert TrainerConfig.load(tmp_path / "c.json") == cfg
