import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ogpo.envs import (STEP_LIMIT, calibrate_noise, chunk_step, chunk_transition, demo_success_rate, in_wall,
                       make_env, scripted_demos)


def test_zero_actions_truncate_at_limit(rng):
    env = make_env("point-reach")
    state = env.reset(rng, 3)
    total = np.zeros(3)
    while not state.finished.all():
        _, r, _, _ = env.step(state, np.zeros((3, 2)))
        total += r
    assert np.all(total == -STEP_LIMIT) and state.truncated.all() and not state.done.any()


def test_success_gives_zero_reward_and_terminates(rng):
    env = make_env("point-reach")
    state = env.reset(rng, 1)
    state.pos[:] = state.goal + [0.12, 0.0]
    _, r, done, trunc = env.step(state, np.array([[-1.0, 0.0]]))
    assert r[0] == 0.0 and done[0] and not trunc[0]
    with pytest.raises(RuntimeError):
        env.step(state, np.zeros((1, 2)))


def test_chunk_padding_after_midchunk_success(rng):
    env = make_env("point-reach")
    state = env.reset(rng, 1)
    state.pos[:] = state.goal + [0.17, 0.0]
    s_next, rewards, done, _ = chunk_step(env, state, np.tile([-1.0, 0.0], 4), 4)
    assert np.array_equal(rewards[0], [-1.0, 0.0, 0.0, 0.0]) and done[0]
    assert int(state.t[0]) == 2


def test_chunk_transition_record(rng):
    env = make_env("point-reach")
    state = env.reset(rng, 1)
    tr = chunk_transition(env, state, np.zeros(8), 4, episode_id=7)
    assert tr.rewards.sum() == -4 and tr.episode_id == 7 and tr.a.shape == (8,)


def test_out_of_range_actions_are_clipped_and_counted(rng):
    env = make_env("point-reach")
    state = env.reset(rng, 1)
    p0 = state.pos.copy()
    env.step(state, np.array([[3.0, 0.0]]))
    assert state.n_clipped == 1
    assert np.allclose(state.pos[0, 0], min(1.0, p0[0, 0] + 0.05))
    with pytest.raises(ValueError):
        env.step(state, np.array([[np.nan, 0.0]]))


@given(seed=st.integers(0, 10_000))
def test_spawn_respects_bounds_and_separation(seed):
    env = make_env("point-reach")
    state = env.reset(np.random.default_rng(seed), 50)
    assert np.all(np.abs(state.obs()) <= 1.0)
    assert np.all(np.linalg.norm(state.pos - state.goal, axis=1) >= 0.5)


@given(seed=st.integers(0, 10_000))
def test_fork_wall_is_impermeable(seed):
    env = make_env("fork-reach")
    rng = np.random.default_rng(seed)
    state = env.reset(rng, 20)
    for _ in range(60):
        if state.finished.all():
            break
        env.step(state, rng.uniform(-1.5, 1.5, (20, 2)))
        assert not in_wall(state.pos).any()


def test_unknown_env():
    with pytest.raises(ValueError):
        make_env("maze")


@pytest.mark.parametrize("name", ["point-reach", "fork-reach"])
def test_noiseless_demos_always_succeed(name, rng):
    eps = scripted_demos(make_env(name), 30, 0.0, rng)
    assert all(e.success for e in eps)
    for e in eps:
        assert e.obs.shape[0] == e.actions.shape[0] == e.rewards.shape[0]
        assert set(np.unique(e.rewards)) <= {-1.0, 0.0}


def test_demo_quality_decreases_with_noise(rng):
    env = make_env("point-reach")
    assert demo_success_rate(env, 0.05, rng) > demo_success_rate(env, 0.6, rng)


def test_calibration_hits_target():
    env = make_env("point-reach")
    noise = calibrate_noise(env, 0.5, np.random.default_rng(0))
    rate = demo_success_rate(env, noise, np.random.default_rng(1), episodes=800)
    assert abs(rate - 0.5) < 0.1
    with pytest.raises(ValueError):
        calibrate_noise(env, 1.0, np.random.default_rng(0))
