import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ogpo.replay import ChunkTransition, RolloutBuffer, SuccessBuffer, sample_batch


def _tr(i, ep=0, h=2):
    return ChunkTransition(np.full(2, float(i)), np.full(3, float(i)), np.zeros(h), np.full(2, i + 1.0), False, False,
                           ep)


def test_fifo_eviction_and_growth():
    buf = RolloutBuffer(2, 3, 2, capacity=3000)
    for i in range(3500):
        buf.push(_tr(i, ep=i))
    assert len(buf) == 3000
    assert set(buf.s[:, 0]) == set(range(500, 3500))


def test_reward_length_checked():
    buf = RolloutBuffer(2, 3, 2)
    with pytest.raises(ValueError):
        buf.push(_tr(0, h=3))


def test_success_finalisation_copies_only_that_episode():
    buf, succ = RolloutBuffer(2, 3, 2), SuccessBuffer(2, 3)
    for i in range(3):
        buf.push(_tr(i, ep=1))
    buf.push(_tr(9, ep=2))
    buf.finalize_episode(succ, 1, True)
    buf.finalize_episode(succ, 2, False)
    s, a, ep = succ.arrays()
    assert len(succ) == 3 and set(s[:, 0]) == {0.0, 1.0, 2.0} and np.all(ep == 1)
    with pytest.raises(KeyError):
        buf.finalize_episode(succ, 1, True)
    with pytest.raises(ValueError):
        buf.push(_tr(5, ep=1))


def test_evicted_rows_skip_success_copy():
    buf, succ = RolloutBuffer(2, 3, 2, capacity=2), SuccessBuffer(2, 3)
    for i in range(3):
        buf.push(_tr(i, ep=4))
    buf.finalize_episode(succ, 4, True)
    assert len(succ) == 2


def test_empty_success_buffer_samples_nothing(rng):
    s, a = SuccessBuffer(2, 3).sample(5, rng)
    assert s.shape == (0, 2) and a.shape == (0, 3)


def _filled(n, tag, ep0=0):
    buf = RolloutBuffer(2, 3, 2)
    for i in range(n):
        buf.push(_tr(tag, ep=ep0 + i))
    return buf


@given(r=st.sampled_from([0.0, 1.0]), n=st.integers(1, 40))
def test_mixing_extremes(r, n):
    online, offline = _filled(5, 1.0), _filled(5, -1.0)
    b = sample_batch(online, offline, r, n, np.random.default_rng(0))
    assert np.all(b.s[:, 0] == (-1.0 if r == 1.0 else 1.0))
    assert np.all(b.from_offline == (r == 1.0))


def test_mixing_fraction_and_row_alignment():
    online, offline = _filled(5, 1.0), _filled(5, -1.0)
    b = sample_batch(online, offline, 0.3, 20000, np.random.default_rng(0))
    assert abs(b.from_offline.mean() - 0.3) < 0.02
    assert np.array_equal(b.s[:, 0] < 0, b.from_offline)
    assert np.array_equal(b.s_next[:, 0], b.s[:, 0] + 1.0)


def test_mixing_errors(rng):
    online = _filled(2, 1.0)
    with pytest.raises(ValueError):
        sample_batch(online, None, 0.5, 4, rng)
    with pytest.raises(ValueError):
        sample_batch(RolloutBuffer(2, 3, 2), None, 0.0, 4, rng)
    with pytest.raises(ValueError):
        sample_batch(online, None, 1.5, 4, rng)
