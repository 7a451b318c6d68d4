import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ogpo import extraction as ex
from ogpo import flow
from ogpo.critic import make_critic
from ogpo.numeric import Tape, ad

groups = st.lists(st.floats(-20, 20), min_size=24, max_size=24).map(lambda v: np.array(v).reshape(2, 4, 3))


def _group(q):
    """GroupSample with per-member values ``q`` (N, G, M) and a dummy chain."""
    q = np.asarray(q, dtype=float)
    N, G, _ = q.shape
    traj = flow.DenoisingTrajectory(np.zeros((N * G, 1)), np.zeros((2, N * G, 1)), np.zeros((1, N * G)),
                                    np.zeros((1, N * G, 1)), 0.1, False)
    agg = q.mean(axis=2)
    return ex.GroupSample(np.zeros((N, 1)), traj, q, agg, agg.mean(axis=1))


def test_clip_examples():
    # A > 0 caps the ratio at 1 + eps; A < 0 floors it at 1 - eps
    assert ex.clipped_terms(np.array([1.5]), np.array([2.0]), 0.2)[0] == pytest.approx(2.4)
    assert ex.clipped_terms(np.array([0.5]), np.array([2.0]), 0.2)[0] == pytest.approx(1.0)
    assert ex.clipped_terms(np.array([0.5]), np.array([-2.0]), 0.2)[0] == pytest.approx(-1.6)
    assert ex.clipped_terms(np.array([1.5]), np.array([-2.0]), 0.2)[0] == pytest.approx(-3.0)
    assert ex.clipped_terms(np.array([1.0]), np.array([3.0]), 0.01)[0] == pytest.approx(3.0)
    with pytest.raises(ValueError):
        ex.clipped_terms(np.ones(1), np.ones(1), 0.0)


def test_clipped_side_has_no_gradient():
    tape = Tape()
    w = tape.param("w", np.array([1.5, 0.5]))
    g = tape.backward(ad.sum_(ex.clipped_terms(w, np.array([2.0, 2.0]), 0.2)))
    assert np.array_equal(g["w"], [0.0, 2.0])


@given(groups)
def test_mean_baseline_is_zero_sum_per_group(q):
    adv = ex.mean_baseline_adv(_group(q)).adv
    assert np.allclose(adv.sum(axis=1), 0.0, atol=1e-9)


def test_conservative_sign_consensus_example():
    # G = 2 actions, M = 3 members. Action 0 beats action 1 under every member.
    q = np.array([[[3.0, 5.0, 4.0], [1.0, 1.0, 2.0]]])
    adv = ex.conservative_adv(_group(q)).adv
    assert np.array_equal(adv, [[1.0, -1.0]])
    # members disagree on the sign -> zero
    q = np.array([[[3.0, 0.0, 4.0], [1.0, 1.0, 2.0]]])
    assert np.array_equal(ex.conservative_adv(_group(q)).adv, [[0.0, 0.0]])


@given(groups)
def test_conservative_bounded_by_every_member(q):
    adv = ex.conservative_adv(_group(q)).adv
    A = q - q.mean(axis=1, keepdims=True)
    assert np.all(np.abs(adv) <= np.abs(A).min(axis=2) + 1e-12)
    assert np.all((adv == 0) | (np.sign(adv)[..., None] == np.sign(A)).all(axis=2))


@given(groups)
def test_grpo_std_preserves_argmax(q):
    g = _group(q)
    if np.any(g.agg_q.std(axis=1) == 0):
        return
    assert np.array_equal(ex.grpo_std_adv(g).adv.argmax(axis=1), ex.mean_baseline_adv(g).adv.argmax(axis=1))


def test_grpo_std_rejects_flat_group():
    with pytest.raises(ValueError):
        ex.grpo_std_adv(_group(np.ones((1, 3, 2))))


def test_aspo_dead_zone_values():
    eps = 0.1
    A = np.array([-2.0, -2.0, -2.0, 2.0])
    r = np.array([1.05, 1.3, 0.7, 1.3])
    out = ex.aspo_terms(r, A, eps)
    assert out[0] == pytest.approx(1.05 * -2.0)  # inside the dead zone
    assert out[1] == pytest.approx(1.3 * -2.0 - 2.0 / 0.4 * 0.2**2)
    assert out[2] == pytest.approx(0.7 * -2.0 - 2.0 / 0.4 * 0.2**2)
    assert out[3] == pytest.approx(1.1 * 2.0)  # positive advantages use the clipped surrogate


def test_awr_weights_capped_and_masked():
    w = ex._awr_weights(np.array([-1.0, 0.0, 100.0]), 1.0)
    assert np.allclose(w, [np.exp(-1.0), 1.0, ex.AWR_MAX_WEIGHT])
    assert np.allclose(ex._awr_weights(np.array([-1.0, 2.0]), 1.0, positive_only=True), [0.0, np.exp(2.0)])
    with pytest.raises(ValueError):
        ex._awr_weights(np.zeros(1), 0.0)


def _real_group(seed=0, G=4):
    rng = np.random.default_rng(seed)
    pol = flow.make_flow_policy(2, 2, rng, (6,), (5,), K=3, sigma=0.1)
    critic = make_critic(4, 3, rng, (6,))
    g = ex.sample_group(pol, critic, rng.standard_normal((3, 2)), G, rng)
    return pol, critic, g


def test_sample_group_layout():
    pol, critic, g = _real_group()
    assert g.q.shape == (3, 4, 3) and g.agg_q.shape == (3, 4) and len(g.traj) == 12
    assert np.array_equal(g.traj.s[:4], np.repeat(g.s[:1], 4, axis=0))
    with pytest.raises(ValueError):
        ex.sample_group(pol, critic, g.s, 1, np.random.default_rng(0))


def test_ppo_loss_at_reference_is_minus_mean_advantage():
    pol, _, g = _real_group()
    adv = ex.mean_baseline_adv(g)
    loss, info = ex.ppo_loss(pol, pol.copy(), g, adv, 0.01)
    assert float(loss) == pytest.approx(-adv.adv.mean(), abs=1e-12)
    assert info["clip_frac"] == 0.0 and info["ratio_mean"] == pytest.approx(1.0)


def test_no_negative_drops_negative_advantages():
    pol, _, g = _real_group()
    adv = ex.mean_baseline_adv(g)
    loss, _ = ex.ppo_loss(pol, pol.copy(), g, adv, 0.01, no_negative=True)
    assert float(loss) == pytest.approx(-np.maximum(adv.flat(), 0).mean())


def test_chi2_penalty_vanishes_at_slow_policy():
    pol, _, g = _real_group()
    adv = ex.chi2_adv(g, pol, pol.copy(), 1.0)
    assert np.allclose(adv.total(), adv.flat() - adv.beta.reshape(-1))
    assert np.allclose(adv.beta, g.q.std(axis=2))
    with pytest.raises(ValueError):
        ex.compute_advantages(g, "chi2", pol)
    with pytest.raises(ValueError):
        ex.compute_advantages(g, "rank")


def test_pessimistic_group_at_reference_mixes_half_min():
    pol, _, g = _real_group()
    pg = ex.pessimistic_group(g, pol, pol.copy(), 10.0)
    assert np.allclose(pg.agg_q, 0.5 * g.q.mean(axis=2) + 0.5 * g.q.min(axis=2))


def test_bc_success_loss_empty_is_zero(rng):
    pol, _, _ = _real_group()
    assert ex.bc_success_loss(pol, np.zeros((0, 2)), np.zeros((0, 2)), rng) == 0.0
    assert ex.total_loss(2.0, 3.0, 0.5) == 3.5
