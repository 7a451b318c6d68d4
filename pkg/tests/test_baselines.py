import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ogpo import baselines as bl
from ogpo import flow
from ogpo.critic import TdBatch, make_critic
from ogpo.numeric import Adam, Tape, finite_diff_grad, init_mlp, rel_err
from ogpo.replay import SuccessBuffer


def _pol(seed=0):
    return flow.make_flow_policy(2, 2, np.random.default_rng(seed), (6,), (5,), K=3, sigma=0.1)


def test_denoise_weights_order():
    assert np.allclose(bl.denoise_weights(3, 0.5), [0.25, 0.5, 1.0])
    assert np.allclose(bl.denoise_weights(4, 1.0), 1.0)


@given(r=st.lists(st.sampled_from([-1.0, 0.0]), min_size=2, max_size=12), g=st.floats(0.5, 1.0),
       boot=st.floats(-50, 0))
def test_returns_to_go_matches_direct_sum(r, g, boot):
    rewards = np.array(r[: len(r) // 2 * 2]).reshape(-1, 2)
    out = bl.returns_to_go(rewards, g, boot)
    T = len(rewards)
    flat = rewards.reshape(-1)
    for t in range(T):
        direct = sum(flat[2 * t + j] * g**j for j in range(2 * (T - t))) + g ** (2 * (T - t)) * boot
        assert out[t] == pytest.approx(direct)


def test_qc_update_uses_success_pairs(rng):
    pol = _pol()
    succ = SuccessBuffer(2, 2)
    opt = Adam(pol.velocity_parameters(), 1e-3)
    assert bl.qc_update(pol, succ, None, 8, True, opt, rng)["bc_loss"] is None
    succ.add(rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), 1)
    before = pol.velocity_net.params["velocity.b0"].copy()
    out = bl.qc_update(pol, succ, None, 8, True, opt, rng)
    assert out["bc_loss"] > 0 and not np.array_equal(before, pol.velocity_net.params["velocity.b0"])
    with pytest.raises(ValueError):
        bl.qc_update(pol, succ, None, 0, True, opt, rng)


def test_dppo_rejects_stale_batch(rng):
    pol = _pol()
    traj = flow.sample_sde(pol, rng.standard_normal((4, 2)), rng)
    v = init_mlp("value", (2, 4, 1), rng)
    batch = bl.OnPolicyBatch(traj, np.zeros(4), version=0)
    with pytest.raises(ValueError):
        bl.dppo_update(pol, batch, v, 0.9, 0.1, Adam(pol.velocity_parameters(), 1e-3), Adam(v.params, 1e-3), 1)


def test_dppo_loss_at_behaviour_policy_is_minus_weighted_mean(rng):
    pol = _pol()
    traj = flow.sample_sde(pol, rng.standard_normal((5, 2)), rng)
    adv = rng.standard_normal(5)
    loss = bl.dppo_policy_loss(pol, traj, adv, 0.1, 0.5)
    assert float(loss) == pytest.approx(-np.mean(bl.denoise_weights(3, 0.5)[:, None] * adv[None]))


def test_frozen_base_detected(rng):
    pol = _pol()
    lat = bl.make_latent_policy(2, 2, rng, (6,), 2, (6,))
    chk = bl.param_checksum(pol.parameters())
    pol.velocity_net.params["velocity.b0"] += 1e-9
    b = TdBatch(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 4)), np.zeros((2, 2)), np.ones(2, bool))
    with pytest.raises(bl.FrozenBaseError):
        bl.dsrl_update(lat, pol, chk, b, 0.99, 4, Adam(lat.critic.parameters(), 1e-3), Adam(lat.parameters(), 1e-3),
                       rng)


def test_latent_policy_starts_at_prior(rng):
    lat = bl.make_latent_policy(2, 2, rng, (6,), 2, (6,))
    mean, log_std = bl.gaussian_head(lat.head, rng.standard_normal((3, 2)), 2)
    assert np.allclose(mean, 0.0) and np.allclose(log_std, 0.0)


def test_dsrl_act_decodes_through_base_ode(rng):
    pol = _pol()
    lat = bl.make_latent_policy(2, 2, rng, (6,), 2, (6,))
    s = rng.standard_normal((3, 2))
    w, a = bl.dsrl_act(lat, pol, s, np.random.default_rng(5))
    assert np.allclose(a, flow.sample_ode(pol, s, a_K=w))


def test_otf_select_keeps_base_on_ties(rng):
    critic = make_critic(4, 2, rng, (4,))
    s, a = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    out, take = bl.otf_select(critic, s, a, a.copy())
    assert not take.any() and np.array_equal(out, a)


def test_edit_bounded_by_scale(rng):
    edit = bl.make_edit_policy(2, 2, rng, (6,), scale=0.3)
    edit.head.params["edit.b1"][:2] = 50.0
    delta, logp = bl.edit_sample(edit, rng.standard_normal((4, 2)), rng.standard_normal((4, 2)), rng)
    assert np.all(np.abs(delta) <= 0.3) and np.all(np.isfinite(logp))


def test_bptt_matches_manual_chain(rng):
    pol = _pol()
    s = rng.standard_normal((3, 2))
    a_K, noise = rng.standard_normal((3, 2)), rng.standard_normal((3, 3, 2))
    a = a_K
    for i, k in enumerate(range(3, 0, -1)):
        a = flow.step_mean(pol, a, k, s) + 0.1 * noise[i]
    assert np.allclose(bl.reparam_chain(pol, s, a_K, noise), a)


def test_bptt_gradient(rng):
    pol = _pol()
    critic = make_critic(4, 2, rng, (5,))
    s = rng.standard_normal((3, 2))
    a_K, noise = rng.standard_normal((3, 2)), rng.standard_normal((3, 3, 2))

    def f(p, tape=None):
        saved = pol.velocity_net.params
        pol.velocity_net.params = p
        try:
            return bl.bptt_loss(pol, critic, s, rng, tape, a_K, noise)
        finally:
            pol.velocity_net.params = saved

    tape = Tape()
    g = tape.backward(f(pol.velocity_net.params, tape))
    fd = finite_diff_grad(lambda p: float(f(p)), pol.velocity_net.params, 1e-6)
    assert rel_err({k: g[k] for k in fd}, fd) < 1e-5
