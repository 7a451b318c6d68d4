"""Numerical oracles behind the ``gradcheck``, ``marginal-check``, ``chi2-check`` and ``td-check`` commands."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import baselines as bl
from . import extraction as ex
from . import flow
from .critic import TdBatch, make_critic, q_eval, td_loss, td_targets, td_update
from .numeric import Adam, Tape, ad, finite_diff_grad, grad_norm, rel_err
from .rng import stream

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        items = ", ".join(f"{k}={_fmt(v)}" for k, v in self.detail.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({items}; {self.seconds:.1f}s)"


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


# -- gradient suite -------------------------------------------------------------


def fd_check(loss_fn: Callable, params: dict[str, np.ndarray], eps: float = 1e-6) -> tuple[float, float]:
    """Relative error between tape and central-difference gradients of ``loss_fn`` w.r.t. ``params``.

    ``loss_fn(tape)`` must be deterministic; ``params`` are perturbed in place and restored.
    Returns ``(rel_err, analytic grad norm)``.
    """
    tape = Tape()
    g = tape.backward(loss_fn(tape))
    g = {k: g[k] for k in params}
    saved = {k: v.copy() for k, v in params.items()}

    def f(work):
        for k in params:
            params[k][...] = work[k]
        return float(ad.value(loss_fn(None)))

    try:
        fd = finite_diff_grad(f, saved, eps)
    finally:
        for k in params:
            params[k][...] = saved[k]
    return rel_err(g, fd), grad_norm(g)


OBS, ACT = 2, 2


def _policy(rng, K=3, sigma=0.1):
    return flow.make_flow_policy(OBS, ACT, rng, hidden=(5,), denoiser_hidden=(4,), K=K, sigma=sigma)


def _jitter(params, rng, scale):
    for v in params.values():
        v += scale * rng.standard_normal(v.shape)


def _setup(seed: int):
    rng = stream(seed, "gradcheck")
    policy = _policy(rng)
    _jitter(policy.parameters(), rng, 0.3)  # leave the zero-bias initial point
    ref = policy.copy()
    _jitter(ref.velocity_parameters(), rng, 1e-3)
    critic = make_critic(OBS + ACT, 3, rng, hidden=(5,))
    critic.target = critic.online.copy()
    _jitter(critic.target.params, rng, 0.1)
    s = rng.uniform(-1, 1, (3, OBS))
    a = rng.uniform(-1, 1, (3, ACT))
    return rng, policy, ref, critic, s, a


def _group(ref, critic, s, seed):
    return ex.sample_group(ref, critic, s, 4, stream(seed, "group"))


def _head_flow_matching(seed):
    rng, policy, _, _, s, a = _setup(seed)
    z, tau = rng.standard_normal(a.shape), rng.uniform(0, 1, len(a))
    return lambda t: flow.flow_matching_loss(policy, s, a, tape=t, z=z, tau=tau), policy.velocity_parameters()


def _head_denoiser(seed):
    _, policy, _, _, s, a = _setup(seed)
    return lambda t: flow.denoiser_loss(policy, s, a, stream(seed, "dn"), t), policy.denoiser_net.params


def _head_td(seed):
    rng, _, _, critic, s, a = _setup(seed)
    y = rng.standard_normal(len(s))
    return lambda t: td_loss(critic, s, a, y, t), critic.online.params


def _head_ppo(seed):
    _, policy, ref, critic, s, _ = _setup(seed)
    group = _group(ref, critic, s, seed)
    slow = ref.copy()
    _jitter(slow.velocity_parameters(), stream(seed, "slow"), 1e-3)
    chi2 = seed % 2 == 1  # odd points exercise the differentiable drift penalty

    def loss(t):
        adv = ex.chi2_adv(group, policy, slow, 0.1, t) if chi2 else ex.mean_baseline_adv(group)
        return ex.ppo_loss(policy, ref, group, adv, 0.2, tape=t)[0]

    return loss, policy.velocity_parameters()


def _head_bc(seed):
    _, policy, _, _, s, a = _setup(seed)
    return lambda t: ex.bc_success_loss(policy, s, a, stream(seed, "bc"), t), policy.velocity_parameters()


def _head_awr(seed):
    _, policy, ref, critic, s, _ = _setup(seed)
    group = _group(ref, critic, s, seed)
    adv = ex.mean_baseline_adv(group)
    return lambda t: ex.awr_loss(policy, group, adv, 1.0, stream(seed, "awr"), t), policy.velocity_parameters()


def _head_aw_ogpo(seed):
    _, policy, ref, critic, s, _ = _setup(seed)
    group = _group(ref, critic, s, seed)
    adv = ex.mean_baseline_adv(group)
    return lambda t: ex.aw_ogpo_loss(policy, ref, group, adv, 1.0, tape=t), policy.velocity_parameters()


def _head_aspo(seed):
    _, policy, ref, critic, s, _ = _setup(seed)
    group = _group(ref, critic, s, seed)
    adv = ex.mean_baseline_adv(group)
    return (lambda t: ex.fpo_aspo_loss(policy, ref, group, adv, 0.05, stream(seed, "aspo"), t),
            policy.velocity_parameters())


def _head_bptt(seed):
    rng, policy, _, critic, s, _ = _setup(seed)
    a_K = rng.standard_normal((len(s), ACT))
    noise = rng.standard_normal((policy.K, len(s), ACT))
    return lambda t: bl.bptt_loss(policy, critic, s, None, t, a_K, noise), policy.velocity_parameters()


def _head_dsrl(seed):
    rng, _, _, _, s, _ = _setup(seed)
    lat = bl.make_latent_policy(OBS, ACT, rng, hidden=(5,), M=3, critic_hidden=(5,))
    _jitter(lat.head.params, rng, 0.3)
    eps = rng.standard_normal((len(s), ACT))
    return lambda t: bl.dsrl_actor_loss(lat, s, None, 0.1, t, eps), lat.parameters()


def _head_expo(seed):
    rng, _, _, critic, s, a = _setup(seed)
    edit = bl.make_edit_policy(OBS, ACT, rng, hidden=(5,), entropy_coef=0.1)
    _jitter(edit.head.params, rng, 0.3)
    eps = rng.standard_normal((len(s), ACT))
    return lambda t: bl.expo_actor_loss(edit, critic, s, a, None, t, eps), edit.parameters()


GRADIENT_HEADS: dict[str, Callable] = {
    "flow-matching": _head_flow_matching,
    "denoiser": _head_denoiser,
    "td": _head_td,
    "ppo": _head_ppo,
    "bc": _head_bc,
    "awr": _head_awr,
    "aw-ogpo": _head_aw_ogpo,
    "aspo": _head_aspo,
    "bptt": _head_bptt,
    "dsrl-actor": _head_dsrl,
    "expo-actor": _head_expo,
}


def gradcheck(points: int = 10, tol: float = GRAD_TOL, heads=None) -> list[CheckResult]:
    """Tape gradients against central differences at ``points`` random parameter points per head."""
    out = []
    for name in heads or GRADIENT_HEADS:
        t0 = time.perf_counter()
        worst, min_norm = 0.0, np.inf
        for p in range(points):
            loss_fn, params = GRADIENT_HEADS[name](p)
            err, gn = fd_check(loss_fn, params)
            worst, min_norm = max(worst, err), min(min_norm, gn)
        # a vanishing gradient would make the comparison vacuous
        ok = worst < tol and min_norm > 0
        out.append(CheckResult(f"gradcheck:{name}", ok, {"max_rel_err": worst, "min_grad_norm": min_norm},
                               time.perf_counter() - t0))
    return out


# -- SDE marginal ---------------------------------------------------------------


def toy_terminal(toy: flow.GaussianToyFlow, n: int, rng, correct: bool) -> np.ndarray:
    """Terminal samples of the noise-injected sampler, without storing the chain."""
    a = rng.standard_normal((n, 1))
    s = np.zeros((n, 0))
    for k in range(toy.K, 0, -1):
        a = flow.step_mean(toy, a, k, s, correct=correct) + toy.sigma * rng.standard_normal((n, 1))
    return a[:, 0]


def marginal_check(n: int = 100_000, K: int = 256, sigma: float = 0.01, seed: int = 0) -> CheckResult:
    """Corrected sampler matches N(mu, var) within 3 SE; uncorrected variance is > 5 SE too large."""
    t0 = time.perf_counter()
    toy = flow.GaussianToyFlow(K=K, sigma=sigma)
    detail, ok = {}, True
    for correct in (True, False):
        x = toy_terminal(toy, n, stream(seed, "marginal", int(correct)), correct)
        m, v = float(x.mean()), float(x.var(ddof=1))
        z_mean = (m - toy.mu) / np.sqrt(toy.var / n)
        z_var = (v - toy.var) / (toy.var * np.sqrt(2.0 / (n - 1)))
        tag = "corrected" if correct else "uncorrected"
        detail.update({f"{tag}_mean": m, f"{tag}_var": v, f"{tag}_z_mean": float(z_mean),
                       f"{tag}_z_var": float(z_var)})
        ok &= (abs(z_mean) < 3 and abs(z_var) < 3) if correct else z_var > 5
    return CheckResult("marginal-check", bool(ok), detail, time.perf_counter() - t0)


# -- chi-squared identity -------------------------------------------------------


def _constant_flow(shift: float, sigma: float):
    """K=1 flow whose step mean is ``a_1 + shift`` regardless of input."""
    pol = flow.make_flow_policy(1, 1, np.random.default_rng(0), hidden=(2,), denoiser_hidden=(2,), K=1,
                                sigma=sigma, correct=False)
    for k, v in pol.velocity_parameters().items():
        v[...] = 0.0
    pol.velocity_parameters()[f"velocity.b{pol.velocity_net.n_layers - 1}"][...] = shift
    return pol


def chi2_check(n: int = 1_000_000, shift: float = 0.01, sigma: float = 0.01, seed: int = 0) -> CheckResult:
    """``E_theta[omega(theta || ref)] = 1 + chi2 = exp(shift^2 / sigma^2)`` within 3 SE."""
    t0 = time.perf_counter()
    pol, ref = _constant_flow(shift, sigma), _constant_flow(0.0, sigma)
    s = np.zeros((n, 1))
    traj = flow.sample_sde(pol, s, stream(seed, "chi2"), a_K=np.zeros((n, 1)))
    w = flow.chain_ratio(pol, ref, traj)
    est, se = float(w.mean()), float(w.std(ddof=1) / np.sqrt(n))
    expect = float(np.exp(shift**2 / sigma**2))
    z = (est - expect) / se
    return CheckResult("chi2-check", bool(abs(z) < 3), {"estimate": est, "expected": expect, "se": se, "z": z},
                       time.perf_counter() - t0)


# -- TD fixed point -------------------------------------------------------------


def td_chain_values(gamma: float, rewards=(-1.0, -1.0, -1.0)) -> np.ndarray:
    """Exact Q of the deterministic chain s0 -> s1 -> s2 -> terminal."""
    q = np.zeros(len(rewards))
    nxt = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        q[i] = rewards[i] + gamma * nxt
        nxt = q[i]
    return q


def td_check(gamma: float = 0.9, max_updates: int = 20_000, tol: float = 1e-3, M: int = 4, seed: int = 0,
             tau: float = 0.05) -> CheckResult:
    """Ensemble-mean Q on a 3-state chain converges to the analytic values."""
    t0 = time.perf_counter()
    rewards = np.array([-1.0, -1.0, -1.0])
    s = np.eye(3)
    s_next = np.vstack([s[1:], np.zeros((1, 3))])
    a = np.zeros((3, 1))
    done = np.array([False, False, True])
    batch = TdBatch(s, a, rewards[:, None], s_next, done, a[None])
    critic = make_critic(4, M, stream(seed, "td-init"), hidden=(32,))
    optim = Adam(critic.parameters(), 3e-3, schedule="cosine", warmup_steps=0, decay_steps=max_updates,
                 end_value=0.0)
    truth = td_chain_values(gamma, rewards)
    rng = stream(seed, "td")
    err, n = np.inf, 0
    while n < max_updates:
        y = td_targets(critic, batch, gamma, 1, rng)
        td_update(critic, batch, y, optim)
        for k, v in critic.target.params.items():
            v[...] = (1.0 - tau) * v + tau * critic.online.params[k]
        n += 1
        if n % 100 == 0:
            err = float(np.max(np.abs(q_eval(critic, s, a).mean(axis=0) - truth)))
            if err < tol:
                break
    q = q_eval(critic, s, a).mean(axis=0)
    return CheckResult("td-check", bool(err < tol), {"updates": n, "max_abs_err": err,
                                                     "q": [round(float(x), 5) for x in q],
                                                     "truth": [float(x) for x in truth]},
                       time.perf_counter() - t0)


# -- PPO and advantage arithmetic ---------------------------------------------------


def _group_of(q) -> ex.GroupSample:
    q = np.asarray(q, dtype=np.float64)
    N, G, _ = q.shape
    traj = flow.DenoisingTrajectory(np.zeros((N * G, 1)), np.zeros((2, N * G, 1)), np.zeros((1, N * G)),
                                    np.zeros((1, N * G, 1)), 1.0, False)
    agg = q.mean(axis=2)
    return ex.GroupSample(np.zeros((N, 1)), traj, q, agg, agg.mean(axis=1))


def arithmetic_check(seed: int = 0) -> CheckResult:
    """Exact hand-computed cases for clipping, advantages and the ASPO penalty."""
    t0 = time.perf_counter()
    rng = stream(seed, "arith")
    cases = {}
    # clipped surrogate, eps = 0.25 keeps every value a dyadic rational
    w, A = np.array([1.5, 0.5, 0.5, 1.5, 1.0]), np.array([2.0, 2.0, -2.0, -2.0, 4.0])
    cases["clip"] = np.array_equal(ex.clipped_terms(w, A, 0.25), [2.5, 1.0, -1.5, -3.0, 4.0])
    # group advantages are zero-sum per state (integer values keep every mean exact)
    q = rng.integers(-64, 64, (5, 8, 1)).astype(np.float64)
    cases["zero_sum"] = bool(np.all(ex.mean_baseline_adv(_group_of(q)).adv.sum(axis=1) == 0.0))
    # sign consensus: least-magnitude member advantage, else zero
    cq = np.array([[[3.0, 5.0, 4.0], [1.0, 1.0, 2.0]], [[3.0, 0.0, 4.0], [1.0, 1.0, 2.0]]])
    cases["conservative"] = np.array_equal(ex.conservative_adv(_group_of(cq)).adv, [[1.0, -1.0], [0.0, 0.0]])
    # std normalisation never changes the best action in a group
    g = _group_of(rng.normal(size=(20, 8, 3)))
    cases["grpo_argmax"] = np.array_equal(ex.grpo_std_adv(g).adv.argmax(1), ex.mean_baseline_adv(g).adv.argmax(1))
    # ASPO: dead zone inside [1 - eps, 1 + eps], quadratic penalty outside, clipped surrogate for A >= 0
    r, A = np.array([1.125, 1.5, 0.5, 1.5]), np.array([-2.0, -2.0, -2.0, 2.0])
    cases["aspo"] = np.array_equal(ex.aspo_terms(r, A, 0.25), [-2.25, -3.125, -1.125, 2.5])
    ok = all(cases.values())
    return CheckResult("ppo-arithmetic", ok, {k: bool(v) for k, v in cases.items()}, time.perf_counter() - t0)
