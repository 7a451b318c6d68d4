"""Comparison algorithms: DPPO-lite, QC+, DSRL-lite, EXPO-lite and the BPTT ablation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import flow
from .critic import CriticEnsemble, TdBatch, make_critic, q_eval, td_targets, td_update
from .flow import DenoisingTrajectory, FlowPolicy
from .numeric import Adam, Mlp, Tape, ad, grad_norm, init_mlp, mlp_forward

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = float(np.log(2 * np.pi))


def param_checksum(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()


class FrozenBaseError(RuntimeError):
    pass


def _check_frozen(base: FlowPolicy, checksum: str) -> None:
    if param_checksum(base.parameters()) != checksum:
        raise FrozenBaseError("base policy parameters changed")


def _step(optim: Adam, tape: Tape, loss, params=None) -> float:
    grads = tape.backward(loss)
    if params is not None:
        grads = {k: grads[k] for k in params}
    gn = grad_norm(grads)
    if not np.isfinite(gn):
        raise ad.NonFiniteError("non-finite gradient")
    optim.step(grads)
    return gn


# -- QC+ ------------------------------------------------------------------------


def qc_update(policy: FlowPolicy, succ, replay, N: int, success_only: bool, optim: Adam, rng,
              batch_size: int = 256) -> dict:
    """Behaviour cloning on success-buffer pairs (or on all replay pairs)."""
    if N < 1:
        raise ValueError("Best-of-N needs N >= 1")
    if success_only:
        s, a = succ.sample(batch_size, rng)
    else:
        b = replay.get(replay.sample_indices(batch_size, rng))
        s, a = b.s, b.a
    if len(s) == 0:
        return {"bc_loss": None, "grad_norm": 0.0}
    tape = Tape()
    loss = flow.flow_matching_loss(policy, s, a, rng, tape)
    gn = _step(optim, tape, loss, policy.velocity_parameters())
    return {"bc_loss": float(loss.value), "grad_norm": gn}


# -- DPPO-lite ------------------------------------------------------------------


@dataclass
class OnPolicyBatch:
    traj: DenoisingTrajectory  # chains from the behaviour policy, flattened over (episode, chunk)
    returns: np.ndarray  # discounted return-to-go per chunk
    version: int  # policy version that collected the data


def denoise_weights(K: int, gamma_denoise: float) -> np.ndarray:
    """Weight per chain step in sampling order (k = K, ..., 1): ``gamma_denoise ** (k - 1)``.

    Early, noisier steps get the smallest weight.
    """
    return gamma_denoise ** (np.arange(K, 0, -1) - 1.0)


def returns_to_go(rewards: np.ndarray, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    """Chunk-level discounted returns for one episode; ``rewards`` is (T, h)."""
    T, h = rewards.shape
    chunk = rewards @ (gamma ** np.arange(h))
    out = np.empty(T)
    acc = bootstrap
    for t in range(T - 1, -1, -1):
        acc = chunk[t] + gamma**h * acc
        out[t] = acc
    return out


def dppo_step_log_probs(policy: FlowPolicy, traj: DenoisingTrajectory, tape: Tape | None = None):
    """Per-step log-densities, shape (K, B)."""
    flow._check_compatible(policy, traj)
    K, B, d = traj.K, len(traj), traj.chain.shape[2]
    lp = flow._gauss_logpdf(traj.chain[1:].reshape(K * B, d), flow._stacked_means(policy, traj, tape), policy.sigma)
    return ad.reshape(lp, (K, B))


def dppo_policy_loss(policy: FlowPolicy, traj: DenoisingTrajectory, adv: np.ndarray, eps: float,
                     gamma_denoise: float, tape: Tape | None = None):
    """Clipped surrogate with one ratio per denoising step, weighted across the chain."""
    if eps <= 0:
        raise ValueError("clip epsilon must be positive")
    ratio = ad.exp(dppo_step_log_probs(policy, traj, tape) - traj.logp)
    w = denoise_weights(traj.K, gamma_denoise)[:, None]
    A = np.broadcast_to(adv[None, :], ratio.shape)
    terms = ad.minimum(ratio * A, ad.clip(ratio, 1.0 - eps, 1.0 + eps) * A)
    return -ad.mean(terms * w)


def value_loss(value_net: Mlp, s, returns, tape: Tape | None = None):
    v = ad.reshape(mlp_forward(value_net, s, tape), (len(returns),))
    err = v - returns
    return ad.mean(err * err)


def dppo_update(policy: FlowPolicy, batch: OnPolicyBatch, value_net: Mlp, gamma_denoise: float, eps: float,
                optim: Adam, value_optim: Adam, current_version: int, epochs: int = 1) -> dict:
    """PPO over every denoising step of freshly collected chains; advantages are MC returns minus V(s)."""
    if batch.version != current_version:
        raise ValueError("DPPO needs on-policy data; batch came from another policy version")
    s = batch.traj.s
    v = mlp_forward(value_net, s).reshape(-1)
    adv = batch.returns - v
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    gn_max, loss = 0.0, None
    for _ in range(epochs):
        tape = Tape()
        loss = dppo_policy_loss(policy, batch.traj, adv, eps, gamma_denoise, tape)
        gn_max = max(gn_max, _step(optim, tape, loss, policy.velocity_parameters()))
        vt = Tape()
        _step(value_optim, vt, value_loss(value_net, s, batch.returns, vt))
    return {"pi_loss": float(loss.value), "grad_norm": gn_max, "adv_std": float(np.std(batch.returns - v))}


# -- DSRL-lite ------------------------------------------------------------------


@dataclass
class LatentPolicy:
    head: Mlp  # s -> (mean, log-std) over the initial noise
    critic: CriticEnsemble  # over (s, w)
    d: int

    def parameters(self):
        return self.head.params


def make_latent_policy(obs_dim: int, d: int, rng, hidden=(64, 64), M: int = 10, critic_hidden=(64, 64),
                       agg: str = "mean") -> LatentPolicy:
    head = init_mlp("latent", (obs_dim, *hidden, 2 * d), rng)
    # start at the base prior: mean 0, log-std 0
    head.params[f"latent.W{head.n_layers - 1}"][...] = 0.0
    critic = make_critic(obs_dim + d, M, rng, critic_hidden, agg, name="latent_q")
    return LatentPolicy(head, critic, d)


def gaussian_head(net: Mlp, x, d: int, tape: Tape | None = None):
    out = mlp_forward(net, x, tape)
    mean = out[:, :d]
    log_std = ad.clip(out[:, d:], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def _gauss_sample(mean, log_std, eps):
    x = mean + ad.exp(log_std) * eps
    logp = ad.sum_(eps * eps * -0.5 - log_std, axis=-1) - 0.5 * np.shape(eps)[-1] * _LOG_2PI
    return x, logp


def latent_sample(lat: LatentPolicy, s, rng, tape: Tape | None = None, eps=None):
    s = np.atleast_2d(s)
    mean, log_std = gaussian_head(lat.head, s, lat.d, tape)
    eps = rng.standard_normal((s.shape[0], lat.d)) if eps is None else eps
    return _gauss_sample(mean, log_std, eps)


def dsrl_act(lat: LatentPolicy, base: FlowPolicy, s, rng):
    """Latent noise from the steering policy, decoded by the frozen base ODE."""
    w, _ = latent_sample(lat, s, rng)
    return w, flow.sample_ode(base, s, a_K=w)


def dsrl_actor_loss(lat: LatentPolicy, s, rng, entropy_coef: float, tape: Tape | None = None, eps=None):
    w, logp = latent_sample(lat, s, rng, tape, eps)
    q = q_eval(lat.critic, s, w)
    return -ad.mean(q) + entropy_coef * ad.mean(logp)


def dsrl_update(lat: LatentPolicy, base: FlowPolicy, base_checksum: str, batch: TdBatch, gamma: float, h: int,
                critic_optim: Adam, actor_optim: Adam, rng, entropy_coef: float = 1e-3, update_actor=True) -> dict:
    """Chunked TD on the latent critic, then reparameterised ascent on the latent policy."""
    _check_frozen(base, base_checksum)
    live = ~np.asarray(batch.done, dtype=bool)
    boot, _ = latent_sample(lat, batch.s_next, rng)
    y = td_targets(lat.critic, TdBatch(batch.s, batch.a, batch.rewards, batch.s_next, batch.done, boot[None]),
                   gamma, h, rng)
    q_loss = td_update(lat.critic, batch, y, critic_optim)
    out = {"q_loss": q_loss, "q_mean": float(np.mean(y)), "live_frac": float(live.mean())}
    if update_actor:
        tape = Tape()
        loss = dsrl_actor_loss(lat, batch.s, rng, entropy_coef, tape)
        out["grad_norm"] = _step(actor_optim, tape, loss, lat.parameters())
        out["pi_loss"] = float(loss.value)
    _check_frozen(base, base_checksum)
    return out


# -- EXPO-lite ------------------------------------------------------------------


@dataclass
class EditPolicy:
    head: Mlp  # (s, a) -> (mean, log-std) over pre-squash edits
    d: int
    scale: float = 0.5
    entropy_coef: float = 1e-3

    def parameters(self):
        return self.head.params


def make_edit_policy(obs_dim: int, d: int, rng, hidden=(64, 64), scale=0.5, entropy_coef=1e-3) -> EditPolicy:
    head = init_mlp("edit", (obs_dim + d, *hidden, 2 * d), rng)
    head.params[f"edit.W{head.n_layers - 1}"][...] = 0.0
    head.params[f"edit.b{head.n_layers - 1}"][d:] = -1.0
    return EditPolicy(head, d, scale, entropy_coef)


def edit_sample(edit: EditPolicy, s, a, rng, tape: Tape | None = None, eps=None):
    """``delta = scale * tanh(u)``, ``u ~ N(mean, std^2)``; log-prob includes the squash Jacobian."""
    x = ad.concat([np.atleast_2d(s), a], axis=-1)
    mean, log_std = gaussian_head(edit.head, x, edit.d, tape)
    n = np.shape(ad.value(mean))[0]
    eps = rng.standard_normal((n, edit.d)) if eps is None else eps
    u, logp = _gauss_sample(mean, log_std, eps)
    t = ad.tanh(u)
    logp = logp - ad.sum_(ad.log(edit.scale * (1.0 - t * t) + 1e-6), axis=-1)
    return t * edit.scale, logp


def otf_select(critic: CriticEnsemble, s, a, a_edit):
    """On-the-fly choice between base and edited actions by mean target value; ties keep the base."""
    q_base = q_eval(critic, s, a, use_targets=True).mean(axis=0)
    q_edit = q_eval(critic, s, a_edit, use_targets=True).mean(axis=0)
    take = q_edit > q_base
    return np.where(take[:, None], a_edit, a), take


def expo_act(edit: EditPolicy, base: FlowPolicy, critic: CriticEnsemble, s, rng):
    s = np.atleast_2d(s)
    a = flow.sample_sde(base, s, rng).action
    delta, _ = edit_sample(edit, s, a, rng)
    return otf_select(critic, s, a, a + delta)


def expo_actor_loss(edit: EditPolicy, critic: CriticEnsemble, s, a, rng, tape: Tape | None = None, eps=None):
    delta, logp = edit_sample(edit, s, a, rng, tape, eps)
    q = q_eval(critic, s, a + delta)
    return -ad.mean(q) + edit.entropy_coef * ad.mean(logp)


def expo_update(edit: EditPolicy, base: FlowPolicy, base_checksum: str, critic: CriticEnsemble, batch: TdBatch,
                gamma: float, h: int, critic_optim: Adam, actor_optim: Adam, rng, update_actor=True) -> dict:
    """TD with OTF bootstrap actions, then entropy-regularised ascent on the edit policy."""
    _check_frozen(base, base_checksum)
    boot, _ = expo_act(edit, base, critic, batch.s_next, rng)
    y = td_targets(critic, TdBatch(batch.s, batch.a, batch.rewards, batch.s_next, batch.done, boot[None]),
                   gamma, h, rng)
    out = {"q_loss": td_update(critic, batch, y, critic_optim), "q_mean": float(np.mean(y))}
    if update_actor:
        a = flow.sample_sde(base, batch.s, rng).action
        tape = Tape()
        loss = expo_actor_loss(edit, critic, batch.s, a, rng, tape)
        out["grad_norm"] = _step(actor_optim, tape, loss, edit.parameters())
        out["pi_loss"] = float(loss.value)
    _check_frozen(base, base_checksum)
    return out


# -- BPTT ablation --------------------------------------------------------------


def reparam_chain(policy: FlowPolicy, s, a_K, noise, tape: Tape | None = None):
    """Final action of the noise-injected chain as a differentiable function of the velocity net."""
    a = a_K
    for i, k in enumerate(range(policy.K, 0, -1)):
        a = flow.step_mean(policy, a, k, s, tape) + policy.sigma * noise[i]
    return a


def bptt_loss(policy: FlowPolicy, critic: CriticEnsemble, s, rng, tape: Tape | None = None, a_K=None, noise=None):
    """``-mean_m Q_targ,m(s, a_0(theta))`` differentiated through every chain step."""
    if policy.sigma <= 0:
        raise ValueError("BPTT chain needs sigma > 0")
    s = np.atleast_2d(s)
    B, d = s.shape[0], policy.act_dim
    a_K = rng.standard_normal((B, d)) if a_K is None else a_K
    noise = rng.standard_normal((policy.K, B, d)) if noise is None else noise
    a0 = reparam_chain(policy, s, a_K, noise, tape)
    return -ad.mean(q_eval(critic, s, a0, use_targets=True))


def bptt_update(policy: FlowPolicy, critic: CriticEnsemble, s, optim: Adam, rng) -> dict:
    tape = Tape()
    loss = bptt_loss(policy, critic, s, rng, tape)
    gn = _step(optim, tape, loss, policy.velocity_parameters())
    return {"pi_loss": float(loss.value), "grad_norm": gn}
