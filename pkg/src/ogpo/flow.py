"""Flow-matching control policy with noise-injected, likelihood-bearing sampling.

Denoising runs k = K, ..., 1 from ``a_K ~ N(0, I)`` to the executed chunk ``a_0``.
Step k is conditioned on flow time ``(K - k + 1/2) / K`` (the midpoint of the
step), and the stochastic step is

    a_{k-1} ~ N(a_k + dt * v(a_k) - (sigma / 2) * zhat(a_k), sigma^2 I),  dt = 1/K

where ``zhat`` predicts the Gaussian noise of a sigma-perturbed interpolant.
Since ``zhat ~= -sigma * score``, the drift term equals ``(sigma^2 / 2) * score``,
which cancels the variance the injected noise would otherwise add.
"""

from __future__ import annotations

import copy
import functools
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .numeric import Mlp, Tape, ad, init_mlp, mlp_forward

LOG_2PI = math.log(2.0 * math.pi)


def time_embedding(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    return np.concatenate([tau, np.sin(2 * np.pi * tau), np.cos(2 * np.pi * tau)], axis=1)


TIME_FEATURES = 3


@functools.lru_cache(maxsize=512)
def _constant_embedding(tau: float, n: int) -> np.ndarray:
    out = time_embedding(np.full(n, tau))
    out.setflags(write=False)
    return out


def step_time(k: int, K: int) -> float:
    return (K - k + 0.5) / K


@dataclass
class FlowPolicy:
    velocity_net: Mlp
    denoiser_net: Mlp
    obs_dim: int
    act_dim: int
    K: int = 10
    sigma: float = 0.01
    correct: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        want = self.act_dim + self.obs_dim + TIME_FEATURES
        for net in (self.velocity_net, self.denoiser_net):
            if net.in_dim != want or net.out_dim != self.act_dim:
                raise ValueError(f"{net.name}: widths {net.widths} do not fit ({want} -> {self.act_dim})")

    def _inputs(self, a, tau, s):
        n = np.shape(ad.value(a))[0]
        if np.ndim(tau) == 0:
            emb = _constant_embedding(float(tau), n)
        else:
            emb = time_embedding(np.broadcast_to(np.asarray(tau, dtype=np.float64).reshape(-1), (n,)))
        return ad.concat([a, np.asarray(s, dtype=np.float64), emb], axis=-1)

    def velocity(self, a, tau, s, tape: Tape | None = None):
        return mlp_forward(self.velocity_net, self._inputs(a, tau, s), tape)

    def noise_pred(self, a, tau, s, tape: Tape | None = None):
        return mlp_forward(self.denoiser_net, self._inputs(a, tau, s), tape)

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.velocity_net.params, **self.denoiser_net.params}

    def velocity_parameters(self) -> dict[str, np.ndarray]:
        return self.velocity_net.params

    def copy(self) -> "FlowPolicy":
        return copy.deepcopy(self)

    def denoiser_fingerprint(self) -> str:
        h = hashlib.sha1()
        for k in sorted(self.denoiser_net.params):
            h.update(self.denoiser_net.params[k].tobytes())
        return h.hexdigest()


def make_flow_policy(
    obs_dim: int,
    act_dim: int,
    rng: np.random.Generator,
    hidden=(128, 128),
    denoiser_hidden=(64, 64),
    K: int = 10,
    sigma: float = 0.01,
    correct: bool = True,
    activation: str = "tanh",
) -> FlowPolicy:
    d_in = act_dim + obs_dim + TIME_FEATURES
    vel = init_mlp("velocity", (d_in, *hidden, act_dim), rng, activation)
    den = init_mlp("denoiser", (d_in, *denoiser_hidden, act_dim), rng, activation)
    return FlowPolicy(vel, den, obs_dim, act_dim, K, sigma, correct)


@dataclass
class DenoisingTrajectory:
    """A batch of sampled chains. ``chain[i]`` is ``a_{K-i}``; ``chain[-1]`` is executed."""

    s: np.ndarray  # (B, obs)
    chain: np.ndarray  # (K+1, B, d)
    logp: np.ndarray  # (K, B) per-step log-density under the sampler
    noise: np.ndarray  # (K, B, d) standard-normal draws
    sigma: float
    corrected: bool
    zhat: np.ndarray | None = None  # (K, B, d) frozen denoiser output at each departure point
    zhat_source: str = ""  # fingerprint of the denoiser that produced ``zhat``

    @property
    def action(self) -> np.ndarray:
        return self.chain[-1]

    @property
    def K(self) -> int:
        return self.chain.shape[0] - 1

    def __len__(self):
        return self.chain.shape[1]

    def take(self, idx) -> "DenoisingTrajectory":
        return DenoisingTrajectory(
            self.s[idx], self.chain[:, idx], self.logp[:, idx], self.noise[:, idx], self.sigma, self.corrected,
            None if self.zhat is None else self.zhat[:, idx], self.zhat_source,
        )


def step_mean(policy, a_k, k: int, s, tape: Tape | None = None, correct: bool | None = None, tau=None,
              zhat=None):
    """Mean of the Gaussian step departing ``a_k`` (k in 1..K).

    ``zhat`` may carry a precomputed denoiser output; the denoiser is never differentiated.
    """
    correct = policy.correct if correct is None else correct
    if tau is None:
        tau = step_time(k, policy.K)
    mean = a_k + policy.velocity(a_k, tau, s, tape) * (1.0 / policy.K)
    if correct:
        if zhat is None:
            zhat = policy.noise_pred(a_k, tau, s)
        mean = mean - zhat * (0.5 * policy.sigma)
    return mean


def _gauss_logpdf(x, mean, sigma: float):
    d = np.shape(ad.value(x))[-1]
    r = (x - mean) * (1.0 / sigma)
    return ad.sum_(r * r, axis=-1) * -0.5 - 0.5 * d * (LOG_2PI + 2.0 * math.log(sigma))


def sample_ode(policy, s, rng: np.random.Generator | None = None, a_K=None) -> np.ndarray:
    """Deterministic Euler integration from ``a_K`` (drawn if not supplied)."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = rng.standard_normal((s.shape[0], policy.act_dim)) if a_K is None else np.array(a_K, dtype=np.float64)
    dt = 1.0 / policy.K
    for k in range(policy.K, 0, -1):
        a = a + dt * policy.velocity(a, step_time(k, policy.K), s)
        if not np.all(np.isfinite(a)):
            raise ad.NonFiniteError(f"non-finite action at denoising step {k}")
    return a


def sample_sde(policy, s, rng: np.random.Generator, correct: bool | None = None, a_K=None) -> DenoisingTrajectory:
    if policy.sigma <= 0:
        raise ValueError("SDE sampling needs sigma > 0")
    correct = policy.correct if correct is None else correct
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    B, d, K = s.shape[0], policy.act_dim, policy.K
    chain = np.empty((K + 1, B, d))
    noise = rng.standard_normal((K, B, d))
    logp = np.empty((K, B))
    zhat = np.empty((K, B, d)) if correct else None
    chain[0] = rng.standard_normal((B, d)) if a_K is None else a_K
    for i, k in enumerate(range(K, 0, -1)):
        # both networks read the same input features
        x = policy._inputs(chain[i], step_time(k, K), s)
        mean = chain[i] + mlp_forward(policy.velocity_net, x) * (1.0 / K)
        if correct:
            zhat[i] = mlp_forward(policy.denoiser_net, x)
            mean = mean - zhat[i] * (0.5 * policy.sigma)
        chain[i + 1] = mean + policy.sigma * noise[i]
        logp[i] = _gauss_logpdf(chain[i + 1], mean, policy.sigma)
    if not np.all(np.isfinite(chain)):
        raise ad.NonFiniteError("non-finite denoising chain")
    source = policy.denoiser_fingerprint() if correct else ""
    return DenoisingTrajectory(s, chain, logp, noise, policy.sigma, correct, zhat, source)


def step_log_prob(policy, a_next, a_k, k: int, s, tape: Tape | None = None, correct: bool | None = None):
    if policy.sigma <= 0:
        raise ValueError("log-densities need sigma > 0")
    return _gauss_logpdf(a_next, step_mean(policy, a_k, k, s, tape, correct), policy.sigma)


def _stacked_means(policy, traj: DenoisingTrajectory, tape: Tape | None):
    K, B, d = traj.K, traj.chain.shape[1], traj.chain.shape[2]
    a_in = traj.chain[:-1].reshape(K * B, d)
    s = np.tile(traj.s, (K, 1))
    tau = np.repeat([step_time(k, K) for k in range(K, 0, -1)], B)
    zhat = None
    if traj.corrected and traj.zhat is not None and traj.zhat_source == policy.denoiser_fingerprint():
        zhat = traj.zhat.reshape(K * B, d)
    return step_mean(policy, a_in, 0, s, tape, traj.corrected, tau=tau, zhat=zhat)


def _check_compatible(policy, traj: DenoisingTrajectory):
    if policy.K != traj.K or policy.sigma != traj.sigma:
        raise ValueError(f"trajectory (K={traj.K}, sigma={traj.sigma}) incompatible with policy "
                         f"(K={policy.K}, sigma={policy.sigma})")
    if policy.sigma <= 0:
        raise ValueError("log-densities need sigma > 0")


def chain_log_prob(policy, traj: DenoisingTrajectory, tape: Tape | None = None):
    """Per-trajectory ``sum_k log pi(a_{k-1} | a_k, s)``, shape (B,)."""
    _check_compatible(policy, traj)
    K, B, d = traj.chain.shape
    K -= 1
    lp = _gauss_logpdf(traj.chain[1:].reshape(K * B, d), _stacked_means(policy, traj, tape), policy.sigma)
    return ad.sum_(ad.reshape(lp, (K, B)), axis=0)


def chain_log_ratio(policy, ref, traj: DenoisingTrajectory, tape: Tape | None = None):
    """``log omega`` per trajectory; gradient flows into ``policy`` only."""
    _check_compatible(policy, traj)
    _check_compatible(ref, traj)
    K, B, d = traj.chain.shape
    K -= 1
    x = traj.chain[1:].reshape(K * B, d)
    m = _stacked_means(policy, traj, tape)
    m_ref = _stacked_means(ref, traj, None)
    r = x - m
    r_ref = x - m_ref
    per_step = (ad.sum_(r * r, axis=-1) - np.sum(r_ref * r_ref, axis=-1)) * (-0.5 / policy.sigma**2)
    return ad.sum_(ad.reshape(per_step, (K, B)), axis=0)


def chain_ratio(policy, ref, traj: DenoisingTrajectory, tape: Tape | None = None):
    """Importance ratio of the whole denoising chain, shape (B,)."""
    return ad.exp(chain_log_ratio(policy, ref, traj, tape))


def _interpolant(a, rng, z=None, tau=None):
    n = a.shape[0]
    z = rng.standard_normal(a.shape) if z is None else z
    tau = rng.uniform(0.0, 1.0, size=n) if tau is None else tau
    return tau[:, None] * a + (1.0 - tau[:, None]) * z, z, tau


def flow_matching_loss(policy, s, a, rng=None, tape: Tape | None = None, per_sample=False, z=None, tau=None):
    """Mean of ``||v(a_tau, tau, s) - (a - z)||^2`` with ``a_tau = tau a + (1 - tau) z``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.shape[0] == 0:
        raise ValueError("empty batch")
    x, z, tau = _interpolant(a, rng, z, tau)
    err = policy.velocity(x, tau, s, tape) - (a - z)
    per = ad.sum_(err * err, axis=-1)
    return per if per_sample else ad.mean(per)


def denoiser_loss(policy, s, a, rng, tape: Tape | None = None):
    """Mean of ``||zhat(a_tau + sigma z', tau, s) - z'||^2``."""
    if policy.sigma <= 0:
        raise ValueError("denoiser training needs sigma > 0")
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.shape[0] == 0:
        raise ValueError("empty batch")
    x, _, tau = _interpolant(a, rng)
    zp = rng.standard_normal(a.shape)
    err = policy.noise_pred(x + policy.sigma * zp, tau, s, tape) - zp
    return ad.mean(ad.sum_(err * err, axis=-1))


@dataclass
class GaussianToyFlow:
    """1-D flow from N(0, 1) to N(mu, var) with exact velocity and noise prediction.

    The interpolant ``tau a + (1 - tau) z`` has marginal N(tau mu, tau^2 var + (1 - tau)^2).
    """

    mu: float = 1.0
    var: float = 0.25
    K: int = 256
    sigma: float = 0.01
    correct: bool = True
    obs_dim: int = 0
    act_dim: int = 1

    def marginal_var(self, tau):
        return tau**2 * self.var + (1.0 - tau) ** 2

    def velocity(self, a, tau, s=None, tape=None):
        tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
        gain = (tau * self.var - (1.0 - tau)) / self.marginal_var(tau)
        return self.mu + gain * (a - tau * self.mu)

    def score(self, a, tau):
        tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
        return -(a - tau * self.mu) / self.marginal_var(tau)

    def noise_pred(self, a, tau, s=None, tape=None):
        return -self.sigma * self.score(a, tau)

    def denoiser_fingerprint(self) -> str:
        return f"gaussian-toy:{self.mu}:{self.var}:{self.sigma}"
