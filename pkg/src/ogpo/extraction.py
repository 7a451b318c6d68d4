"""Policy-improvement objectives over groups of denoising chains.

A group holds ``G`` chains sampled from the EMA policy at each of ``N`` states,
stored state-major (row ``i * G + j``). Advantages are plain arrays and never
carry gradient; only chain ratios do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flow
from .critic import CriticEnsemble, aggregate_target, pessimism_mix, q_eval
from .flow import DenoisingTrajectory, FlowPolicy
from .numeric import Tape, ad

STRATEGIES = ("mean-baseline", "conservative", "grpo-std", "chi2")
AWR_MAX_WEIGHT = 20.0


@dataclass
class GroupSample:
    s: np.ndarray  # (N, obs)
    traj: DenoisingTrajectory  # N * G chains, state-major
    q: np.ndarray  # (N, G, M) target-critic values of the final actions
    agg_q: np.ndarray  # (N, G)
    v_hat: np.ndarray  # (N,)

    @property
    def N(self) -> int:
        return self.q.shape[0]

    @property
    def G(self) -> int:
        return self.q.shape[1]

    @property
    def M(self) -> int:
        return self.q.shape[2]

    def with_values(self, agg_q) -> "GroupSample":
        agg_q = np.asarray(agg_q, dtype=np.float64).reshape(self.N, self.G)
        return GroupSample(self.s, self.traj, self.q, agg_q, agg_q.mean(axis=1))


def sample_group(policy_ema: FlowPolicy, critic: CriticEnsemble, s, G: int, rng: np.random.Generator,
                 agg: str | None = None) -> GroupSample:
    """``G`` corrected-SDE chains per state, scored by the target critics."""
    if G < 2:
        raise ValueError("group size must be >= 2")
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    N = s.shape[0]
    s_rep = np.repeat(s, G, axis=0)
    traj = flow.sample_sde(policy_ema, s_rep, rng)
    q = q_eval(critic, s_rep, traj.action, use_targets=True)  # (M, N*G)
    agg_q = aggregate_target(q, agg or critic.agg, rng).reshape(N, G)
    return GroupSample(s, traj, q.T.reshape(N, G, -1), agg_q, agg_q.mean(axis=1))


@dataclass
class AdvantageBatch:
    adv: np.ndarray  # (N, G)
    strategy: str
    beta: np.ndarray | None = None  # (N, G), chi2 only
    penalty: object = None  # beta * omega(theta || slow), may be a Var

    def flat(self) -> np.ndarray:
        return self.adv.reshape(-1)

    def total(self):
        """Flat advantages with the drift penalty subtracted (differentiable if present)."""
        if self.penalty is None:
            return self.flat()
        return self.flat() - self.penalty


def mean_baseline_adv(group: GroupSample) -> AdvantageBatch:
    return AdvantageBatch(group.agg_q - group.v_hat[:, None], "mean-baseline")


def conservative_adv(group: GroupSample) -> AdvantageBatch:
    """Least-magnitude per-member advantage when all members agree in sign, else 0."""
    A = group.q - group.q.mean(axis=1, keepdims=True)  # (N, G, M)
    pos = (A > 0).all(axis=2)
    neg = (A < 0).all(axis=2)
    adv = np.where(pos, A.min(axis=2), np.where(neg, A.max(axis=2), 0.0))
    return AdvantageBatch(adv, "conservative")


def grpo_std_adv(group: GroupSample) -> AdvantageBatch:
    std = group.agg_q.std(axis=1)
    if np.any(std <= 0):
        raise ValueError("degenerate group: zero spread in critic values")
    base = mean_baseline_adv(group).adv
    return AdvantageBatch(base / std[:, None], "grpo-std")


def chi2_adv(group: GroupSample, policy: FlowPolicy, slow: FlowPolicy, beta_init: float,
             tape: Tape | None = None, base: AdvantageBatch | None = None) -> AdvantageBatch:
    """``A - beta * omega(theta || slow)`` with ``beta = beta_init * std_m Q_m``.

    ``beta`` is a constant; ``omega`` carries gradient so that the expected
    penalty differentiates to the chi-squared divergence.
    """
    base = base or mean_baseline_adv(group)
    beta = beta_init * group.q.std(axis=2)
    omega = flow.chain_ratio(policy, slow, group.traj, tape)
    return AdvantageBatch(base.adv, "chi2", beta, beta.reshape(-1) * omega)


def compute_advantages(group: GroupSample, strategy: str, policy=None, slow=None, beta_init: float = 1.0,
                       tape: Tape | None = None) -> AdvantageBatch:
    if strategy == "mean-baseline":
        return mean_baseline_adv(group)
    if strategy == "conservative":
        return conservative_adv(group)
    if strategy == "grpo-std":
        return grpo_std_adv(group)
    if strategy == "chi2":
        if slow is None:
            raise ValueError("chi2 advantages need the slow EMA policy")
        return chi2_adv(group, policy, slow, beta_init, tape)
    raise ValueError(f"unknown advantage strategy {strategy!r}")


def pessimistic_group(group: GroupSample, policy: FlowPolicy, ref: FlowPolicy, alpha: float) -> GroupSample:
    """Re-aggregate critic values with ``pessimism_mix`` driven by the detached chain ratio."""
    omega = flow.chain_ratio(policy, ref, group.traj)
    mixed = pessimism_mix(group.q.reshape(-1, group.M).T, omega, alpha)
    return group.with_values(mixed)


def clipped_terms(omega, adv, eps: float):
    """Per-trajectory ``min(omega A, clip(omega, 1 - eps, 1 + eps) A)``."""
    if eps <= 0:
        raise ValueError("clip epsilon must be positive")
    return ad.minimum(omega * adv, ad.clip(omega, 1.0 - eps, 1.0 + eps) * adv)


def ppo_loss(policy: FlowPolicy, ref: FlowPolicy, group: GroupSample, adv: AdvantageBatch, eps: float,
             no_negative: bool = False, tape: Tape | None = None):
    """Clipped surrogate over all ``N * G`` chains, negated for minimisation.

    Returns ``(loss, info)``.
    """
    if eps <= 0:
        raise ValueError("clip epsilon must be positive")
    omega = flow.chain_ratio(policy, ref, group.traj, tape)
    A = adv.total()
    terms = clipped_terms(omega, A, eps)
    if no_negative:
        terms = ad.where(np.asarray(ad.value(A)) >= 0, terms, np.zeros(len(group.traj)))
    loss = -ad.mean(terms)
    w = np.asarray(ad.value(omega))
    info = {"ratio_mean": float(w.mean()), "ratio_max": float(w.max()),
            "clip_frac": float(np.mean(np.abs(w - 1.0) > eps))}
    return loss, info


def bc_success_loss(policy: FlowPolicy, s, a, rng, tape: Tape | None = None):
    """Flow-matching loss on success-buffer pairs; exactly 0 when there are none."""
    if s is None or len(s) == 0:
        return 0.0
    return flow.flow_matching_loss(policy, s, a, rng, tape)


def total_loss(ppo, bc, bc_coeff: float):
    return ppo + bc_coeff * bc


def _awr_weights(adv: np.ndarray, beta_awr: float, positive_only: bool = False):
    if beta_awr <= 0:
        raise ValueError("beta_awr must be positive")
    w = np.minimum(np.exp(np.minimum(adv / beta_awr, np.log(AWR_MAX_WEIGHT))), AWR_MAX_WEIGHT)
    if positive_only:
        w = w * (adv > 0)
    return w


def awr_loss(policy: FlowPolicy, group: GroupSample, adv: AdvantageBatch, beta_awr: float, rng,
             tape: Tape | None = None):
    """Advantage-weighted flow matching toward the sampled final actions."""
    w = _awr_weights(adv.flat(), beta_awr)
    s_rep = np.repeat(group.s, group.G, axis=0)
    per = flow.flow_matching_loss(policy, s_rep, group.traj.action, rng, tape, per_sample=True)
    return ad.mean(per * w)


def aw_ogpo_loss(policy: FlowPolicy, ref: FlowPolicy, group: GroupSample, adv: AdvantageBatch,
                 beta_awr: float, positive_only: bool = False, tape: Tape | None = None):
    """``-mean(omega * w)`` with constant weights ``w = exp(A / beta)`` and no ratio clipping."""
    w = _awr_weights(adv.flat(), beta_awr, positive_only)
    omega = flow.chain_ratio(policy, ref, group.traj, tape)
    return -ad.mean(omega * w)


def fpo_aspo_loss(policy: FlowPolicy, ref: FlowPolicy, group: GroupSample, adv: AdvantageBatch, eps: float,
                  rng, tape: Tape | None = None):
    """Flow-matching surrogate ratio with PPO clipping for ``A >= 0`` and a dead-zone penalty for ``A < 0``."""
    if eps <= 0:
        raise ValueError("clip epsilon must be positive")
    a = group.traj.action
    s_rep = np.repeat(group.s, group.G, axis=0)
    z = rng.standard_normal(a.shape)
    tau = rng.uniform(0.0, 1.0, size=a.shape[0])
    l_theta = flow.flow_matching_loss(policy, s_rep, a, tape=tape, per_sample=True, z=z, tau=tau)
    l_ref = flow.flow_matching_loss(ref, s_rep, a, per_sample=True, z=z, tau=tau)
    r = ad.exp(l_ref - l_theta)
    return -ad.mean(aspo_terms(r, adv.flat(), eps))


def aspo_terms(r, A: np.ndarray, eps: float):
    pos = clipped_terms(r, A, eps)
    dev = r - 1.0
    excess = ad.maximum(ad.maximum(dev, -dev) - eps, 0.0)
    neg = r * A - (np.abs(A) / (4.0 * eps)) * excess * excess
    return ad.where(A >= 0, pos, neg)
