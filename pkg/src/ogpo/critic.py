"""Ensemble Q-functions over (state, action-chunk) with chunked TD targets."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .numeric import Adam, Mlp, Tape, ad, init_mlp, mlp_forward

AGGREGATIONS = ("mean", "min", "subsample")


@dataclass
class CriticEnsemble:
    online: Mlp
    target: Mlp
    agg: str = "mean"

    def __post_init__(self):
        if self.agg not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.agg!r}")
        if self.online.widths != self.target.widths or self.online.ensemble != self.target.ensemble:
            raise ValueError("online and target architectures differ")

    @property
    def M(self) -> int:
        return self.online.ensemble

    @property
    def in_dim(self) -> int:
        return self.online.in_dim

    def parameters(self) -> dict[str, np.ndarray]:
        return self.online.params

    def copy(self) -> "CriticEnsemble":
        return copy.deepcopy(self)


def make_critic(in_dim: int, M: int, rng: np.random.Generator, hidden=(128, 128), agg="mean",
                activation="tanh", name="critic") -> CriticEnsemble:
    if M < 1:
        raise ValueError("ensemble size must be >= 1")
    online = init_mlp(name, (in_dim, *hidden, 1), rng, activation, ensemble=M)
    return CriticEnsemble(online, online.copy(), agg)


def q_eval(ens: CriticEnsemble, s, a, use_targets: bool = False, tape: Tape | None = None):
    """Per-member values, shape (M, B)."""
    net = ens.target if use_targets else ens.online
    x = ad.concat([np.asarray(s, dtype=np.float64), a], axis=-1)
    out = mlp_forward(net, x, tape if not use_targets else None)
    return ad.reshape(out, np.shape(ad.value(out))[:-1])


def _distinct_pairs(M: int, n: int, rng: np.random.Generator):
    i1 = rng.integers(0, M, size=n)
    i2 = (i1 + rng.integers(1, M, size=n)) % M
    return i1, i2


def aggregate_target(values, flag: str, rng: np.random.Generator | None = None, pair=None):
    """Reduce member axis 0 by mean, min, or min over a random distinct pair per column."""
    values = np.asarray(values, dtype=np.float64)
    if flag == "mean":
        return values.mean(axis=0)
    if flag == "min":
        return values.min(axis=0)
    if flag == "subsample":
        M = values.shape[0]
        if M < 2:
            raise ValueError("subsample aggregation needs at least 2 members")
        flat = values.reshape(M, -1)
        i1, i2 = pair if pair is not None else _distinct_pairs(M, flat.shape[1], rng)
        cols = np.arange(flat.shape[1])
        return np.minimum(flat[i1, cols], flat[i2, cols]).reshape(values.shape[1:])
    raise ValueError(f"unknown aggregation {flag!r}")


@dataclass
class TdBatch:
    s: np.ndarray  # (B, obs)
    a: np.ndarray  # (B, d)
    rewards: np.ndarray  # (B, h) per primitive step
    s_next: np.ndarray  # (B, obs)
    done: np.ndarray  # (B,) true termination only; timeouts bootstrap
    boot_actions: np.ndarray | None = None  # (N_vr, B, d_boot)

    def __len__(self):
        return self.s.shape[0]


def chunk_return(rewards, gamma: float) -> np.ndarray:
    h = rewards.shape[-1]
    return rewards @ (gamma ** np.arange(h))


def td_targets(ens: CriticEnsemble, batch: TdBatch, gamma: float, h: int, rng=None, agg: str | None = None):
    """``sum_j gamma^j r_{t+j+1} + (1 - done) gamma^h mean_i agg Q_targ(s', a'_i)``."""
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    if rewards.shape[-1] != h:
        raise ValueError(f"expected {h} rewards per chunk, got {rewards.shape[-1]}")
    y = chunk_return(rewards, gamma)
    live = ~np.asarray(batch.done, dtype=bool)
    if not live.any():
        return y
    if batch.boot_actions is None:
        raise ValueError("bootstrap actions missing for non-terminal transitions")
    boot = np.asarray(batch.boot_actions, dtype=np.float64)
    n_vr, B = boot.shape[0], boot.shape[1]
    s_rep = np.tile(batch.s_next, (n_vr, 1))
    q = q_eval(ens, s_rep, boot.reshape(n_vr * B, -1), use_targets=True)
    q_next = aggregate_target(q, agg or ens.agg, rng).reshape(n_vr, B).mean(axis=0)
    return y + live * gamma**h * q_next


def td_loss(ens: CriticEnsemble, s, a, y, tape: Tape | None = None):
    """Mean over members and batch of ``(Q_m(s, a) - y)^2``; ``y`` is a constant."""
    q = q_eval(ens, s, a, tape=tape)
    err = q - np.asarray(ad.value(y), dtype=np.float64)[None, :]
    return ad.mean(err * err)


def td_update(ens: CriticEnsemble, batch: TdBatch, targets, optim: Adam) -> float:
    tape = Tape()
    loss = td_loss(ens, batch.s, batch.a, targets, tape)
    optim.step(tape.backward(loss))
    return float(loss.value)


def q_bon(ens: CriticEnsemble, s, a, rng: np.random.Generator):
    """Best-of-N score: min of two distinct target members, fresh pair per row."""
    if ens.M < 2:
        raise ValueError("q_bon needs at least 2 ensemble members")
    return aggregate_target(q_eval(ens, s, a, use_targets=True), "subsample", rng)


def pessimism_mix(values, omega, alpha: float):
    """``(1 - psi) mean + psi min`` with ``psi = sigmoid(alpha (omega - 1))``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    values = np.asarray(values, dtype=np.float64)
    psi = 1.0 / (1.0 + np.exp(-alpha * (np.asarray(omega, dtype=np.float64) - 1.0)))
    return (1.0 - psi) * values.mean(axis=0) + psi * values.min(axis=0)
