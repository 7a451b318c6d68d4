"""Sparse-reward 2-D reaching tasks, the action-chunk wrapper, and scripted demonstrators.

States are batched: every array carries a leading environment axis so that
evaluation can roll out many independent episodes at once. Training uses a
batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .replay import ChunkTransition

STEP_SIZE = 0.05
SUCCESS_RADIUS = 0.1
STEP_LIMIT = 100
MIN_SPAWN_DIST = 0.5

# ForkReach wall: the band |y| < WALL_HALF, open where |x - gx| < GAP_HALF for gx in GAPS
WALL_HALF = 0.05
GAPS = (-0.5, 0.5)
GAP_HALF = 0.1

# demo aim bias std, in units of noise_std
BIAS_SCALE = 3.0


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int = 4
    act_dim: int = 2
    step_limit: int = STEP_LIMIT
    success: str = f"||pos - goal|| < {SUCCESS_RADIUS}"


@dataclass
class EnvState:
    pos: np.ndarray  # (n, 2)
    goal: np.ndarray  # (n, 2)
    t: np.ndarray  # (n,) primitive steps taken
    done: np.ndarray  # (n,) reached the goal
    truncated: np.ndarray  # (n,) hit the step limit
    n_clipped: int = 0  # out-of-range action coordinates seen so far
    episode_id: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.pos.shape[0]

    @property
    def finished(self) -> np.ndarray:
        return self.done | self.truncated

    def obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.goal], axis=1)


def in_wall(pos) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float64)
    x, y = pos[..., 0], pos[..., 1]
    in_gap = np.zeros(x.shape, dtype=bool)
    for gx in GAPS:
        in_gap |= np.abs(x - gx) < GAP_HALF
    return (np.abs(y) < WALL_HALF) & ~in_gap


class PointReach:
    spec = EnvSpec("point-reach")
    has_wall = False

    def _spawn(self, rng: np.random.Generator, n: int):
        pos = rng.uniform(-1.0, 1.0, size=(n, 2))
        goal = rng.uniform(-1.0, 1.0, size=(n, 2))
        bad = np.linalg.norm(pos - goal, axis=1) < MIN_SPAWN_DIST
        while bad.any():
            goal[bad] = rng.uniform(-1.0, 1.0, size=(int(bad.sum()), 2))
            bad = np.linalg.norm(pos - goal, axis=1) < MIN_SPAWN_DIST
        return pos, goal

    def reset(self, rng: np.random.Generator, n: int = 1) -> EnvState:
        pos, goal = self._spawn(rng, n)
        z = np.zeros(n, dtype=bool)
        return EnvState(pos, goal, np.zeros(n, dtype=np.int64), z.copy(), z.copy())

    def _move(self, pos, delta):
        return np.clip(pos + delta, -1.0, 1.0)

    def step(self, state: EnvState, action):
        """Advance every unfinished episode by one primitive action.

        Finished rows are frozen and receive reward 0. Returns
        ``(obs, reward, done, truncated)``.
        """
        live = ~state.finished
        if not live.any():
            raise RuntimeError("step() called after every episode finished")
        action = np.asarray(action, dtype=np.float64).reshape(state.n, self.spec.act_dim)
        if not np.all(np.isfinite(action[live])):
            raise ValueError("non-finite action")
        out_of_range = np.abs(action[live]) > 1.0
        state.n_clipped += int(out_of_range.sum())
        delta = STEP_SIZE * np.clip(action, -1.0, 1.0)
        new = self._move(state.pos, delta)
        state.pos = np.where(live[:, None], new, state.pos)
        state.t = state.t + live
        reached = live & (np.linalg.norm(state.pos - state.goal, axis=1) < SUCCESS_RADIUS)
        reward = np.where(live, -1.0, 0.0)
        reward[reached] = 0.0
        state.done = state.done | reached
        state.truncated = state.truncated | (live & ~reached & (state.t >= self.spec.step_limit))
        return state.obs(), reward, state.done.copy(), state.truncated.copy()


class ForkReach(PointReach):
    """PointReach with an impermeable wall between a lower start and an upper goal region."""

    spec = EnvSpec("fork-reach")
    has_wall = True

    def _spawn(self, rng, n):
        pos = np.stack([rng.uniform(-1.0, 1.0, n), rng.uniform(-1.0, -0.3, n)], axis=1)
        goal = np.stack([rng.uniform(-1.0, 1.0, n), rng.uniform(0.3, 1.0, n)], axis=1)
        return pos, goal

    def _move(self, pos, delta):
        full = np.clip(pos + delta, -1.0, 1.0)
        x_only = np.clip(pos + delta * [1.0, 0.0], -1.0, 1.0)
        y_only = np.clip(pos + delta * [0.0, 1.0], -1.0, 1.0)
        out = np.where(in_wall(full)[:, None], x_only, full)
        out = np.where(in_wall(out)[:, None], y_only, out)
        return np.where(in_wall(out)[:, None], pos, out)


ENVS = {"point-reach": PointReach, "fork-reach": ForkReach}


def make_env(name: str) -> PointReach:
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None


def chunk_step(env: PointReach, state: EnvState, chunk, h: int):
    """Execute an ``h``-step chunk open-loop on every live episode.

    Primitives after a mid-chunk termination are skipped and their reward slots
    are zero. Returns ``(s_next, rewards (n, h), done, truncated)``.
    """
    if h < 1:
        raise ValueError("h must be >= 1")
    chunk = np.asarray(chunk, dtype=np.float64).reshape(state.n, h, env.spec.act_dim)
    rewards = np.zeros((state.n, h))
    for j in range(h):
        if state.finished.all():
            break
        _, r, _, _ = env.step(state, chunk[:, j])
        rewards[:, j] = r
    return state.obs(), rewards, state.done.copy(), state.truncated.copy()


def chunk_transition(env, state: EnvState, chunk, h: int, episode_id: int) -> ChunkTransition:
    """Single-episode convenience wrapper producing a replay record."""
    if state.n != 1:
        raise ValueError("chunk_transition expects a single episode")
    s = state.obs()[0]
    s_next, rewards, done, trunc = chunk_step(env, state, chunk, h)
    return ChunkTransition(s, np.asarray(chunk, dtype=np.float64).reshape(-1), rewards[0], s_next[0],
                           bool(done[0]), bool(trunc[0]), episode_id, bool(done[0]))


# -- scripted demonstrations ---------------------------------------------------


@dataclass
class Episode:
    obs: np.ndarray  # (T, obs_dim) state at each chunk start
    actions: np.ndarray  # (T, h * act_dim)
    rewards: np.ndarray  # (T, h)
    success: bool
    final_obs: np.ndarray | None = None  # state after the last chunk

    def __len__(self):
        return self.obs.shape[0]


def waypoint(env, pos, goal) -> np.ndarray:
    """Next target of the scripted controller: the goal, or the mouth of the cheaper gap."""
    if not env.has_wall:
        return goal
    gaps = np.asarray(GAPS)
    below_mouth = np.stack([gaps, np.full(2, -0.15)], 1)
    above_mouth = np.stack([gaps, np.full(2, 0.15)], 1)
    cost = (np.linalg.norm(pos[:, None, :] - below_mouth[None], axis=2)
            + np.linalg.norm(goal[:, None, :] - above_mouth[None], axis=2))
    gx = gaps[np.argmin(cost, axis=1)]
    below = pos[:, 1] < 0.1
    aligned = np.abs(pos[:, 0] - gx) < 0.05
    target = np.stack([gx, np.where(aligned, 0.15, -0.15)], 1)
    return np.where(below[:, None], target, goal)


def scripted_action(env, pos, goal, bias, rng, noise_std: float):
    """Full-speed heading toward the next waypoint, plus aim bias and per-step noise."""
    delta = waypoint(env, pos, goal) - pos
    dist = np.linalg.norm(delta, axis=1, keepdims=True)
    aim = delta / np.maximum(dist, 1e-12) * np.minimum(1.0, dist / STEP_SIZE)
    return np.clip(aim + bias + noise_std * rng.standard_normal(pos.shape), -1.0, 1.0)


def scripted_demos(env, n: int, noise_std: float, rng: np.random.Generator, h: int = 4) -> list[Episode]:
    """Roll out ``n`` noisy scripted episodes in parallel, recorded in chunk units.

    Noise has two parts: a per-episode aim bias with std ``BIAS_SCALE * noise_std``,
    which is what makes episodes fail, and fresh per-step jitter with std ``noise_std``.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    state = env.reset(rng, n)
    bias = BIAS_SCALE * noise_std * rng.standard_normal((n, env.spec.act_dim))
    obs, acts, rews, alive = [], [], [], []
    while not state.finished.all():
        live = ~state.finished
        alive.append(live)
        obs.append(state.obs())
        chunk = np.zeros((n, h, env.spec.act_dim))
        r = np.zeros((n, h))
        for j in range(h):
            if state.finished.all():
                break
            chunk[:, j] = scripted_action(env, state.pos, state.goal, bias, rng, noise_std)
            _, r[:, j], _, _ = env.step(state, chunk[:, j])
        acts.append(chunk.reshape(n, -1))
        rews.append(r)
    alive = np.array(alive)
    obs, acts, rews = np.array(obs), np.array(acts), np.array(rews)
    episodes = []
    for i in range(n):
        m = alive[:, i]
        episodes.append(Episode(obs[m, i], acts[m, i], rews[m, i], bool(state.done[i]), state.obs()[i]))
    return episodes


def scripted_demo(env, noise_std: float, rng: np.random.Generator, h: int = 4) -> Episode:
    return scripted_demos(env, 1, noise_std, rng, h)[0]


def demo_success_rate(env, noise_std: float, rng, episodes: int = 200, h: int = 4) -> float:
    return float(np.mean([e.success for e in scripted_demos(env, episodes, noise_std, rng, h)]))


def calibrate_noise(env, target: float, rng: np.random.Generator, episodes: int = 200, lo: float = 0.0,
                    hi: float = 2.0, iters: int = 12, tol: float = 0.05, h: int = 4) -> float:
    """Bisect ``noise_std`` until the demo success estimate lies within ``tol`` of ``target``."""
    if not 0.0 < target < 1.0:
        raise ValueError("target must lie in (0, 1)")
    mid = 0.5 * (lo + hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        rate = demo_success_rate(env, mid, rng, episodes, h)
        if abs(rate - target) <= tol:
            return mid
        if rate > target:
            lo = mid
        else:
            hi = mid
    return mid
