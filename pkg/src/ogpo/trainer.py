"""BC pretraining, warmup, the interleaved critic/actor loop, evaluation, and variant dispatch."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import extraction as ex
from . import flow
from .config import TrainerConfig
from .critic import CriticEnsemble, TdBatch, make_critic, q_bon, td_targets, td_update
from .envs import Episode, EnvState, chunk_step, chunk_transition, calibrate_noise, make_env, scripted_demos
from .flow import FlowPolicy, make_flow_policy
from .io import MetricsWriter, load_checkpoint, save_checkpoint
from .numeric import Adam, Tape, ad, grad_norm, init_mlp, mlp_forward
from .replay import ChunkTransition, RolloutBuffer, SuccessBuffer, sample_batch
from .rng import stream

log = logging.getLogger(__name__)

PPO_FAMILY = ("ogpo", "ogpo-plus", "ogpo-ca", "ogpo-chi2", "aw-ogpo", "aspo")
FLOW_ACTOR = PPO_FAMILY + ("qc", "awr", "bptt")
BC_FIELDS = ("env", "seed", "h", "K", "sigma", "correct_sde", "actor_hidden", "denoiser_hidden", "activation",
             "demo_episodes", "demo_noise", "demo_target", "bc_lr", "offline_steps", "bc_eval_interval",
             "bc_eval_episodes", "bc_clip", "bc_clip_band", "bc_batch_size")


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, dump: dict | None = None):
        super().__init__(msg)
        self.dump = dump or {}


def bc_hash(cfg: TrainerConfig) -> str:
    sub = {k: getattr(cfg, k) for k in BC_FIELDS}
    return _hash_dict(sub)


def _hash_dict(d: dict) -> str:
    import hashlib
    import json

    return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


def dims(cfg: TrainerConfig) -> tuple[int, int]:
    spec = make_env(cfg.env).spec
    return spec.obs_dim, spec.act_dim * cfg.h


def build_policy(cfg: TrainerConfig) -> FlowPolicy:
    obs_dim, d = dims(cfg)
    return make_flow_policy(obs_dim, d, stream(cfg.seed, "init-policy"), cfg.actor_hidden, cfg.denoiser_hidden,
                            cfg.K, cfg.sigma, cfg.correct_sde, cfg.activation)


# -- demonstrations -----------------------------------------------------------------


def make_demos(cfg: TrainerConfig) -> tuple[list[Episode], float]:
    env = make_env(cfg.env)
    noise = cfg.demo_noise
    if noise is None:
        noise = calibrate_noise(env, cfg.demo_target, stream(cfg.seed, "calibrate"), h=cfg.h)
    return scripted_demos(env, cfg.demo_episodes, noise, stream(cfg.seed, "demos"), cfg.h), noise


def demo_pairs(episodes) -> tuple[np.ndarray, np.ndarray]:
    s = np.concatenate([e.obs for e in episodes]) if episodes else np.zeros((0, 4))
    a = np.concatenate([e.actions for e in episodes]) if episodes else np.zeros((0, 0))
    return s, a


def offline_buffer(episodes, obs_dim: int, d: int, h: int) -> RolloutBuffer:
    """Demo episodes as chunk transitions (episode ids are negative to stay apart from online ones)."""
    n = max(1, sum(len(e) for e in episodes))
    buf = RolloutBuffer(obs_dim, d, h, capacity=n)
    for i, e in enumerate(episodes):
        nxt = np.concatenate([e.obs[1:], e.final_obs[None]]) if e.final_obs is not None else np.vstack([e.obs[1:], e.obs[-1:]])
        for t in range(len(e)):
            last = t == len(e) - 1
            buf.push(ChunkTransition(e.obs[t], e.actions[t], e.rewards[t], nxt[t], bool(last and e.success),
                                     bool(last and not e.success), -(i + 1)))
    return buf


# -- evaluation -----------------------------------------------------------------------


def evaluate_actor(act, env, h: int, episodes: int, rng) -> dict:
    """Roll out ``episodes`` independent episodes in parallel with ``act(obs, rng) -> chunks``."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    state = env.reset(rng, episodes)
    ret = np.zeros(episodes)
    while not state.finished.all():
        live = ~state.finished
        chunk = np.zeros((episodes, h * env.spec.act_dim))
        chunk[live] = act(state.obs()[live], rng)
        _, r, _, _ = chunk_step(env, state, chunk, h)
        ret += r.sum(axis=1)
    succ = state.done
    return {
        "success_rate": float(succ.mean()),
        "mean_succ_len": float(state.t[succ].mean()) if succ.any() else None,
        "mean_return": float(ret.mean()),
    }


def evaluate_policy(policy: FlowPolicy, env, h: int, episodes: int, rng) -> dict:
    """Deterministic-ODE evaluation of a flow policy."""
    return evaluate_actor(lambda o, r: flow.sample_ode(policy, o, r), env, h, episodes, rng)


# -- BC pretraining ---------------------------------------------------------------------


def pretrain_bc(cfg: TrainerConfig, episodes, writer: MetricsWriter | None = None) -> tuple[FlowPolicy, dict]:
    """Flow-matching + denoiser regression, stopped at the first eval inside the clip band."""
    if cfg.offline_steps <= 0:
        raise ValueError("BC pretraining needs offline_steps > 0")
    s, a = demo_pairs(episodes)
    if len(s) == 0:
        raise ValueError("empty demonstration dataset")
    env = make_env(cfg.env)
    policy = build_policy(cfg)
    opt = Adam(policy.parameters(), cfg.bc_lr)
    rng = stream(cfg.seed, "bc")
    lo, hi = cfg.bc_clip - cfg.bc_clip_band, cfg.bc_clip + cfg.bc_clip_band
    best, best_gap, best_info = None, np.inf, None
    for step in range(1, cfg.offline_steps + 1):
        idx = rng.integers(0, len(s), size=cfg.bc_batch_size)
        tape = Tape()
        fm = flow.flow_matching_loss(policy, s[idx], a[idx], rng, tape)
        den = flow.denoiser_loss(policy, s[idx], a[idx], rng, tape)
        loss = fm + den
        opt.step(tape.backward(loss))
        if step % cfg.bc_eval_interval == 0 or step == cfg.offline_steps:
            ev = evaluate_policy(policy, env, cfg.h, cfg.bc_eval_episodes, stream(cfg.seed, "bc-eval"))
            pct = 100.0 * ev["success_rate"]
            rec = {"phase": "bc", "step": step, "fm_loss": float(fm.value), "denoiser_loss": float(den.value), **ev}
            if writer:
                writer.write(rec)
            if lo <= pct <= hi:
                return policy, {**rec, "in_band": True}
            gap = abs(pct - cfg.bc_clip)
            if gap < best_gap:
                best, best_gap, best_info = policy.copy(), gap, rec
    log.warning("BC never reached the %.0f +- %.0f%% band; keeping the closest checkpoint", cfg.bc_clip,
                cfg.bc_clip_band)
    return best, {**best_info, "in_band": False}


# -- training state -----------------------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainerConfig
    env: object
    base: FlowPolicy  # the BC checkpoint, never modified
    policy: FlowPolicy
    ema: FlowPolicy
    slow: FlowPolicy
    critic: CriticEnsemble
    actor_opt: Adam | None
    critic_opt: Adam
    replay: RolloutBuffer
    succ: SuccessBuffer
    offline: RolloutBuffer | None = None
    latent: bl.LatentPolicy | None = None
    edit: bl.EditPolicy | None = None
    value_net: object = None
    value_opt: Adam | None = None
    base_checksum: str = ""
    rng_env: np.random.Generator = None
    rng_act: np.random.Generator = None
    rng_upd: np.random.Generator = None
    env_state: EnvState | None = None
    episode_id: int = 0
    env_steps: int = 0
    critic_updates: int = 0
    actor_updates: int = 0
    episodes_done: int = 0
    successes: int = 0
    max_grad_norm: float = 0.0
    version: int = 0
    window: list = field(default_factory=list)


def _actor_lr(cfg):
    return cfg.ppo_lr if cfg.algo in PPO_FAMILY else (cfg.dppo_lr if cfg.algo == "dppo" else cfg.actor_lr)


def _sched(cfg, prefix):
    return {"schedule": getattr(cfg, f"{prefix}_schedule"), "warmup_steps": getattr(cfg, f"{prefix}_warmup_steps"),
            "decay_steps": getattr(cfg, f"{prefix}_decay_steps"), "end_value": getattr(cfg, f"{prefix}_end_lr")}


def init_state(cfg: TrainerConfig, bc_policy: FlowPolicy, offline_episodes=None) -> TrainState:
    cfg = cfg.resolved()
    obs_dim, d = dims(cfg)
    rng = stream(cfg.seed, "init-rl")
    base = bc_policy.copy()
    policy, ema, slow = base.copy(), base.copy(), base.copy()
    critic = make_critic(obs_dim + d, cfg.M, rng, cfg.critic_hidden, cfg.q_agg, cfg.critic_activation)
    latent = edit = value_net = value_opt = None
    actor_params = policy.velocity_parameters()
    if cfg.algo == "dsrl":
        latent = bl.make_latent_policy(obs_dim, d, rng, cfg.actor_hidden, cfg.M, cfg.critic_hidden, cfg.q_agg)
        critic = latent.critic
        actor_params = latent.parameters()
    elif cfg.algo == "expo":
        edit = bl.make_edit_policy(obs_dim, d, rng, cfg.actor_hidden, cfg.edit_scale, cfg.entropy_coef)
        actor_params = edit.parameters()
    elif cfg.algo == "dppo":
        value_net = init_mlp("value", (obs_dim, *cfg.critic_hidden, 1), rng, cfg.critic_activation)
        value_opt = Adam(value_net.params, cfg.dppo_value_lr)
    lr = cfg.latent_lr if cfg.algo in ("dsrl", "expo") else _actor_lr(cfg)
    actor_opt = Adam(actor_params, lr, **_sched(cfg, "actor"))
    critic_opt = Adam(critic.parameters(), cfg.critic_lr, weight_decay=cfg.critic_weight_decay,
                      **_sched(cfg, "critic"))
    replay = RolloutBuffer(obs_dim, d, cfg.h, cfg.replay_capacity)
    offline = None
    if cfg.use_offline:
        if not offline_episodes:
            raise ValueError("use_offline needs an offline dataset")
        offline = offline_buffer(offline_episodes, obs_dim, d, cfg.h)
    return TrainState(cfg, make_env(cfg.env), base, policy, ema, slow, critic, actor_opt, critic_opt, replay,
                      SuccessBuffer(obs_dim, d), offline, latent, edit, value_net, value_opt,
                      bl.param_checksum(base.parameters()), stream(cfg.seed, "env"), stream(cfg.seed, "act"),
                      stream(cfg.seed, "update"))


def ema_update(dst: dict[str, np.ndarray], src: dict[str, np.ndarray], rate: float) -> None:
    """``dst <- (1 - rate) dst + rate src`` in place."""
    for k, v in dst.items():
        if v.shape != src[k].shape:
            raise ValueError(f"shape mismatch for {k}")
        v[...] = (1.0 - rate) * v + rate * src[k]


# -- acting -------------------------------------------------------------------------------


def rollout_action(state: TrainState, s, rng, best_of_n: int | None = None):
    """Chunk to execute at ``s`` and its chain, from the EMA policy with optional Best-of-N."""
    n = state.cfg.best_of_n if best_of_n is None else best_of_n
    s = np.atleast_2d(s)
    if n <= 1:
        traj = flow.sample_sde(state.ema, s, rng)
        return traj.action[0], traj
    traj = flow.sample_sde(state.ema, np.repeat(s, n, axis=0), rng)
    scores = q_bon(state.critic, traj.s, traj.action, rng)
    i = int(np.argmax(scores))  # first maximum wins ties
    return traj.action[i], traj.take([i])


def act(state: TrainState, s, rng, explore_bon: bool = True):
    """Returns ``(executed chunk, action stored in replay)``."""
    algo = state.cfg.algo
    if algo == "dsrl":
        w, a = bl.dsrl_act(state.latent, state.base, np.atleast_2d(s), rng)
        return a[0], w[0]
    if algo == "expo":
        a, _ = bl.expo_act(state.edit, state.base, state.critic, np.atleast_2d(s), rng)
        return a[0], a[0]
    a, _ = rollout_action(state, s, rng, None if explore_bon else 1)
    return a, a


def eval_actor(state: TrainState):
    algo = state.cfg.algo
    if algo == "dsrl":
        def f(o, rng):
            mean, _ = bl.gaussian_head(state.latent.head, o, state.latent.d)
            return flow.sample_ode(state.base, o, a_K=mean)
        return f
    if algo == "expo":
        def f(o, rng):
            a = flow.sample_ode(state.base, o, rng)
            mean, _ = bl.gaussian_head(state.edit.head, np.concatenate([o, a], 1), state.edit.d)
            return bl.otf_select(state.critic, o, a, a + state.edit.scale * np.tanh(mean))[0]
        return f
    pol = state.policy if algo == "dppo" else state.ema
    return lambda o, rng: flow.sample_ode(pol, o, rng)


def evaluate(state: TrainState, episodes: int, rng) -> dict:
    return evaluate_actor(eval_actor(state), state.env, state.cfg.h, episodes, rng)


def env_step(state: TrainState, explore_bon: bool = True) -> dict:
    """One chunk in the live training episode; resets and finalises episodes as needed."""
    cfg = state.cfg
    if state.env_state is None or state.env_state.finished.all():
        state.env_state = state.env.reset(state.rng_env, 1)
        state.episode_id += 1
    t0 = int(state.env_state.t[0])
    s = state.env_state.obs()[0]
    executed, stored = act(state, s, state.rng_act, explore_bon)
    tr = chunk_transition(state.env, state.env_state, executed, cfg.h, state.episode_id)
    tr.a = np.asarray(stored, dtype=np.float64).reshape(-1)
    state.replay.push(tr)
    state.env_steps += int(state.env_state.t[0]) - t0
    out = {"reward": float(tr.rewards.sum())}
    if state.env_state.finished.all():
        success = bool(state.env_state.done[0])
        state.replay.finalize_episode(state.succ, state.episode_id, success)
        state.episodes_done += 1
        state.successes += success
        out["episode_end"] = True
    return out


# -- updates ------------------------------------------------------------------------------


def _check(x, what, state):
    v = np.asarray(ad.value(x))
    if not np.all(np.isfinite(v)):
        raise TrainingAborted(f"non-finite {what}", {"env_steps": state.env_steps,
                                                      "critic_updates": state.critic_updates,
                                                      "actor_updates": state.actor_updates})


def _batch(state: TrainState, n: int):
    cfg = state.cfg
    off = state.offline if cfg.use_offline else None
    return sample_batch(state.replay, off, cfg.r_offline if off is not None else 0.0, n, state.rng_upd)


def critic_update(state: TrainState) -> dict:
    cfg, rng = state.cfg, state.rng_upd
    b = _batch(state, cfg.batch_size)
    B = len(b)
    boot = flow.sample_sde(state.ema, np.tile(b.s_next, (cfg.n_vr, 1)), rng).action.reshape(cfg.n_vr, B, -1)
    batch = TdBatch(b.s, b.a, b.rewards, b.s_next, b.done, boot)
    y = td_targets(state.critic, batch, cfg.gamma, cfg.h, rng)
    _check(y, "TD target", state)
    loss = td_update(state.critic, batch, y, state.critic_opt)
    _check(loss, "critic loss", state)
    state.critic_updates += 1
    return {"q_loss": loss, "q_mean": float(y.mean())}


def _apply(state: TrainState, tape: Tape, loss, params) -> float:
    _check(loss, "actor loss", state)
    grads = tape.backward(loss)
    grads = {k: grads[k] for k in params}
    gn = grad_norm(grads)
    _check(gn, "actor gradient", state)
    state.actor_opt.step(grads)
    return gn


def actor_update(state: TrainState) -> dict:
    cfg, rng, algo = state.cfg, state.rng_upd, state.cfg.algo
    s = _batch(state, cfg.N_batch).s
    if algo == "qc":
        out = bl.qc_update(state.policy, state.succ, state.replay, max(1, cfg.best_of_n), True, state.actor_opt, rng,
                           cfg.bc_batch_size)
    elif algo == "bptt":
        tape = Tape()
        loss = bl.bptt_loss(state.policy, state.critic, s, rng, tape)
        out = {"pi_loss": float(loss.value), "grad_norm": _apply(state, tape, loss, state.policy.velocity_parameters())}
    else:
        group = ex.sample_group(state.ema, state.critic, s, cfg.G, rng)
        if cfg.advantage == "chi2":
            group = ex.pessimistic_group(group, state.policy, state.ema, cfg.alpha)
        tape = Tape()
        adv = ex.compute_advantages(group, cfg.advantage, state.policy, state.slow, cfg.beta_init, tape)
        info = {}
        if algo == "awr":
            loss = ex.awr_loss(state.policy, group, adv, cfg.beta_awr, rng, tape)
        elif algo == "aw-ogpo":
            loss = ex.aw_ogpo_loss(state.policy, state.ema, group, adv, cfg.beta_awr, False, tape)
        elif algo == "aspo":
            loss = ex.fpo_aspo_loss(state.policy, state.ema, group, adv, cfg.clip_eps, rng, tape)
        else:
            loss, info = ex.ppo_loss(state.policy, state.ema, group, adv, cfg.clip_eps, cfg.no_negative, tape)
        bc = 0.0
        if cfg.bc_coeff > 0 and len(state.succ):
            s2, a2 = state.succ.sample(cfg.bc_batch_size, rng)
            bc = ex.bc_success_loss(state.policy, s2, a2, rng, tape)
        total = ex.total_loss(loss, bc, cfg.bc_coeff)
        gn = _apply(state, tape, total, state.policy.velocity_parameters())
        out = {"pi_loss": float(ad.value(loss)), "bc_loss": float(ad.value(bc)), "grad_norm": gn,
               "adv_std": float(adv.adv.std()), "q_group": float(group.agg_q.mean()), **info}
    state.actor_updates += 1
    if out.get("grad_norm") is not None:
        state.max_grad_norm = max(state.max_grad_norm, out["grad_norm"])
    return out


def _td_batch(state: TrainState) -> TdBatch:
    b = _batch(state, state.cfg.batch_size)
    return TdBatch(b.s, b.a, b.rewards, b.s_next, b.done)


def _ema_all(state: TrainState, critic: bool, actor: bool) -> None:
    cfg = state.cfg
    if critic:
        ema_update(state.critic.target.params, state.critic.online.params, cfg.tau)
    if actor and cfg.algo in FLOW_ACTOR:
        ema_update(state.ema.velocity_parameters(), state.policy.velocity_parameters(), cfg.tau)
        if cfg.advantage == "chi2":
            ema_update(state.slow.velocity_parameters(), state.policy.velocity_parameters(), cfg.tau_slow)


def train_step(state: TrainState) -> dict:
    """One environment chunk, then ``utd_q`` critic and ``utd_pi`` actor updates, then EMA."""
    cfg = state.cfg
    out = env_step(state)
    if cfg.algo in ("dsrl", "expo"):
        n = max(cfg.utd_q, cfg.utd_pi)
        for i in range(n):
            upd_actor = i < cfg.utd_pi
            b = _td_batch(state)
            if cfg.algo == "dsrl":
                m = bl.dsrl_update(state.latent, state.base, state.base_checksum, b, cfg.gamma, cfg.h,
                                   state.critic_opt, state.actor_opt, state.rng_upd, cfg.entropy_coef, upd_actor)
            else:
                m = bl.expo_update(state.edit, state.base, state.base_checksum, state.critic, b, cfg.gamma, cfg.h,
                                   state.critic_opt, state.actor_opt, state.rng_upd, upd_actor)
            _check(m["q_loss"], "critic loss", state)
            state.critic_updates += 1
            if "grad_norm" in m:
                _check(m["grad_norm"], "actor gradient", state)
                state.actor_updates += 1
                state.max_grad_norm = max(state.max_grad_norm, m["grad_norm"])
            out.update(m)
        if n:
            _ema_all(state, True, False)
        return out
    for _ in range(cfg.utd_q):
        out.update(critic_update(state))
    for _ in range(cfg.utd_pi):
        out.update(actor_update(state))
    _ema_all(state, cfg.utd_q > 0, cfg.utd_pi > 0)
    return out


def warmup(state: TrainState) -> None:
    """Roll out the BC policy without Best-of-N, then run critic-only updates."""
    cfg = state.cfg
    for _ in range(cfg.warmup_episodes):
        while True:
            env_step(state, explore_bon=False)
            if state.env_state.finished.all():
                break
    if len(state.replay) == 0 or cfg.algo == "dppo":
        return
    for _ in range(cfg.critic_warmup_updates * cfg.utd_warmup):
        if cfg.algo in ("dsrl", "expo"):
            b = _td_batch(state)
            if cfg.algo == "dsrl":
                bl.dsrl_update(state.latent, state.base, state.base_checksum, b, cfg.gamma, cfg.h, state.critic_opt,
                               state.actor_opt, state.rng_upd, cfg.entropy_coef, update_actor=False)
            else:
                bl.expo_update(state.edit, state.base, state.base_checksum, state.critic, b, cfg.gamma, cfg.h,
                               state.critic_opt, state.actor_opt, state.rng_upd, update_actor=False)
            state.critic_updates += 1
        else:
            critic_update(state)
        _ema_all(state, True, False)


# -- DPPO ---------------------------------------------------------------------------------


def _concat_trajs(trajs) -> flow.DenoisingTrajectory:
    t0 = trajs[0]
    cat = lambda f, ax: np.concatenate([getattr(t, f) for t in trajs], ax)  # noqa: E731
    zhat = cat("zhat", 1) if t0.zhat is not None else None
    return flow.DenoisingTrajectory(cat("s", 0), cat("chain", 1), cat("logp", 1), cat("noise", 1), t0.sigma,
                                    t0.corrected, zhat, t0.zhat_source)


def dppo_iteration(state: TrainState) -> dict:
    """Collect a fresh batch of episodes with the current policy and take PPO steps on it."""
    cfg = state.cfg
    n = cfg.dppo_episodes
    es = state.env.reset(state.rng_env, n)
    trajs, rows, rewards = [], [], []
    while not es.finished.all():
        live = np.flatnonzero(~es.finished)
        traj = flow.sample_sde(state.policy, es.obs()[live], state.rng_act)
        chunk = np.zeros((n, cfg.h * state.env.spec.act_dim))
        chunk[live] = traj.action
        _, r, _, _ = chunk_step(state.env, es, chunk, cfg.h)
        trajs.append(traj)
        rows.append(live)
        rewards.append(r[live])
    state.env_steps += int(es.t.sum())
    state.episodes_done += n
    state.successes += int(es.done.sum())
    # per-episode returns-to-go, bootstrapping timeouts with the value net
    final_v = mlp_forward(state.value_net, es.obs()).reshape(-1)
    per_ep: list[list] = [[] for _ in range(n)]
    for t, (live, r) in enumerate(zip(rows, rewards)):
        for j, i in enumerate(live):
            per_ep[i].append((t, j, r[j]))
    ret_by_slot = {}
    for i in range(n):
        rs = np.array([x[2] for x in per_ep[i]])
        boot = final_v[i] if es.truncated[i] else 0.0
        g = bl.returns_to_go(rs, cfg.gamma, boot)
        for (t, j, _), v in zip(per_ep[i], g):
            ret_by_slot[(t, j)] = v
    returns = np.array([ret_by_slot[(t, j)] for t, live in enumerate(rows) for j in range(len(live))])
    batch = bl.OnPolicyBatch(_concat_trajs(trajs), returns, state.version)
    m = bl.dppo_update(state.policy, batch, state.value_net, cfg.gamma_denoise, cfg.clip_eps, state.actor_opt,
                       state.value_opt, state.version, cfg.dppo_epochs)
    _check(m["pi_loss"], "actor loss", state)
    state.version += 1
    state.actor_updates += cfg.dppo_epochs
    state.max_grad_norm = max(state.max_grad_norm, m["grad_norm"])
    return m


# -- checkpoints --------------------------------------------------------------------------


def _prefixed(prefix, params):
    return {f"{prefix}/{k}": v for k, v in params.items()}


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {**_prefixed("policy", state.policy.parameters()), **_prefixed("ema", state.ema.parameters()),
              **_prefixed("critic", state.critic.online.params),
              **_prefixed("critic_target", state.critic.target.params)}
    if state.cfg.advantage == "chi2":
        arrays.update(_prefixed("slow", state.slow.parameters()))
    if state.latent is not None:
        arrays.update(_prefixed("latent", state.latent.head.params))
        arrays.update(_prefixed("base", state.base.parameters()))
    if state.edit is not None:
        arrays.update(_prefixed("edit", state.edit.head.params))
        arrays.update(_prefixed("base", state.base.parameters()))
    if state.value_net is not None:
        arrays.update(_prefixed("value", state.value_net.params))
    return arrays


def load_state_arrays(state: TrainState, arrays: dict[str, np.ndarray]) -> None:
    targets = {"policy": state.policy.parameters(), "ema": state.ema.parameters(), "slow": state.slow.parameters(),
               "critic": state.critic.online.params, "critic_target": state.critic.target.params,
               "base": state.base.parameters()}
    if state.latent is not None:
        targets["latent"] = state.latent.head.params
    if state.edit is not None:
        targets["edit"] = state.edit.head.params
    if state.value_net is not None:
        targets["value"] = state.value_net.params
    for name, arr in arrays.items():
        prefix, key = name.split("/", 1)
        dst = targets[prefix][key]
        if dst.shape != arr.shape:
            raise ValueError(f"checkpoint array {name} has shape {arr.shape}, expected {dst.shape}")
        dst[...] = arr


def save_bc_checkpoint(path, policy: FlowPolicy, cfg: TrainerConfig, info: dict | None = None) -> None:
    save_checkpoint(path, _prefixed("policy", policy.parameters()), "bc", bc_hash(cfg), info or {})


def load_bc_checkpoint(path, cfg: TrainerConfig, force: bool = False) -> FlowPolicy:
    arrays, _ = load_checkpoint(path, "bc", bc_hash(cfg), force)
    policy = build_policy(cfg)
    params = policy.parameters()
    for name, arr in arrays.items():
        prefix, key = name.split("/", 1)
        if prefix != "policy" or key not in params or params[key].shape != arr.shape:
            raise ValueError(f"unexpected array {name} in BC checkpoint")
        params[key][...] = arr
    return policy


def save_state(path, state: TrainState) -> None:
    save_checkpoint(path, state_arrays(state), state.cfg.algo, state.cfg.config_hash(),
                    {"env_steps": state.env_steps})


def load_state(path, cfg: TrainerConfig, force: bool = False) -> TrainState:
    cfg = cfg.resolved()
    arrays, manifest = load_checkpoint(path, cfg.algo, cfg.config_hash(), force)
    state = init_state(cfg, build_policy(cfg))
    load_state_arrays(state, arrays)
    state.env_steps = int(manifest["meta"].get("env_steps", 0))
    state.base_checksum = bl.param_checksum(state.base.parameters())
    return state


# -- end to end ---------------------------------------------------------------------------


def _summarise(window: list[dict]) -> dict:
    keys = sorted({k for m in window for k, v in m.items() if isinstance(v, (int, float)) and not isinstance(v, bool)})
    out = {}
    for k in keys:
        vals = [m[k] for m in window if isinstance(m.get(k), (int, float))]
        if vals:
            out[k] = float(np.mean(vals))
    return out


def obtain_bc_policy(cfg: TrainerConfig, out: Path | None, writer, bc_checkpoint=None, force=False):
    if bc_checkpoint is not None:
        return load_bc_checkpoint(bc_checkpoint, cfg, force), None
    episodes, noise = make_demos(cfg)
    policy, info = pretrain_bc(cfg, episodes, writer)
    if out is not None:
        save_bc_checkpoint(out / "bc.ckpt", policy, cfg, {**info, "demo_noise": noise})
    return policy, episodes


def run(cfg: TrainerConfig, out_dir=None, bc_checkpoint=None, force: bool = False, offline_episodes=None) -> dict:
    """Pretrain (or load) -> warmup -> train with periodic evaluation -> final checkpoint."""
    cfg = cfg.resolved()
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "resolved-config.json")
        writer = MetricsWriter(out / "metrics.jsonl")
    history: list[dict] = []

    def emit(rec):
        history.append(rec)
        if writer:
            writer.write(rec)

    t_start = time.process_time()
    try:
        bc_policy, demos = obtain_bc_policy(cfg, out, writer, bc_checkpoint, force)
        if cfg.use_offline and offline_episodes is None:
            offline_episodes = demos if demos is not None else make_demos(cfg)[0]
        state = init_state(cfg, bc_policy, offline_episodes)
        n_eval = 0

        def do_eval():
            nonlocal n_eval
            ev = evaluate(state, cfg.eval_episodes, stream(cfg.seed, "eval", n_eval))
            n_eval += 1
            emit({"phase": "eval", "step": state.env_steps, **ev})
            return ev["success_rate"]

        do_eval()
        aborted = None
        next_eval = cfg.eval_interval
        try:
            if cfg.algo != "dppo" and cfg.online_steps > 0:
                warmup(state)
            while state.env_steps < cfg.online_steps:
                m = dppo_iteration(state) if cfg.algo == "dppo" else train_step(state)
                state.window.append(m)
                if state.env_steps >= next_eval:
                    emit({"phase": "train", "step": state.env_steps, **_summarise(state.window),
                          "grad_norm_max": state.max_grad_norm, "episodes": state.episodes_done,
                          "train_success": state.successes / max(1, state.episodes_done),
                          "actor_updates": state.actor_updates, "critic_updates": state.critic_updates})
                    state.window = []
                    rate = do_eval()
                    while next_eval <= state.env_steps:
                        next_eval += cfg.eval_interval
                    if cfg.stop_success is not None and rate >= cfg.stop_success:
                        break
        except (TrainingAborted, ad.NonFiniteError, FloatingPointError) as err:
            aborted = str(err)
            emit({"phase": "abort", "step": state.env_steps, "reason": aborted,
                  "grad_norm_max": state.max_grad_norm, **getattr(err, "dump", {})})
        if aborted is None and (not history or history[-1].get("step") != state.env_steps
                                or history[-1].get("phase") != "eval"):
            do_eval()
        if out is not None:
            save_state(out / "final.ckpt", state)
    finally:
        if writer:
            writer.close()
    evals = [r for r in history if r["phase"] == "eval"]
    return {"history": history, "evals": evals, "aborted": aborted, "max_grad_norm": state.max_grad_norm,
            "env_steps": state.env_steps, "cpu_seconds": time.process_time() - t_start, "state": state}
