"""Trainer configuration: every scalar knob, validated, with per-algorithm presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

ALGOS = ("ogpo", "ogpo-plus", "ogpo-ca", "ogpo-chi2", "qc", "dsrl", "expo", "dppo", "bptt", "awr", "aw-ogpo", "aspo")
ENVS = ("point-reach", "fork-reach")
Q_AGGS = ("mean", "min", "subsample")
ADVANTAGES = ("mean-baseline", "conservative", "grpo-std", "chi2")
SCHEDULES = ("constant", "cosine")

# Variant presets fill fields left as None. Algorithms not listed use the plain defaults.
PRESETS: dict[str, dict] = {
    "ogpo": {"advantage": "mean-baseline", "bc_coeff": 0.0, "best_of_n": 0},
    "ogpo-plus": {"advantage": "mean-baseline", "bc_coeff": 1.0, "best_of_n": 8},
    "ogpo-ca": {"advantage": "conservative", "bc_coeff": 1.0, "best_of_n": 8},
    "ogpo-chi2": {"advantage": "chi2", "bc_coeff": 1.0, "best_of_n": 8},
    "qc": {"advantage": "mean-baseline", "bc_coeff": 1.0, "best_of_n": 8},
    "awr": {"advantage": "mean-baseline", "bc_coeff": 0.0, "best_of_n": 0},
    "aw-ogpo": {"advantage": "mean-baseline", "bc_coeff": 0.0, "best_of_n": 0},
    "aspo": {"advantage": "mean-baseline", "bc_coeff": 0.0, "best_of_n": 0},
    "bptt": {"advantage": "mean-baseline", "bc_coeff": 0.0, "best_of_n": 0},
}
PRESET_DEFAULTS = {"advantage": "mean-baseline", "bc_coeff": 0.0, "best_of_n": 0}


@dataclass
class TrainerConfig:
    algo: str = "ogpo-plus"
    env: str = "point-reach"
    seed: int = 0

    # environment and policy
    gamma: float = 0.99
    h: int = 4
    K: int = 10
    sigma: float = 0.1
    correct_sde: bool = True
    actor_hidden: tuple = (64, 64)
    denoiser_hidden: tuple = (32, 32)
    critic_hidden: tuple = (64, 64)
    activation: str = "tanh"
    critic_activation: str = "relu"

    # critic
    M: int = 10
    q_agg: str = "mean"
    n_vr: int = 1
    tau: float = 0.05
    critic_lr: float = 1e-3
    critic_weight_decay: float = 1e-5
    critic_schedule: str = "constant"
    critic_warmup_steps: int = 500
    critic_decay_steps: int = 5000
    critic_end_lr: float = 0.0
    batch_size: int = 256

    # actor extraction
    G: int = 32
    N_batch: int = 8
    clip_eps: float = 0.01
    ppo_lr: float = 4.5e-5
    actor_lr: float = 3e-4  # regression-style and reparameterised actors
    actor_schedule: str = "constant"
    actor_warmup_steps: int = 2000
    actor_decay_steps: int = 50000
    actor_end_lr: float = 2e-5
    advantage: str | None = None
    bc_coeff: float | None = None
    best_of_n: int | None = None
    no_negative: bool = False
    tau_slow: float = 0.005
    beta_init: float = 1.0
    alpha: float = 10.0
    beta_awr: float = 1.0
    bc_batch_size: int = 256

    # baselines
    gamma_denoise: float = 0.9
    entropy_coef: float = 1e-3
    edit_scale: float = 0.5
    latent_lr: float = 3e-4
    dppo_episodes: int = 8
    dppo_value_lr: float = 1e-3
    dppo_lr: float = 4.5e-5
    dppo_epochs: int = 4

    # data
    r_offline: float = 0.0
    use_offline: bool = False
    replay_capacity: int = 1_000_000
    demo_episodes: int = 200
    demo_noise: float | None = None  # None: calibrate to demo_target
    demo_target: float = 0.9

    # BC pretraining
    bc_lr: float = 3e-4
    offline_steps: int = 5000
    bc_eval_interval: int = 20
    bc_eval_episodes: int = 200
    bc_clip: float = 50.0
    bc_clip_band: float = 5.0

    # online schedule
    online_steps: int = 150_000  # primitive environment steps
    warmup_episodes: int = 20
    critic_warmup_updates: int = 500
    utd_warmup: int = 1
    utd_q: int = 1
    utd_pi: int = 1
    eval_interval: int = 2000  # primitive steps
    eval_episodes: int = 100
    stop_success: float | None = None  # end training at the first eval at or above this rate

    def __post_init__(self):
        for k in ("actor_hidden", "denoiser_hidden", "critic_hidden"):
            setattr(self, k, tuple(int(x) for x in getattr(self, k)))
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.algo in ALGOS, f"algo must be one of {ALGOS}"),
            (self.env in ENVS, f"env must be one of {ENVS}"),
            (self.q_agg in Q_AGGS, f"q_agg must be one of {Q_AGGS}"),
            (self.advantage is None or self.advantage in ADVANTAGES, f"advantage must be one of {ADVANTAGES}"),
            (self.actor_schedule in SCHEDULES and self.critic_schedule in SCHEDULES, "unknown schedule"),
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (0.0 < self.gamma_denoise <= 1.0, "gamma_denoise must lie in (0, 1]"),
            (self.h >= 1 and self.K >= 1, "h and K must be >= 1"),
            (self.sigma > 0, "sigma must be positive for training"),
            (self.M >= 1 and self.G >= 2 and self.N_batch >= 1, "need M >= 1, G >= 2, N_batch >= 1"),
            (self.n_vr >= 1, "n_vr must be >= 1"),
            (self.clip_eps > 0, "clip_eps must be positive"),
            (0.0 <= self.tau <= 1.0 and 0.0 <= self.tau_slow <= 1.0, "EMA rates must lie in [0, 1]"),
            (0.0 <= self.r_offline <= 1.0, "r_offline must lie in [0, 1]"),
            (self.alpha > 0 and self.beta_awr > 0 and self.beta_init >= 0, "alpha, beta_awr > 0 and beta_init >= 0"),
            (self.best_of_n is None or self.best_of_n >= 0, "best_of_n must be >= 0"),
            (self.online_steps >= 0 and self.offline_steps >= 0, "step budgets must be >= 0"),
            (self.eval_episodes >= 1 and self.bc_eval_episodes >= 1, "eval episode counts must be >= 1"),
            (min(self.utd_q, self.utd_pi, self.utd_warmup) >= 0, "utd ratios must be >= 0"),
            (self.replay_capacity >= 1, "replay capacity must be >= 1"),
            (0.0 < self.demo_target < 1.0, "demo_target must lie in (0, 1)"),
            (self.stop_success is None or 0.0 < self.stop_success <= 1.0, "stop_success must lie in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        bon = self.best_of_n if self.best_of_n is not None else PRESETS.get(self.algo, {}).get("best_of_n", 0)
        if self.algo == "qc" or bon > 1:
            if self.M < 2:
                raise ValueError("Best-of-N scoring needs M >= 2")

    def resolved(self) -> "TrainerConfig":
        """Copy with every algorithm preset materialised."""
        preset = {**PRESET_DEFAULTS, **PRESETS.get(self.algo, {})}
        updates = {k: v for k, v in preset.items() if getattr(self, k) is None}
        return dataclasses.replace(self, **updates)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("actor_hidden", "denoiser_hidden", "critic_hidden"):
            d[k] = list(d[k])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved().to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainerConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")
