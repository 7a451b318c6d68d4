"""Command-line entry point: ``python -m ogpo <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checks, flow, trainer
from .config import ALGOS, ENVS, TrainerConfig
from .critic import q_eval
from .envs import make_env
from .io import MetricsWriter, export_learning_curve, load_checkpoint, load_dataset, save_dataset
from .rng import stream

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
COMMANDS = ("gen-demos", "pretrain-bc", "train", "eval", "gradcheck", "marginal-check", "chi2-check", "td-check",
            "export-actions")


STEPS_KEYS = {"train": "online_steps", "pretrain-bc": "offline_steps", "gen-demos": "demo_episodes"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ogpo", description="Off-policy generative policy optimisation at desk scale.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON file with TrainerConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--env", choices=ENVS)
    p.add_argument("--algo", choices=ALGOS)
    p.add_argument("--out", type=Path, help="output directory (default: $OGPO_OUT or ./runs)")
    p.add_argument("--steps", type=int, help="step budget of the command (online, offline or episodes)")
    p.add_argument("--checkpoint", type=Path, help="BC checkpoint (train) or trained checkpoint (eval, export)")
    p.add_argument("--force", action="store_true", help="load checkpoints despite algo/config mismatch")
    p.add_argument("--episodes", type=int, help="evaluation episodes (eval)")
    p.add_argument("--states", type=Path, help="JSON list of observations (export-actions)")
    p.add_argument("--n", type=int, default=16, help="samples per state (export-actions)")
    p.add_argument("--points", type=int, default=10, help="random points per loss head (gradcheck)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> TrainerConfig:
    d = {}
    if args.config is not None:
        with open(args.config) as fh:
            d = json.load(fh)
    for flag in ("seed", "env", "algo"):
        if getattr(args, flag) is not None:
            d[flag] = getattr(args, flag)
    if args.steps is not None:
        d[STEPS_KEYS[args.command]] = args.steps
    try:
        return TrainerConfig.from_dict(d)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid config: {err}") from None


def _out(args) -> Path:
    out = args.out or Path(os.environ.get("OGPO_OUT", "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report(results) -> int:
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# -- subcommands ----------------------------------------------------------------


def cmd_gen_demos(args) -> int:
    cfg = _config(args).resolved()
    out = _out(args)
    episodes, noise = trainer.make_demos(cfg)
    env = make_env(cfg.env)
    rate = float(np.mean([e.success for e in episodes]))
    save_dataset(out / "demos.jsonl", episodes, cfg.env, env.spec.obs_dim, env.spec.act_dim, cfg.h,
                 {"noise_std": noise, "seed": cfg.seed})
    with MetricsWriter(out / "metrics.jsonl") as w:
        w.write({"phase": "demos", "step": len(episodes), "noise_std": noise, "success_rate": rate})
    print(json.dumps({"episodes": len(episodes), "noise_std": noise, "success_rate": rate}))
    return EXIT_OK


def cmd_pretrain_bc(args) -> int:
    cfg = _config(args).resolved()
    out = _out(args)
    cfg.save(out / "resolved-config.json")
    if args.checkpoint is not None:
        _, episodes = load_dataset(args.checkpoint)
        noise = None
    else:
        episodes, noise = trainer.make_demos(cfg)
    with MetricsWriter(out / "metrics.jsonl") as w:
        policy, info = trainer.pretrain_bc(cfg, episodes, w)
    trainer.save_bc_checkpoint(out / "bc.ckpt", policy, cfg, {**info, "demo_noise": noise})
    print(json.dumps({k: info[k] for k in ("step", "success_rate", "in_band")}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    result = trainer.run(cfg, _out(args), bc_checkpoint=args.checkpoint, force=args.force)
    export_learning_curve(_out(args) / "metrics.jsonl", _out(args) / "learning-curve.csv")
    last = result["evals"][-1] if result["evals"] else {}
    print(json.dumps({"env_steps": result["env_steps"], "success_rate": last.get("success_rate"),
                      "aborted": result["aborted"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise UsageError("eval needs --checkpoint")
    cfg = _config(args).resolved()
    state = trainer.load_state(args.checkpoint, cfg, args.force)
    episodes = args.episodes or cfg.eval_episodes
    ev = trainer.evaluate(state, episodes, stream(cfg.seed, "eval-cli"))
    with MetricsWriter(_out(args) / "metrics.jsonl") as w:
        w.write({"phase": "eval", "step": 0, **ev})
    print(json.dumps(ev))
    return EXIT_OK


def cmd_export_actions(args) -> int:
    if args.checkpoint is None or args.states is None:
        raise UsageError("export-actions needs --checkpoint and --states")
    cfg = _config(args).resolved()
    state = trainer.load_state(args.checkpoint, cfg, args.force)
    with open(args.states) as fh:
        states = np.atleast_2d(np.asarray(json.load(fh), dtype=np.float64))
    path = _out(args) / "actions.csv"
    n = export_actions(state, states, args.n, stream(cfg.seed, "export"), path)
    print(json.dumps({"rows": n, "path": str(path)}))
    return EXIT_OK


def export_actions(state, states: np.ndarray, n: int, rng, path) -> int:
    """Write ``n`` corrected-SDE samples per state with the per-member target-critic values."""
    obs_dim = state.policy.obs_dim
    if states.size and states.shape[1] != obs_dim:
        raise ValueError(f"states have dim {states.shape[1]}, policy expects {obs_dim}")
    d, M = state.policy.act_dim, state.critic.M
    header = [f"a{i}" for i in range(d)] + [f"q{m}" for m in range(M)]
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        if n > 0 and states.size:
            s = np.repeat(states, n, axis=0)
            a = flow.sample_sde(state.ema, s, rng).action
            q = q_eval(state.critic, s, a, use_targets=True).T
            for row in np.concatenate([a, q], axis=1):
                w.writerow([repr(float(x)) for x in row])
            rows = len(s)
    return rows


def cmd_gradcheck(args) -> int:
    return _report(checks.gradcheck(points=args.points))


def cmd_marginal(args) -> int:
    return _report([checks.marginal_check(seed=args.seed or 0)])


def cmd_chi2(args) -> int:
    return _report([checks.chi2_check(seed=args.seed or 0)])


def cmd_td(args) -> int:
    return _report([checks.td_check(seed=args.seed or 0)])


HANDLERS = {
    "gen-demos": cmd_gen_demos,
    "pretrain-bc": cmd_pretrain_bc,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "marginal-check": cmd_marginal,
    "chi2-check": cmd_chi2,
    "td-check": cmd_td,
    "export-actions": cmd_export_actions,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.steps is not None and args.command not in STEPS_KEYS:
        print(f"ogpo: error: --steps has no meaning for {args.command}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return HANDLERS[args.command](args)
    except UsageError as err:
        print(f"ogpo: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # noqa: BLE001
        print(f"ogpo: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
