"""Learning-curve experiments on PointReach and the directional comparisons computed from them.

Each run leaves a JSON summary under ``<results>/runs``. The comparison functions
read only those summaries, so they can be re-evaluated without retraining.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import trainer
from .checks import CheckResult
from .config import TrainerConfig
from .io import read_manifest

SEEDS = (0, 1, 2)
BUDGET = 150_000
EARLY_FRACTION = 0.2
FINAL_WINDOW = 5  # evals averaged into the final success rate
TIME_LIMIT = 1800.0  # CPU seconds per OGPO+ seed


@dataclass(frozen=True)
class RunPlan:
    name: str
    overrides: dict

    def config(self, seed: int) -> TrainerConfig:
        return TrainerConfig(seed=seed, **{"online_steps": BUDGET, **self.overrides})


PLANS = {
    "ogpo-plus": RunPlan("ogpo-plus", {"algo": "ogpo-plus"}),
    "qc": RunPlan("qc", {"algo": "qc"}),
    "awr": RunPlan("awr", {"algo": "awr"}),
    "bptt": RunPlan("bptt", {"algo": "bptt"}),
    # on-policy baseline: stops at the first eval reaching 80%, capped at 4x the budget
    "dppo": RunPlan("dppo", {"algo": "dppo", "online_steps": 4 * BUDGET, "stop_success": 0.8}),
    # dip comparison only needs the first 20% of training
    "ogpo": RunPlan("ogpo", {"algo": "ogpo", "online_steps": int(EARLY_FRACTION * BUDGET)}),
    "ogpo-ca": RunPlan("ogpo-ca", {"algo": "ogpo-ca", "online_steps": int(EARLY_FRACTION * BUDGET)}),
}


def bc_checkpoint(results: Path, seed: int) -> Path:
    """Shared BC checkpoint for ``seed``; every algorithm fine-tunes the same one."""
    path = Path(results) / "bc" / f"seed{seed}.ckpt"
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        cfg = TrainerConfig(seed=seed).resolved()
        episodes, noise = trainer.make_demos(cfg)
        policy, info = trainer.pretrain_bc(cfg, episodes)
        trainer.save_bc_checkpoint(path, policy, cfg, {**info, "demo_noise": noise})
    return path


def summary_path(results: Path, name: str, seed: int) -> Path:
    return Path(results) / "runs" / f"{name}-s{seed}.json"


def run_one(results: Path, name: str, seed: int, force: bool = False) -> dict:
    """Train one (plan, seed) pair unless its summary already exists."""
    out = summary_path(results, name, seed)
    if out.exists() and not force:
        return json.loads(out.read_text())
    ckpt = bc_checkpoint(results, seed)
    cfg = PLANS[name].config(seed)
    t0 = time.perf_counter()
    res = trainer.run(cfg, Path(results) / "runs" / f"{name}-s{seed}", bc_checkpoint=ckpt)
    summary = {
        "name": name, "algo": cfg.algo, "seed": seed, "online_steps": cfg.online_steps,
        "evals": [[r["step"], r["success_rate"]] for r in res["evals"]],
        "aborted": res["aborted"], "max_grad_norm": res["max_grad_norm"], "env_steps": res["env_steps"],
        "cpu_seconds": res["cpu_seconds"], "wall_seconds": time.perf_counter() - t0,
        "bc_success": read_manifest(ckpt)["meta"]["success_rate"],
    }
    out.write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def load_summaries(results: Path) -> dict[str, list[dict]]:
    found: dict[str, list[dict]] = {}
    for path in sorted((Path(results) / "runs").glob("*-s*.json")):
        s = json.loads(path.read_text())
        found.setdefault(s["name"], []).append(s)
    return found


# -- curve statistics -------------------------------------------------------------------


def final_success(summary: dict, window: int = FINAL_WINDOW) -> float:
    """Mean of the last ``window`` evals at or below the budget."""
    rates = [r for step, r in summary["evals"] if step <= BUDGET]
    return float(np.mean(rates[-window:]))


def first_reach(summary: dict, level: float, cap: int) -> int:
    """First eval step at or above ``level``; ``cap`` when never reached."""
    for step, r in summary["evals"]:
        if r >= level:
            return int(step)
    return cap


def early_min(summary: dict, fraction: float = EARLY_FRACTION) -> float:
    horizon = fraction * BUDGET
    return float(min(r for step, r in summary["evals"] if step <= horizon))


def _need(found: dict, *names) -> str | None:
    missing = [f"{n} ({len(found.get(n, []))}/{len(SEEDS)})" for n in names if len(found.get(n, [])) < len(SEEDS)]
    return "missing runs: " + ", ".join(missing) if missing else None


def _by_seed(runs: list[dict]) -> dict[int, dict]:
    return {r["seed"]: r for r in runs}


# -- comparisons --------------------------------------------------------------------------


def learning(found: dict) -> CheckResult:
    name = "6 desk-scale learning"
    if err := _need(found, "ogpo-plus"):
        return CheckResult(name, False, {"error": err})
    runs = found["ogpo-plus"]
    bc = [r["bc_success"] for r in runs]
    finals = [final_success(r) for r in runs]
    cpu = [r["cpu_seconds"] for r in runs]
    ok = all(0.45 <= b <= 0.55 for b in bc) and np.median(finals) >= 0.9 and max(cpu) < TIME_LIMIT
    return CheckResult(name, bool(ok), {"bc_success": bc, "final_success": [round(f, 3) for f in finals],
                                        "median_final": float(np.median(finals)),
                                        "max_cpu_s": round(max(cpu), 1)})


def dppo_efficiency(found: dict) -> CheckResult:
    name = "7 DPPO sample efficiency"
    if err := _need(found, "ogpo-plus", "dppo"):
        return CheckResult(name, False, {"error": err})
    cap = PLANS["dppo"].overrides["online_steps"]
    ours = [first_reach(r, 0.8, BUDGET) for r in found["ogpo-plus"]]
    theirs = [first_reach(r, 0.8, cap) for r in found["dppo"]]
    ratio = float(np.median(theirs)) / max(1.0, float(np.median(ours)))
    return CheckResult(name, ratio >= 3.0, {"ogpo_plus_steps": ours, "dppo_steps": theirs, "ratio": ratio})


def extraction(found: dict) -> CheckResult:
    name = "8 extraction comparison"
    if err := _need(found, "ogpo-plus", "qc", "awr"):
        return CheckResult(name, False, {"error": err})
    plus, qc = _by_seed(found["ogpo-plus"]), _by_seed(found["qc"])
    wins = sum(final_success(plus[s]) >= final_success(qc[s]) for s in SEEDS)
    awr = [final_success(r) for r in found["awr"]]
    awr_fail = sum(f <= 0.75 for f in awr)
    return CheckResult(name, wins >= 2 and awr_fail >= 2,
                       {"ogpo_plus_beats_qc": f"{wins}/3", "qc_final": [round(final_success(qc[s]), 3) for s in SEEDS],
                        "awr_final": [round(f, 3) for f in awr], "awr_at_most_75": f"{awr_fail}/3"})


def bptt_instability(found: dict) -> CheckResult:
    name = "9 BPTT instability"
    if err := _need(found, "ogpo-plus", "bptt"):
        return CheckResult(name, False, {"error": err})
    plus_median = float(np.median([final_success(r) for r in found["ogpo-plus"]]))
    bad = [r["aborted"] is not None or final_success(r) <= plus_median - 0.2 for r in found["bptt"]]
    g_bptt = float(np.median([r["max_grad_norm"] for r in found["bptt"]]))
    g_plus = float(np.median([r["max_grad_norm"] for r in found["ogpo-plus"]]))
    ok = sum(bad) >= 2 and g_bptt >= 10.0 * g_plus
    return CheckResult(name, bool(ok), {"unstable_or_behind": f"{sum(bad)}/3",
                                        "bptt_final": [round(final_success(r), 3) for r in found["bptt"]],
                                        "aborted": [r["aborted"] is not None for r in found["bptt"]],
                                        "grad_norm_ratio": g_bptt / max(g_plus, 1e-12)})


def dip_mitigation(found: dict) -> CheckResult:
    name = "10 conservative-advantage dip"
    if err := _need(found, "ogpo", "ogpo-ca"):
        return CheckResult(name, False, {"error": err})
    vanilla = [early_min(r) for r in found["ogpo"]]
    ca = [early_min(r) for r in found["ogpo-ca"]]
    ok = np.median(ca) >= np.median(vanilla)
    return CheckResult(name, bool(ok), {"ogpo_min": vanilla, "ogpo_ca_min": ca})


COMPARISONS = (learning, dppo_efficiency, extraction, bptt_instability, dip_mitigation)


def evaluate_all(results: Path) -> list[CheckResult]:
    found = load_summaries(results)
    return [f(found) for f in COMPARISONS]
