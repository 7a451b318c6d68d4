"""Checkpoint, dataset and metrics file formats.

Checkpoint layout: an 8-byte little-endian manifest length, the JSON manifest,
then one little-endian float64 blob. The manifest lists every array with its
shape and byte offset; offsets tile the blob exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1
CURVE_COLUMNS = ("step", "success_rate", "mean_succ_len", "mean_return")


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, arrays: dict[str, np.ndarray], algo: str, config_hash: str, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = {"version": CHECKPOINT_VERSION, "algo": algo, "config_hash": config_hash, "meta": meta or {},
                "arrays": entries, "blob_bytes": offset}
    head = _dumps(manifest)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise CheckpointError("truncated checkpoint header")
        (n,) = struct.unpack("<Q", raw)
        head = fh.read(n)
    if len(head) != n:
        raise CheckpointError("truncated checkpoint manifest")
    return json.loads(head)


def load_checkpoint(path, algo: str | None = None, config_hash: str | None = None, force: bool = False):
    """Return ``(arrays, manifest)``; nothing is returned unless the whole file validates."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", data[:8])
    if len(data) < 8 + n:
        raise CheckpointError("truncated checkpoint manifest")
    manifest = json.loads(data[8:8 + n])
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    blob = data[8 + n:]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest expects {manifest['blob_bytes']}")
    expect = 0
    for e in manifest["arrays"]:
        if e["offset"] != expect or e["nbytes"] != 8 * math.prod(e["shape"]):
            raise CheckpointError(f"manifest entry {e['name']} does not tile the blob")
        expect += e["nbytes"]
    if expect != len(blob):
        raise CheckpointError("manifest entries do not cover the blob")
    if not force:
        if algo is not None and manifest["algo"] != algo:
            raise CheckpointError(f"checkpoint algo {manifest['algo']!r} != {algo!r} (use --force)")
        if config_hash is not None and manifest["config_hash"] != config_hash:
            raise CheckpointError("config hash mismatch (use --force)")
    arrays = {}
    for e in manifest["arrays"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return arrays, manifest


# -- datasets -------------------------------------------------------------------


def save_dataset(path, episodes, env: str, obs_dim: int, act_dim: int, h: int, meta: dict | None = None) -> None:
    header = {"env": env, "obs_dim": obs_dim, "act_dim": act_dim, "h": h, "episodes": len(episodes), **(meta or {})}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ep in episodes:
            rec = {"obs": ep.obs.tolist(), "actions": ep.actions.tolist(), "rewards": ep.rewards.tolist(),
                   "success": bool(ep.success),
                   "final_obs": None if ep.final_obs is None else ep.final_obs.tolist()}
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path):
    from .envs import Episode

    with open(path) as fh:
        header = json.loads(fh.readline())
        episodes = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            obs = np.asarray(rec["obs"], dtype=np.float64).reshape(-1, header["obs_dim"])
            acts = np.asarray(rec["actions"], dtype=np.float64).reshape(-1, header["act_dim"] * header["h"])
            rews = np.asarray(rec["rewards"], dtype=np.float64).reshape(-1, header["h"])
            if not (len(obs) == len(acts) == len(rews)):
                raise ValueError("episode arrays have mismatched lengths")
            fin = rec.get("final_obs")
            fin = None if fin is None else np.asarray(fin, dtype=np.float64)
            episodes.append(Episode(obs, acts, rews, bool(rec["success"]), fin))
    if len(episodes) != header["episodes"]:
        raise ValueError(f"header promises {header['episodes']} episodes, found {len(episodes)}")
    return header, episodes


# -- metrics --------------------------------------------------------------------


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


class MetricsWriter:
    """Append-only JSONL sink; one flushed line per record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")
        self._last: dict[str, int] = {}

    def write(self, record: dict) -> None:
        if "step" not in record or "phase" not in record:
            raise ValueError("metrics records need 'step' and 'phase'")
        phase, step = record["phase"], int(record["step"])
        if step < self._last.get(phase, -1):
            raise ValueError(f"step went backwards in phase {phase!r}")
        self._last[phase] = step
        self._fh.write(json.dumps({k: _clean(v) for k, v in record.items()}) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def export_learning_curve(metrics_path, csv_path, phase: str = "eval") -> int:
    """Write eval records as CSV; returns the number of rows."""
    rows = [r for r in read_metrics(metrics_path) if r.get("phase") == phase]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in CURVE_COLUMNS])
    return len(rows)
