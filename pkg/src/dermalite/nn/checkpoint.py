"""Checkpoints: a JSON manifest plus a flat little-endian float32 blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .network import NetworkConfig, NetworkParams, param_shapes, state_shapes

FORMAT = "dermalite-checkpoint/1"


def save_checkpoint(params: NetworkParams, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` and ``<prefix>.bin``; returns both paths."""
    prefix = Path(prefix)
    manifest_path, blob_path = prefix.with_suffix(".json"), prefix.with_suffix(".bin")
    tensors, chunks, offset = [], [], 0
    for kind, group in (("param", params.weights), ("state", params.state)):
        for name, arr in group.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            tensors.append({"name": name, "kind": kind, "shape": list(a.shape),
                            "offset": offset, "count": int(a.size)})
            chunks.append(a.tobytes())
            offset += a.size
    manifest = {"format": FORMAT, "dtype": "float32", "byte_order": "little",
                "seed": params.seed, "config": params.config.to_dict(),
                "blob": blob_path.name, "tensors": tensors}
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path, blob_path


def load_checkpoint(manifest_path) -> NetworkParams:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
        cfg = NetworkConfig(**manifest["config"])
        blob = np.frombuffer((manifest_path.parent / manifest["blob"]).read_bytes(), dtype="<f4")
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {manifest_path}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    expected = {"param": param_shapes(cfg), "state": state_shapes(cfg)}
    groups = {"param": {}, "state": {}}
    for t in manifest["tensors"]:
        want = expected.get(t["kind"], {}).get(t["name"])
        if want is None or tuple(t["shape"]) != tuple(want):
            raise CheckpointError(f"{t['name']}: shape {t['shape']} does not match config ({want})")
        if t["offset"] + t["count"] > blob.size:
            raise CheckpointError(f"{t['name']}: blob too short")
        groups[t["kind"]][t["name"]] = blob[t["offset"]:t["offset"] + t["count"]].reshape(want).astype(np.float32)
    for kind, names in expected.items():
        missing = set(names) - set(groups[kind])
        if missing:
            raise CheckpointError(f"checkpoint lacks {sorted(missing)}")
    weights = {n: groups["param"][n] for n in expected["param"]}
    state = {n: groups["state"][n] for n in expected["state"]}
    return NetworkParams(cfg, weights, state, manifest.get("seed"))
