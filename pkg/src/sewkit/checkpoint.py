"""Checkpoints: a JSON manifest plus one raw blob of little-endian float32.

A checkpoint is a directory holding ``manifest.json`` and ``params.bin``.
The manifest records the format version, the flat model config, the
training step, RNG states, and a tensor table (name, shape, float offset)
in blob order; the blob is the concatenation of all tensors as little-
endian 32-bit floats. Saving is canonical (sorted tensor names, sorted
JSON keys), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


@dataclass
class CheckpointData:
    config_flat: dict
    tensors: Dict[str, np.ndarray]
    step: int = 0
    kind: str = "pretrained"  # or "finetuned"
    rng_state: Optional[dict] = None
    vocab: Optional[str] = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, data: CheckpointData) -> None:
    os.makedirs(path, exist_ok=True)
    names = sorted(data.tensors)
    table = []
    offset = 0
    chunks = []
    for name in names:
        arr = np.ascontiguousarray(data.tensors[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": data.config_flat,
        "step": data.step,
        "kind": data.kind,
        "rng_state": data.rng_state,
        "vocab": data.vocab,
        "meta": data.meta,
        "total_floats": offset,
        "tensors": table,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, BLOB_NAME), "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> CheckpointData:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    blob_path = os.path.join(path, BLOB_NAME)
    if not os.path.exists(manifest_path) or not os.path.exists(blob_path):
        raise DataError(f"{path} is not a checkpoint directory", field="path")
    with open(manifest_path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest is not valid JSON: {exc}", field="manifest") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format version "
                        f"{manifest.get('format_version')}", field="format_version")
    blob = np.frombuffer(open(blob_path, "rb").read(), dtype="<f4")
    declared = sum(int(np.prod(entry["shape"])) for entry in manifest["tensors"])
    if declared != blob.size or manifest.get("total_floats") != blob.size:
        raise DataError(f"blob holds {blob.size} floats but the manifest "
                        f"declares {declared}", field="total_floats")
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        start = entry["offset"]
        if start + n > blob.size:
            raise DataError(f"tensor {entry['name']} overruns the blob", field=entry["name"])
        tensors[entry["name"]] = blob[start:start + n].reshape(shape).copy()
    return CheckpointData(
        config_flat=manifest["config"],
        tensors=tensors,
        step=manifest.get("step", 0),
        kind=manifest.get("kind", "pretrained"),
        rng_state=manifest.get("rng_state"),
        vocab=manifest.get("vocab"),
        meta=manifest.get("meta", {}),
    )


def tensors_of(named_params) -> Dict[str, np.ndarray]:
    return {name: p.data for name, p in named_params}


def restore_params(named_params, tensors: Dict[str, np.ndarray], strict=True) -> None:
    """Copy checkpoint arrays into parameters, validating names and shapes."""
    params = dict(named_params)
    for name, p in params.items():
        if name not in tensors:
            if strict:
                raise DataError(f"checkpoint is missing tensor {name!r}", field=name)
            continue
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise DataError(f"tensor {name!r} has shape {list(arr.shape)} but the model "
                            f"expects {list(p.shape)}", field=name)
        p.data = arr.astype(p.data.dtype)
    if strict:
        unknown = set(tensors) - set(params)
        if unknown:
            raise DataError(f"checkpoint holds unknown tensors: {sorted(unknown)[:4]}",
                            field="tensors")


def check_config_match(config_flat: dict, manifest_flat: dict) -> None:
    if {k: str(v) for k, v in config_flat.items()} != {k: str(v) for k, v in manifest_flat.items()}:
        diff = {k for k in set(config_flat) | set(manifest_flat)
                if str(config_flat.get(k)) != str(manifest_flat.get(k))}
        raise DataError(f"checkpoint config does not match the model config "
                        f"(differs at {sorted(diff)[:4]})", field="config")
