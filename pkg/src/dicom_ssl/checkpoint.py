"""Checkpoint files: ``manifest.json`` (tensor index, counters, config) plus
one raw little-endian float32 blob ``tensors.bin``.

Each manifest tensor record is ``{name, shape, dtype, offset, nbytes, sha256}``.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ShapeMismatchError

FORMAT = "dicom-ssl-checkpoint"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


def write_tensors(path, tensors: dict, meta: dict):
    """Write ``tensors`` (name -> tensor/array) in insertion order."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = []
    offset = 0
    tmp_blob = path / (BLOB + ".tmp")
    with tmp_blob.open("wb") as fh:
        for name, value in tensors.items():
            arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
            payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(payload)
            records.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "offset": offset, "nbytes": len(payload),
                            "sha256": hashlib.sha256(payload).hexdigest()})
            offset += len(payload)
    manifest = {"format": FORMAT, "version": FORMAT_VERSION, **meta, "tensors": records}
    tmp_manifest = path / (MANIFEST + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp_blob, path / BLOB)
    os.replace(tmp_manifest, path / MANIFEST)
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise CheckpointError(f"checkpoint manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{mpath}: unreadable manifest: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath}: not a {FORMAT} manifest")
    return manifest


def read_tensors(path, names=None) -> tuple[dict, dict]:
    """Return (manifest, name -> float32 tensor), verifying sizes and hashes."""
    path = Path(path)
    manifest = read_manifest(path)
    blob_path = path / BLOB
    if not blob_path.is_file():
        raise CheckpointError(f"checkpoint blob not found: {blob_path}")
    blob = blob_path.read_bytes()
    out = {}
    for rec in manifest["tensors"]:
        name = rec["name"]
        if names is not None and name not in names:
            continue
        end = rec["offset"] + rec["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"tensor {name!r}: blob truncated "
                                  f"({len(blob)} bytes, need {end})")
        payload = blob[rec["offset"]:end]
        if hashlib.sha256(payload).hexdigest() != rec["sha256"]:
            raise CheckpointError(f"tensor {name!r}: content hash mismatch")
        expected = int(np.prod(rec["shape"], dtype=np.int64)) * 4
        if expected != rec["nbytes"]:
            raise CheckpointError(f"tensor {name!r}: shape {rec['shape']} disagrees with "
                                  f"{rec['nbytes']} bytes")
        arr = np.frombuffer(payload, dtype="<f4").reshape(rec["shape"]).copy()
        out[name] = torch.from_numpy(arr)
    return manifest, out


def check_shapes(expected: dict, found: dict, prefix=""):
    """Raise ShapeMismatchError listing every missing or mis-shaped tensor."""
    problems = []
    for name, shape in expected.items():
        if name not in found:
            problems.append(f"{prefix}{name}: missing from checkpoint")
        elif tuple(found[name]) != tuple(shape):
            problems.append(f"{prefix}{name}: checkpoint {tuple(found[name])} vs model {tuple(shape)}")
    if problems:
        raise ShapeMismatchError(problems)


def load_module(module: torch.nn.Module, path, prefix):
    """Load ``prefix.*`` tensors of a checkpoint into ``module`` (shape-checked)."""
    manifest = read_manifest(path)
    shapes = {r["name"][len(prefix):]: r["shape"] for r in manifest["tensors"]
              if r["name"].startswith(prefix)}
    expected = {k: tuple(v.shape) for k, v in module.state_dict().items()}
    check_shapes(expected, shapes, prefix)
    _, tensors = read_tensors(path, {prefix + k for k in expected})
    state = {k: tensors[prefix + k].to(v.dtype) for k, v in module.state_dict().items()}
    module.load_state_dict(state)
    return manifest
