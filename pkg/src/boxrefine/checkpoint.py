"""Denoiser checkpoint format.

Layout: one newline-terminated JSON header with the format version, the
model config, optional extras (training step, optimizer-state tensor
names, config hash), and a tensor index of (name, shape, byte offset)
entries; then a raw little-endian float32 blob. Weights are stored as
float32 in memory too, so save -> load round-trips bitwise.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, weight_shapes
from .errors import DataError
from .fileio import atomic_write_bytes, dumps_canonical

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(
    weights: dict[str, np.ndarray],
    config: DenoiserConfig,
    path: Path,
    extras: dict | None = None,
    aux_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Write weights (and optional optimizer tensors) to one file."""
    tensors: list[dict] = []
    blobs: list[bytes] = []
    offset = 0
    named = dict(weights)
    for name, arr in (aux_tensors or {}).items():
        named[f"aux.{name}"] = arr
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f4")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "denoiser-checkpoint",
        "config": config.to_dict(),
        "extras": extras or {},
        "tensors": tensors,
        "blob_bytes": offset,
    }
    atomic_write_bytes(Path(path), dumps_canonical(header).encode("utf-8") + b"\n" + b"".join(blobs))


def _read_raw(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format version {header.get('format_version')}")
    blob = raw[nl + 1 :]
    if len(blob) != header.get("blob_bytes"):
        raise DataError(f"{path}: corrupt blob ({len(blob)} bytes, header says {header.get('blob_bytes')})")
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(blob):
            raise DataError(f"{path}: corrupt blob, tensor {entry['name']} out of range")
        tensors[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).copy()
    return header, tensors


def load_checkpoint(
    path: Path, expect_config: DenoiserConfig | None = None
) -> tuple[dict[str, np.ndarray], DenoiserConfig]:
    """Load weights and config; optionally enforce an expected config."""
    header, tensors = _read_raw(path)
    config = DenoiserConfig.from_dict(header["config"])
    weights = {k: v for k, v in tensors.items() if not k.startswith("aux.")}
    for name, shape in weight_shapes(config).items():
        if name not in weights:
            raise DataError(f"{path}: checkpoint is missing tensor {name}")
        if tuple(weights[name].shape) != shape:
            raise DataError(f"{path}: tensor {name} has shape {weights[name].shape}, config expects {shape}")
    if expect_config is not None and config != expect_config:
        mismatches = []
        for name, shape in weight_shapes(expect_config).items():
            stored = tuple(weights[name].shape) if name in weights else None
            if stored != shape:
                mismatches.append(f"{name}: stored {stored} vs expected {shape}")
        detail = "; ".join(mismatches[:3]) if mismatches else "config fields differ"
        raise DataError(f"{path}: checkpoint config mismatch (shape mismatch: {detail})")
    return weights, config


def load_checkpoint_full(path: Path) -> tuple[dict[str, np.ndarray], DenoiserConfig, dict, dict[str, np.ndarray]]:
    """Load weights, config, extras, and auxiliary (optimizer) tensors."""
    header, tensors = _read_raw(path)
    config = DenoiserConfig.from_dict(header["config"])
    weights = {k: v for k, v in tensors.items() if not k.startswith("aux.")}
    aux = {k[4:]: v for k, v in tensors.items() if k.startswith("aux.")}
    return weights, config, header.get("extras", {}), aux
