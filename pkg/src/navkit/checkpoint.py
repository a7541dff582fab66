"""Checkpoint container for policy parameters and optimizer state.

Binary layout (documented in docs/checkpoint_format.md, stable across
releases):

    bytes 0..3    magic ``NVKT``
    bytes 4..7    schema version, little-endian uint32 (currently 1)
    bytes 8..15   header length ``n``, little-endian uint64
    bytes 16..16+n JSON header (utf-8)
    remainder     concatenated little-endian float32 payloads

The header lists every tensor (name, shape, byte offset into the payload
region) for the parameters and, when present, the Adam first/second moment
accumulators, plus the optimizer scalars and free-form metadata.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .tensor import AdamState

MAGIC = b"NVKT"
SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable or schema-incompatible checkpoint file."""


def _pack(arrays):
    specs = []
    chunks = []
    offset = 0
    for name, arr in arrays:
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        specs.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(payload)})
        chunks.append(payload)
        offset += len(payload)
    return specs, b"".join(chunks)


def save_checkpoint(path, named_params, adam=None, meta=None):
    """Write parameters (and optionally Adam state) to ``path``.

    named_params: iterable of (name, Tensor) pairs in a stable order.
    """
    entries = [(name, p.data) for name, p in named_params]
    names = [name for name, _ in entries]
    adam_header = None
    if adam is not None:
        for name, m, v in zip(names, adam.m, adam.v):
            entries.append((f"adam.m.{name}", m))
            entries.append((f"adam.v.{name}", v))
        adam_header = {
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "step": adam.step_count,
        }
    specs, payload = _pack(entries)
    header = {
        "schema": SCHEMA_VERSION,
        "tensors": specs,
        "param_names": names,
        "adam": adam_header,
        "meta": meta or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", SCHEMA_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, adam, meta).

    params maps name -> float64 ndarray; adam is None or a dict with the
    optimizer scalars plus ``m``/``v`` arrays keyed by parameter name.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    body = raw[16 + hlen:]

    tensors = {}
    for spec in header["tensors"]:
        chunk = body[spec["offset"]:spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(spec["shape"])
        tensors[spec["name"]] = arr

    params = {name: tensors[name] for name in header["param_names"]}
    adam = None
    if header.get("adam") is not None:
        adam = dict(header["adam"])
        adam["m"] = {name: tensors[f"adam.m.{name}"] for name in header["param_names"]}
        adam["v"] = {name: tensors[f"adam.v.{name}"] for name in header["param_names"]}
    return params, adam, header.get("meta", {})


def restore_into(named_params, params, strict=True):
    """Copy loaded arrays into live parameter tensors by name."""
    live = dict(named_params)
    missing = [k for k in live if k not in params]
    extra = [k for k in params if k not in live]
    if strict and (missing or extra):
        raise CheckpointError(f"parameter name mismatch: missing={missing[:3]} extra={extra[:3]}")
    for name, tensor in live.items():
        if name in params:
            arr = params[name]
            if tuple(arr.shape) != tensor.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} does not match model {tensor.shape}")
            tensor.data = arr.astype(np.float64)


def restore_adam(adam_dict, named_params, lr=None):
    """Rebuild an AdamState from a loaded checkpoint dict."""
    params = [p for _, p in named_params]
    names = [n for n, _ in named_params]
    state = AdamState(
        params,
        lr=lr if lr is not None else adam_dict["lr"],
        beta1=adam_dict["beta1"],
        beta2=adam_dict["beta2"],
        eps=adam_dict["eps"],
    )
    state.step_count = int(adam_dict["step"])
    state.m = [adam_dict["m"][n].copy() for n in names]
    state.v = [adam_dict["v"][n].copy() for n in names]
    return state
