"""Binary checkpoint format for named float32 tensors.

Layout: magic "ICOL", u32 version, u64 header length, JSON header, then the
raw little-endian float32 payload. The header lists tensors in payload
order with non-overlapping offsets and may carry a model-config echo plus
free-form metadata. save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .model import LayerWeights, ModelConfig, ModelWeights
from .tensor import ContractViolation, Tensor

__all__ = [
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "read_header",
    "save_model_weights",
    "load_model_weights",
]

MAGIC = b"ICOL"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or unsupported checkpoint file."""


def _as_array(value: Union[Tensor, np.ndarray]) -> np.ndarray:
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    return np.ascontiguousarray(data, dtype="<f4")


def save_checkpoint(path, tensors: dict, model_config: Optional[ModelConfig] = None,
                    meta: Optional[dict] = None) -> None:
    """Write named tensors (Tensor or ndarray values) in dictionary order."""
    entries = []
    offset = 0
    arrays = []
    for name, value in tensors.items():
        arr = _as_array(value)
        entries.append({"name": str(name), "shape": list(arr.shape),
                        "offset": offset, "nbytes": arr.nbytes})
        arrays.append(arr)
        offset += arr.nbytes
    header = {
        "tensors": entries,
        "model_config": model_config.to_dict() if model_config is not None else None,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for arr in arrays:
            fh.write(arr.tobytes())


def _read_raw(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != VERSION:
            raise CheckpointError(
                f"checkpoint version {version} is not supported (expected {VERSION}); "
                "re-export the checkpoint with a matching library version")
        header_len = struct.unpack("<Q", fh.read(8))[0]
        raw = fh.read(header_len)
        if len(raw) != header_len:
            raise CheckpointError("truncated header")
        payload = fh.read()
    return json.loads(raw), payload


def read_header(path) -> dict:
    header, _ = _read_raw(path)
    return header


def load_checkpoint(path) -> dict:
    """Return {"tensors": {name: float32 array}, "model_config": ..., "meta": ...}."""
    header, payload = _read_raw(path)
    entries = header["tensors"]
    expected = 0
    for e in entries:
        if e["offset"] != expected:
            raise CheckpointError(
                f"tensor {e['name']!r} at offset {e['offset']}, expected {expected}: "
                "offsets must be contiguous and in header order")
        expected += e["nbytes"]
    if len(payload) != expected:
        raise CheckpointError(
            f"payload is {len(payload)} bytes, header declares {expected}")
    tensors = {}
    for e in entries:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        tensors[e["name"]] = arr
    config = header.get("model_config")
    return {
        "tensors": tensors,
        "model_config": ModelConfig.from_dict(config) if config else None,
        "meta": header.get("meta", {}),
    }


_LAYER_FIELDS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w2")


def save_model_weights(path, weights: ModelWeights, meta: Optional[dict] = None) -> None:
    tensors = {name: t for name, t in weights.named_tensors()}
    save_checkpoint(path, tensors, model_config=weights.config, meta=meta)


def load_model_weights(path) -> ModelWeights:
    ckpt = load_checkpoint(path)
    config = ckpt["model_config"]
    if config is None:
        raise CheckpointError("checkpoint has no model config; cannot rebuild weights")
    tensors = ckpt["tensors"]

    def take(name):
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        return Tensor(tensors[name], requires_grad=False)

    layers = []
    for i in range(config.n_layers):
        layers.append(LayerWeights(**{f: take(f"layers.{i}.{f}") for f in _LAYER_FIELDS}))
    return ModelWeights(
        config=config,
        embedding=take("embedding"),
        layers=layers,
        final_norm=take("final_norm"),
        unembedding=take("unembedding"),
    )


def checkpoints_identical(path_a, path_b) -> bool:
    return Path(path_a).read_bytes() == Path(path_b).read_bytes()
