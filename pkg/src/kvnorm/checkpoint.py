"""Binary checkpoint format.

Layout (all little-endian)::

    b"KVSQ"                       magic
    uint32                        format version (1)
    uint64                        byte length of the JSON config
    bytes                         UTF-8 JSON ModelConfig
    float32[...]                  weights in canonical order

Canonical order: token embedding, then per layer ``wq wk wv wo w_in w_out
attn_norm mlp_norm``, then the unembedding.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .model import LayerWeights, ModelConfig, ModelWeights

MAGIC = b"KVSQ"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def to_bytes(weights: ModelWeights) -> bytes:
    cfg = weights.config.to_json().encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, len(cfg)), cfg]
    for _, a in weights.named_arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> ModelWeights:
    if len(blob) < _HEADER.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, cfg_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = _HEADER.size
    if off + cfg_len > len(blob):
        raise CheckpointError("truncated config block")
    try:
        config = ModelConfig.from_dict(json.loads(blob[off:off + cfg_len].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as e:
        raise CheckpointError(f"invalid config block: {e}") from e
    off += cfg_len
    shell = ModelWeights(config, np.empty(0), [], None)
    shell.layers = [None] * config.num_layers
    shapes = shell.expected_shapes()
    total = sum(int(np.prod(s)) for s in shapes) * 4
    if len(blob) - off != total:
        raise CheckpointError(f"expected {total} weight bytes, found {len(blob) - off}")
    data = np.frombuffer(blob, dtype="<f4", offset=off).astype(np.float32)
    arrays, i = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(data[i:i + n].reshape(s).copy())
        i += n
    per = len(LayerWeights.NAMES)
    layers = [LayerWeights(*arrays[1 + j * per:1 + (j + 1) * per])
              for j in range(config.num_layers)]
    weights = ModelWeights(config, arrays[0], layers, arrays[-1])
    if not all(np.all(np.isfinite(a)) for _, a in weights.named_arrays()):
        raise CheckpointError("checkpoint contains non-finite weights")
    return weights


def atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(weights: ModelWeights, path: str) -> None:
    atomic_write(path, to_bytes(weights))


def load(path: str) -> ModelWeights:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
