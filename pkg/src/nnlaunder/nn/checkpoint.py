"""Versioned binary checkpoints.

Layout::

    8 bytes   magic b"NNLCKPT\\0"
    4 bytes   format version, little-endian uint32
    4 bytes   header length, little-endian uint32
    N bytes   UTF-8 JSON header (layer specs, array shapes, metadata)
    ...       little-endian float32 arrays in layer order (params, then buffers)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointVersionError, CorruptCheckpointError
from .layers import LayerSpec
from .model import Model

MAGIC = b"NNLCKPT\0"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: Model
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def save_checkpoint(model: Model, path, metadata: dict | None = None) -> None:
    metadata = {str(k): str(v) for k, v in (metadata or {}).items()}
    arrays = model.state()
    header = {
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": [spec.to_dict() for spec in model.specs],
        "arrays": [{"layer": i, "name": name, "shape": list(a.shape)} for i, name, a in arrays],
        "frozen": {str(i): {str(u): float(v) for u, v in layer.frozen.items()}
                   for i, layer in enumerate(model.layers) if layer.frozen},
        "metadata": metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for _, _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad or truncated magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 16 + hlen:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        specs = [LayerSpec.from_dict(d) for d in header["layers"]]
        model = Model(specs, header["input_shape"], class_count=header["class_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc

    offset = 16 + hlen
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise CorruptCheckpointError(f"{path}: truncated parameter payload")
        value = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        model.set_array(entry["layer"], entry["name"], value.astype(np.float32))
        offset += nbytes
    if offset != len(raw):
        raise CorruptCheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    for i, units in header.get("frozen", {}).items():
        model.layers[int(i)].frozen = {int(u): v for u, v in units.items()}
    return Checkpoint(model=model, metadata=dict(header.get("metadata", {})), format_version=version)
