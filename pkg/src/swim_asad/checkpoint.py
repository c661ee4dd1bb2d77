"""Binary checkpoint container.

Layout: ``b"SWIMCKPT"`` | u32 version | u64 header length | JSON header |
tensor payloads (little-endian, row-major) in directory order. The header
holds the model kind, architecture config, training metadata and a
directory of ``{name, dtype, shape, offset, nbytes}`` records.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .dataio import DataError

MAGIC = b"SWIMCKPT"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(DataError):
    pass


@dataclass
class Checkpoint:
    kind: str  # "swcnn" | "swim"
    config: dict
    tensors: Dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    directory = []
    payloads = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        directory.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {"kind": ckpt.kind, "config": ckpt.config, "metadata": ckpt.metadata, "tensors": directory}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(payloads)


def from_bytes(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < len(MAGIC) + 12 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{source}: unknown checkpoint version {version}")
    start = len(MAGIC) + 12
    if start + hlen > len(buf):
        raise CheckpointError(f"{source}: header length {hlen} exceeds file size")
    try:
        header = json.loads(buf[start:start + hlen].decode())
        directory = header["tensors"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    body = memoryview(buf)[start + hlen:]
    tensors = {}
    expected_end = 0
    for entry in directory:
        name = entry["name"]
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise CheckpointError(f"{source}: tensor {name!r} has unsupported dtype {dtype}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[dtype]).itemsize
        off = entry["offset"]
        if nbytes != entry["nbytes"] or off != expected_end:
            raise CheckpointError(f"{source}: tensor {name!r} directory entry is inconsistent with its shape")
        if off + nbytes > len(body):
            raise CheckpointError(f"{source}: tensor {name!r} is truncated ({len(body) - off} of {nbytes} bytes)")
        arr = np.frombuffer(body[off:off + nbytes], dtype=_DTYPES[dtype]).reshape(shape)
        tensors[name] = arr.astype(np.dtype(dtype), copy=True)
        expected_end = off + nbytes
    if expected_end != len(body):
        raise CheckpointError(f"{source}: {len(body) - expected_end} trailing bytes after last tensor")
    return Checkpoint(header["kind"], header["config"], tensors, header.get("metadata", {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), str(path))


# ---------------------------------------------------------------------------
# model <-> checkpoint
# ---------------------------------------------------------------------------

def checkpoint_from_model(model, metadata: dict = None) -> Checkpoint:
    from .swcnn import SWCNN
    from .swim import SWIM

    if isinstance(model, SWIM):
        cfg = {"swim": model.config.to_dict(), "swcnn": model.cnn.config.to_dict()}
        return Checkpoint("swim", cfg, model.state_dict(), dict(metadata or {}))
    if isinstance(model, SWCNN):
        return Checkpoint("swcnn", {"swcnn": model.config.to_dict()}, model.state_dict(), dict(metadata or {}))
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def model_from_checkpoint(ckpt: Checkpoint):
    from .swcnn import SWCNN, SWCNNConfig
    from .swim import SWIM, SWIMConfig

    try:
        cnn = SWCNN(SWCNNConfig.from_dict(ckpt.config["swcnn"]))
        if ckpt.kind == "swcnn":
            cnn.load_state_dict(ckpt.tensors)
            return cnn
        if ckpt.kind == "swim":
            model = SWIM(SWIMConfig.from_dict(ckpt.config["swim"]), cnn)
            model.load_state_dict(ckpt.tensors)
            return model
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing component {exc.args[0]!r}") from None
    raise CheckpointError(f"unknown checkpoint kind {ckpt.kind!r}")
