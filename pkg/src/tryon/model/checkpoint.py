"""Versioned binary checkpoint container.

Layout::

    b"TRYONCKP" | u32 version | u64 header length | JSON header | raw arrays

The JSON header carries the model config, free-form metadata and, for each
array, its name, shape, byte offset into the payload and CRC32. Arrays are
stored as little-endian float64 so a write/read round trip is bit-exact.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"TRYONCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, config: dict, meta: Optional[dict] = None) -> None:
    """Write ``arrays`` (name -> float array) with ``config`` and ``meta`` atomically."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "crc32": zlib.crc32(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<IQ", VERSION, len(header)))
            f.write(header)
            for raw in blobs:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Returns ``(arrays, config, meta)``; raises CheckpointError on any corruption."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack_from("<IQ", data, 8)
    except struct.error:
        raise CheckpointError(f"{path}: truncated header") from None
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    try:
        header = json.loads(data[start:start + hlen])
    except ValueError:
        raise CheckpointError(f"{path}: corrupt header") from None
    payload = memoryview(data)[start + hlen:]
    arrays = OrderedDict()
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 8
        raw = bytes(payload[e["offset"]:e["offset"] + n])
        if len(raw) != n:
            raise CheckpointError(f"{path}: array '{e['name']}' is truncated")
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch for '{e['name']}'")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return arrays, header["config"], header["meta"]


def save_model(path, model, meta: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    """Model parameters under ``param/<name>``, plus any ``extra`` arrays verbatim."""
    arrays = OrderedDict((f"param/{n}", a) for n, a in model.state_dict().items())
    if extra:
        arrays.update(extra)
    save_checkpoint(path, arrays, model.cfg.to_dict(), meta)


def load_model(path):
    """Rebuild a model from a checkpoint; returns ``(model, arrays, meta)``."""
    from .network import ModelConfig, build_model

    arrays, config, meta = load_checkpoint(path)
    model = build_model(ModelConfig.from_dict(config))
    model.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    return model, arrays, meta
