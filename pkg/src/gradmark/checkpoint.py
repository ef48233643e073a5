"""Binary checkpoints.

Layout::

    b"GSCK" | u32 format_version | u64 header_length | JSON header | f64 payloads | u32 CRC32

All integers and floats are little-endian. The header holds the model config,
training metadata and a tensor directory (name, shape, byte offset into the
payload area). The CRC covers every byte before it. Watermark keys are never
stored here.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .nn import Model, ModelConfig, _param_shapes

MAGIC = b"GSCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def dumps(model: Model) -> bytes:
    directory = []
    payload = bytearray()
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        directory.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    header = _canonical(
        {
            "config": model.config.to_dict(),
            "metadata": model.metadata,
            "tensors": directory,
            "payload_bytes": len(payload),
        }
    )
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(blob: bytes) -> Model:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic or too short)")
    body, trailer = blob[:-4], blob[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", trailer)[0]:
        raise CheckpointError("checksum mismatch (corrupt or truncated file)")
    version, hlen = struct.unpack("<IQ", body[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    header = json.loads(body[16:16 + hlen].decode("utf-8"))
    payload = body[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("payload length does not match header")
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        chunk = payload[start:start + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointError(f"tensor {entry['name']} runs past the payload")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
    config = ModelConfig.from_dict(header["config"])
    expected = {name: shape for name, shape, _ in _param_shapes(config)}
    found = {name: arr.shape for name, arr in params.items()}
    if expected != found:
        raise CheckpointError("tensor directory does not match the model config")
    model = Model(config, params)
    model.metadata = header.get("metadata", {})
    return model


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path) -> Model:
    return loads(Path(path).read_bytes())
