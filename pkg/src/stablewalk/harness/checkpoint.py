"""Versioned checkpoint container.

Layout::

    magic  b"SWCKPT\\0\\0"          8 bytes
    version                      u32 little endian
    header length                u64
    header                       UTF-8 JSON: config snapshot and tensor table
    header crc32                 u32
    tensor payloads              raw little-endian bytes, in table order
    file crc32                   u32 over everything before it

Each tensor entry records name, dtype, shape, payload offset and its own CRC32,
so corruption is reported at the first damaged region.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from stablewalk.errors import CheckpointIntegrityError, CheckpointShapeError, CheckpointVersionError

MAGIC = b"SWCKPT\0\0"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
_U32 = struct.Struct("<I")


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config: dict,
                    extra: dict | None = None) -> None:
    """Write ``tensors`` (name to array) and a JSON-serialisable config snapshot."""
    table, payloads, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr)
        data = data.astype(data.dtype.newbyteorder("<"), copy=False)
        raw = data.tobytes()
        table.append({"name": name, "dtype": data.dtype.str, "shape": list(data.shape),
                      "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "extra": extra or {}, "tensors": table},
                        sort_keys=True).encode("utf-8")
    blob = bytearray(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
    blob += header
    blob += _U32.pack(zlib.crc32(header))
    for raw in payloads:
        blob += raw
    blob += _U32.pack(zlib.crc32(bytes(blob)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Read and verify a checkpoint; returns ``(tensors, config, extra)``.

    Nothing is returned unless every check passes.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _PREAMBLE.size:
        raise CheckpointIntegrityError("file shorter than the fixed preamble", len(blob))
    magic, version, header_len = _PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointIntegrityError("bad magic bytes", 0)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    h_start = _PREAMBLE.size
    h_end = h_start + header_len
    if len(blob) < h_end + _U32.size:
        raise CheckpointIntegrityError("file truncated inside the header", len(blob))
    header = blob[h_start:h_end]
    (h_crc,) = _U32.unpack_from(blob, h_end)
    if zlib.crc32(header) != h_crc:
        raise CheckpointIntegrityError("header checksum mismatch", h_start)
    meta = json.loads(header.decode("utf-8"))
    data_start = h_end + _U32.size
    tensors = {}
    for entry in meta["tensors"]:
        begin = data_start + entry["offset"]
        end = begin + entry["nbytes"]
        if end > len(blob) - _U32.size:
            raise CheckpointIntegrityError(f"file truncated inside tensor {entry['name']!r}", min(len(blob), begin))
        raw = blob[begin:end]
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointIntegrityError(f"checksum mismatch in tensor {entry['name']!r}", begin)
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    tail = len(blob) - _U32.size
    expected_end = data_start + sum(e["nbytes"] for e in meta["tensors"])
    if tail != expected_end:
        raise CheckpointIntegrityError("unexpected trailing bytes", expected_end)
    (f_crc,) = _U32.unpack_from(blob, tail)
    if zlib.crc32(blob[:tail]) != f_crc:
        raise CheckpointIntegrityError("file checksum mismatch", tail)
    return tensors, meta["config"], meta["extra"]


def model_tensors(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def restore_model(model: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    """Load arrays into ``model`` after checking names, shapes and dtypes."""
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks tensor {missing[0]!r}", missing[0])
    unexpected = sorted(set(tensors) - set(state))
    if unexpected:
        raise CheckpointShapeError(f"checkpoint has unknown tensor {unexpected[0]!r}", unexpected[0])
    for name, target in state.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(target.shape):
            raise CheckpointShapeError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, model expects {tuple(target.shape)}", name)
    model.load_state_dict({k: torch.from_numpy(np.array(v)).to(state[k].dtype) for k, v in tensors.items()})
