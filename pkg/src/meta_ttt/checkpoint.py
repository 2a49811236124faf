"""Versioned binary checkpoints.

Layout (all little-endian):

    bytes 0..3    magic b"MTTT"
    bytes 4..7    format version, uint32
    bytes 8..15   header length H, uint64
    bytes 16..    header, H bytes of UTF-8 JSON
    then          raw tensor payload, concatenated in header order

The header lists every parameter and buffer with name, dtype, and shape
(sorted by name), echoes the resolved experiment config, and carries the
torch RNG state so a resumed run continues the same random stream.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"MTTT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _named_tensors(model: nn.Module) -> list[tuple[str, torch.Tensor]]:
    entries = dict(model.named_parameters())
    entries.update(dict(model.named_buffers()))
    return sorted(entries.items())


def save_checkpoint(model: nn.Module, path: str | Path, config_echo: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = _named_tensors(model)
    header = {
        "version": VERSION,
        "config": config_echo,
        "rng_torch": torch.get_rng_state().numpy().tobytes().hex(),
        "tensors": [
            {"name": n, "dtype": str(t.detach().numpy().dtype), "shape": list(t.shape)}
            for n, t in tensors
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, t in tensors:
            arr = np.ascontiguousarray(t.detach().numpy())
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return path


def read_header(path: str | Path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise CheckpointError(f"truncated checkpoint header: {path}")
    return json.loads(data[16: 16 + hlen].decode())


def load_checkpoint(path: str | Path, model: nn.Module, restore_rng: bool = False) -> dict:
    """Load parameters, buffers, and (optionally) the RNG state into place."""
    path = Path(path)
    header = read_header(path)
    data = path.read_bytes()
    (hlen,) = struct.unpack("<Q", data[8:16])
    offset = 16 + hlen
    entries = dict(_named_tensors(model))
    for meta in header["tensors"]:
        name, dtype, shape = meta["name"], np.dtype(meta["dtype"]), tuple(meta["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"truncated checkpoint payload: {path}")
        arr = np.frombuffer(data, dtype=dtype.newbyteorder("<"), count=max(
            int(np.prod(shape, dtype=np.int64)), 1), offset=offset).reshape(shape)
        offset += nbytes
        if name not in entries:
            raise CheckpointError(f"checkpoint tensor {name!r} has no home in the model")
        with torch.no_grad():
            entries[name].copy_(torch.from_numpy(arr.copy()))
    if restore_rng and header.get("rng_torch"):
        state = np.frombuffer(bytes.fromhex(header["rng_torch"]), dtype=np.uint8)
        torch.set_rng_state(torch.from_numpy(state.copy()))
    return header
