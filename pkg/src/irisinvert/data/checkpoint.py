"""Checkpoint files (``.rstc``) holding named tensors for one network.

Layout, integers little-endian::

    b"RSTC"  u16 version
    u16 len + utf-8 module id
    32-byte SHA-256 of the canonical JSON config
    u32 len + canonical JSON config
    u32 tensor count
    per tensor (sorted by name): u16 len + utf-8 name, u8 dtype, u8 ndim,
                                 ndim x u32 dims, raw little-endian payload
    32-byte SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RSTC"
VERSION = 1
DTYPES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "<i4", 5: "|u1"}


class CheckpointError(ValueError):
    pass


def canonical_json(config) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode()


def config_hash(config) -> bytes:
    return hashlib.sha256(canonical_json(config)).digest()


@dataclass
class Checkpoint:
    module_id: str
    config: dict
    tensors: dict[str, np.ndarray]

    @property
    def config_hash(self) -> bytes:
        return config_hash(self.config)

    def torch_state(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(np.array(v)) for k, v in self.tensors.items()}


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
    for code, s in DTYPES.items():
        if np.dtype(s) == dt:
            return code
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(path, module_id: str, config: dict, tensors: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = canonical_json(config)
    mid = module_id.encode()
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<H", len(mid)), mid,
             hashlib.sha256(cfg).digest(), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        code = _dtype_code(arr)
        arr = np.ascontiguousarray(arr, dtype=np.dtype(DTYPES[code]))
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", code, arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def load_checkpoint(path, module_id: str | None = None, config: dict | None = None,
                    allow_config_mismatch: bool = False) -> Checkpoint:
    """Read and verify a checkpoint.

    With ``config`` given, its hash must equal the stored one unless
    ``allow_config_mismatch`` is set.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    if len(data) < 38:
        raise CheckpointError(f"{path}: truncated at byte offset {len(data)}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"{path}: truncated at byte offset {pos}")
        out = body[pos:pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<H", take(2))
    mid = take(mlen).decode()
    stored_hash = take(32)
    (clen,) = struct.unpack("<I", take(4))
    cfg = json.loads(take(clen))
    if hashlib.sha256(canonical_json(cfg)).digest() != stored_hash:
        raise CheckpointError(f"{path}: header config hash does not match embedded config")
    (n,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = np.dtype(DTYPES[code])
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(count * dt.itemsize), dtype=dt).reshape(shape).copy()
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} unexpected bytes before checksum")
    if module_id is not None and mid != module_id:
        raise CheckpointError(f"{path}: holds module {mid!r}, expected {module_id!r}")
    if config is not None and not allow_config_mismatch and config_hash(config) != stored_hash:
        raise CheckpointError(f"{path}: config hash mismatch for module {mid!r}; pass the override flag to load anyway")
    return Checkpoint(mid, cfg, tensors)


def save_module(path, module_id: str, config: dict, module: torch.nn.Module) -> Path:
    return save_checkpoint(path, module_id, config, module.state_dict())


def load_into(module: torch.nn.Module, ckpt: Checkpoint) -> torch.nn.Module:
    module.load_state_dict(ckpt.torch_state())
    return module
