"""Binary template store (``.rsts``).

Layout, all integers little-endian::

    b"RSTS"  u16 version  u8 dtype (0 bit, 1 f32)  u32 dim  u32 count
    u8 distance (0 cosine, 1 hamming)  u8 normalized
    u16 len + utf-8 pipeline id     3 x u32 grid shape (zeros when unused)
    count x [u32 class_id, u8 eye (0 L, 1 R), u32 sample_id, payload]
    u32 CRC-32 of everything above

Bit payloads are packed 8 per byte, most significant bit first, zero padded;
f32 payloads are ``dim`` float32 values.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RSTS"
VERSION = 1
DTYPES = {"bit": 0, "f32": 1}
DISTANCES = {"cosine": 0, "hamming": 1}
EYES = {"L": 0, "R": 1}


class StoreFormatError(ValueError):
    pass


@dataclass
class TemplateStore:
    vectors: np.ndarray
    keys: list[tuple[int, str, int]]
    dtype: str = "f32"
    distance: str = "cosine"
    normalized: bool = True
    pipeline: str = ""
    grid_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}")
        np_dtype = np.uint8 if self.dtype == "bit" else np.float32
        v = np.asarray(self.vectors, dtype=np_dtype)
        if v.ndim == 1 and v.size == 0:
            v = v.reshape(0, 0)
        if v.ndim != 2:
            raise ValueError("vectors must be a 2D array")
        if self.dtype == "bit" and v.size and v.max() > 1:
            raise ValueError("bit templates must hold 0/1 values")
        self.vectors = v
        self.keys = [(int(c), str(e), int(s)) for c, e, s in self.keys]
        if len(self.keys) != len(v):
            raise ValueError(f"{len(self.keys)} keys for {len(v)} vectors")
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("duplicate (class_id, eye, sample_id) keys")
        if self.grid_shape is not None:
            self.grid_shape = tuple(int(x) for x in self.grid_shape)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.keys)

    def index(self) -> dict:
        return {k: i for i, k in enumerate(self.keys)}

    def subset(self, keys) -> "TemplateStore":
        idx = self.index()
        rows = [idx[tuple(k)] for k in keys]
        return TemplateStore(self.vectors[rows], [self.keys[i] for i in rows], self.dtype, self.distance,
                             self.normalized, self.pipeline, self.grid_shape)

    def as_float(self) -> np.ndarray:
        """Generator input view: f32 vectors, bits mapped to {0.0, 1.0}."""
        return self.vectors.astype(np.float32)

    def equals(self, other: "TemplateStore") -> bool:
        return (self.dtype == other.dtype and self.distance == other.distance
                and self.normalized == other.normalized and self.pipeline == other.pipeline
                and self.grid_shape == other.grid_shape and self.keys == other.keys
                and self.vectors.shape == other.vectors.shape
                and self.vectors.tobytes() == other.vectors.tobytes())


def _encode(store: TemplateStore) -> bytes:
    dim, count = store.vectors.shape[1], len(store)
    pid = store.pipeline.encode()
    grid = store.grid_shape or (0, 0, 0)
    parts = [MAGIC, struct.pack("<HBII BB", VERSION, DTYPES[store.dtype], dim, count,
                                DISTANCES[store.distance], int(store.normalized)),
             struct.pack("<H", len(pid)), pid, struct.pack("<III", *grid)]
    for (cid, eye, sid), vec in zip(store.keys, store.vectors):
        parts.append(struct.pack("<IBI", cid, EYES[eye], sid))
        if store.dtype == "bit":
            parts.append(np.packbits(vec.astype(np.uint8)).tobytes())
        else:
            parts.append(vec.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_store(store: TemplateStore, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_encode(store))
    return path


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data, self.pos, self.name = data, 0, name

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise StoreFormatError(f"{self.name}: truncated at byte offset {len(self.data)} while reading "
                                   f"{what} (needed bytes {self.pos}..{self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_store(path) -> TemplateStore:
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4, "magic") != MAGIC:
        raise StoreFormatError(f"{path}: bad magic, not a template store")
    version, dtype_c, dim, count, dist_c, norm = r.unpack("<HBII BB", "header")
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported store version {version}")
    dtype = {v: k for k, v in DTYPES.items()}.get(dtype_c)
    distance = {v: k for k, v in DISTANCES.items()}.get(dist_c)
    if dtype is None or distance is None:
        raise StoreFormatError(f"{path}: bad dtype/distance code {dtype_c}/{dist_c}")
    (plen,) = r.unpack("<H", "pipeline id length")
    pipeline = r.take(plen, "pipeline id").decode()
    grid = r.unpack("<III", "grid shape")
    payload = (dim + 7) // 8 if dtype == "bit" else 4 * dim
    keys, vecs = [], []
    inv_eyes = {v: k for k, v in EYES.items()}
    for i in range(count):
        cid, eye_c, sid = r.unpack("<IBI", f"record {i} key")
        if eye_c not in inv_eyes:
            raise StoreFormatError(f"{path}: bad eye code {eye_c} in record {i}")
        raw = r.take(payload, f"record {i} payload")
        if dtype == "bit":
            vecs.append(np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:dim])
        else:
            vecs.append(np.frombuffer(raw, dtype="<f4").astype(np.float32))
        keys.append((cid, inv_eyes[eye_c], sid))
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(r.data):
        raise StoreFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes after checksum")
    if zlib.crc32(r.data[:body_end]) != crc:
        raise StoreFormatError(f"{path}: checksum mismatch")
    np_dtype = np.uint8 if dtype == "bit" else np.float32
    vectors = np.stack(vecs) if vecs else np.zeros((0, dim), dtype=np_dtype)
    return TemplateStore(vectors, keys, dtype, distance, bool(norm), pipeline,
                         None if grid == (0, 0, 0) else grid)
