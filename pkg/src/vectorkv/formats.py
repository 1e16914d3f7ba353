"""Little-endian binary containers for activation dumps (VECA) and calibrated
models (VECM).

Both files end with a CRC32 of every preceding byte. Length fields alone
cannot catch a flipped direction flag when d_k == d_v, so the checksum is
what makes header corruption detectable in every case.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .regression import KTOV, VTOK, CalibrationModel

DUMP_MAGIC = b"VECA"
MODEL_MAGIC = b"VECM"
VERSION = 1
_DIRECTIONS = (KTOV, VTOK)
# refuse absurd headers before allocating anything
_MAX_LAYERS = 1 << 16
_MAX_DIM = 1 << 20


class FormatError(ValueError):
    """File contents disagree with the declared layout."""


@dataclass(frozen=True)
class LayerActivations:
    keys: np.ndarray        # (n, d_k) pre-RoPE
    values: np.ndarray      # (n, d_v)
    positions: np.ndarray   # (n,) uint64

    def __post_init__(self):
        k = np.ascontiguousarray(self.keys, dtype="<f4")
        v = np.ascontiguousarray(self.values, dtype="<f4")
        p = np.ascontiguousarray(self.positions, dtype="<u8")
        if k.ndim != 2 or v.ndim != 2 or p.ndim != 1 or not k.shape[0] == v.shape[0] == p.shape[0]:
            raise ValueError("keys (n, d_k), values (n, d_v) and positions (n,) required")
        object.__setattr__(self, "keys", k)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "positions", p)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d_k(self) -> int:
        return self.keys.shape[1]

    @property
    def d_v(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ActivationDump:
    layers: tuple[LayerActivations, ...]

    def __len__(self) -> int:
        return len(self.layers)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, nbytes: int) -> bytes:
        if nbytes < 0 or self.pos + nbytes > len(self.buf):
            raise FormatError(f"truncated: need {nbytes} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * size), dtype=dtype).copy()


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _open(buf: bytes, magic: bytes) -> _Reader:
    if len(buf) < 12:
        raise FormatError("file too short for a header")
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch")
    return r


def _finish(r: _Reader):
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after payload")


def _check_dims(*dims: int):
    for d in dims:
        if not 1 <= d <= _MAX_DIM:
            raise FormatError(f"dimension {d} out of range")


def encode_dump(dump: ActivationDump) -> bytes:
    parts = [DUMP_MAGIC, struct.pack("<II", VERSION, len(dump.layers))]
    for layer in dump.layers:
        parts.append(struct.pack("<IIQ", layer.d_k, layer.d_v, layer.n))
        parts += [layer.keys.tobytes(), layer.values.tobytes(), layer.positions.tobytes()]
    return _seal(b"".join(parts))


def decode_dump(buf: bytes) -> ActivationDump:
    r = _open(buf, DUMP_MAGIC)
    n_layers = r.u32()
    if not 1 <= n_layers <= _MAX_LAYERS:
        raise FormatError(f"layer count {n_layers} out of range")
    layers = []
    for _ in range(n_layers):
        d_k, d_v, n = r.u32(), r.u32(), r.u64()
        _check_dims(d_k, d_v)
        if n * (d_k + d_v + 2) * 4 > len(r.buf):
            raise FormatError(f"declared token count {n} exceeds the payload")
        keys = r.array("<f4", n * d_k).reshape(n, d_k)
        values = r.array("<f4", n * d_v).reshape(n, d_v)
        layers.append(LayerActivations(keys, values, r.array("<u8", n)))
    _finish(r)
    return ActivationDump(tuple(layers))


def encode_models(models: list[CalibrationModel]) -> bytes:
    if not models:
        raise ValueError("no models to write")
    direction = models[0].direction
    if any(m.direction != direction for m in models):
        raise ValueError("all layers must share one direction")
    parts = [MODEL_MAGIC, struct.pack("<III", VERSION, _DIRECTIONS.index(direction), len(models))]
    for m in models:
        parts.append(struct.pack("<II", m.d_out, m.d_in))
        parts.append(np.ascontiguousarray(m.W, dtype="<f4").tobytes())
    parts.append(np.array([m.ridge for m in models], dtype="<f8").tobytes())
    parts.append(np.array([m.test_r2 for m in models], dtype="<f8").tobytes())
    return _seal(b"".join(parts))


def decode_models(buf: bytes) -> list[CalibrationModel]:
    r = _open(buf, MODEL_MAGIC)
    flag = r.u32()
    if flag >= len(_DIRECTIONS):
        raise FormatError(f"unknown direction flag {flag}")
    n_layers = r.u32()
    if not 1 <= n_layers <= _MAX_LAYERS:
        raise FormatError(f"layer count {n_layers} out of range")
    mats = []
    for _ in range(n_layers):
        d_out, d_in = r.u32(), r.u32()
        _check_dims(d_out, d_in)
        mats.append(r.array("<f4", d_out * d_in).reshape(d_out, d_in).astype(np.float64))
    ridges = r.array("<f8", n_layers)
    r2 = r.array("<f8", n_layers)
    _finish(r)
    direction = _DIRECTIONS[flag]
    return [CalibrationModel(W, direction, float(lam), float("nan"), float(q)) for W, lam, q in zip(mats, ridges, r2)]


def write_dump(path, dump: ActivationDump):
    Path(path).write_bytes(encode_dump(dump))


def read_dump(path) -> ActivationDump:
    return decode_dump(Path(path).read_bytes())


def write_models(path, models: list[CalibrationModel]):
    Path(path).write_bytes(encode_models(models))


def read_models(path) -> list[CalibrationModel]:
    return decode_models(Path(path).read_bytes())
