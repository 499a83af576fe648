"""Binary frames exchanged between the cloud and its edges.

Every frame is ``u32 length | u8 kind | payload`` in little-endian order,
where ``length`` counts the kind byte and the payload.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

REGISTER, MODEL, GRADIENT, HALT = 1, 2, 3, 4
MAX_DIM = 1 << 31
DEFAULT_MAX_FRAME = 1 << 28

_LEN = struct.Struct("<I")
_REGISTER = struct.Struct("<Id")
_MODEL = struct.Struct("<QdI")
_GRADIENT = struct.Struct("<QIdI")
_F64 = np.dtype("<f8")


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class Register:
    edge_id: int
    epsilon: float


@dataclass(frozen=True, eq=False)
class Model:
    t: int
    sensitivity: float
    x: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, Model) and self.t == other.t
                and _same_float(self.sensitivity, other.sensitivity)
                and np.array_equal(self.x, other.x))


@dataclass(frozen=True, eq=False)
class Gradient:
    origin_iteration: int
    edge_id: int
    clip_bound: float
    payload: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, Gradient) and self.origin_iteration == other.origin_iteration
                and self.edge_id == other.edge_id
                and _same_float(self.clip_bound, other.clip_bound)
                and np.array_equal(self.payload, other.payload))


@dataclass(frozen=True)
class Halt:
    pass


Message = Union[Register, Model, Gradient, Halt]


def _same_float(a, b):
    return a == b or (math.isnan(a) and math.isnan(b))


def _vector(v) -> bytes:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise WireError(f"expected a vector, got shape {v.shape}")
    if v.shape[0] > MAX_DIM:
        raise WireError(f"dimension {v.shape[0]} exceeds 2^31")
    if not np.all(np.isfinite(v)):
        raise WireError("non-finite vector entries")
    return v.astype(_F64, copy=False).tobytes()


def encode(msg: Message) -> bytes:
    try:
        return _encode(msg)
    except struct.error as exc:
        raise WireError(f"field out of range in {type(msg).__name__}: {exc}") from None


def _encode(msg: Message) -> bytes:
    if isinstance(msg, Register):
        body = bytes([REGISTER]) + _REGISTER.pack(msg.edge_id, msg.epsilon)
    elif isinstance(msg, Model):
        data = _vector(msg.x)
        body = bytes([MODEL]) + _MODEL.pack(msg.t, msg.sensitivity, len(data) // 8) + data
    elif isinstance(msg, Gradient):
        data = _vector(msg.payload)
        body = (bytes([GRADIENT])
                + _GRADIENT.pack(msg.origin_iteration, msg.edge_id, msg.clip_bound, len(data) // 8)
                + data)
    elif isinstance(msg, Halt):
        body = bytes([HALT])
    else:
        raise WireError(f"cannot encode {type(msg).__name__}")
    return _LEN.pack(len(body)) + body


def _floats(body: memoryview, offset: int, dim: int) -> np.ndarray:
    if dim > MAX_DIM:
        raise WireError(f"dimension {dim} exceeds 2^31")
    if len(body) - offset != 8 * dim:
        raise WireError(f"vector of dimension {dim} needs {8 * dim} bytes, frame has {len(body) - offset}")
    return np.frombuffer(body, dtype=_F64, count=dim, offset=offset).astype(np.float64)


def decode_body(body) -> Message:
    """Decode one frame without its length prefix."""
    body = memoryview(bytes(body))
    if len(body) < 1:
        raise WireError("empty frame")
    kind = body[0]
    if kind == REGISTER:
        if len(body) != 1 + _REGISTER.size:
            raise WireError(f"REGISTER frame of {len(body)} bytes")
        return Register(*_REGISTER.unpack_from(body, 1))
    if kind == MODEL:
        if len(body) < 1 + _MODEL.size:
            raise WireError("truncated MODEL header")
        t, sens, dim = _MODEL.unpack_from(body, 1)
        return Model(t, sens, _floats(body, 1 + _MODEL.size, dim))
    if kind == GRADIENT:
        if len(body) < 1 + _GRADIENT.size:
            raise WireError("truncated GRADIENT header")
        origin, edge_id, clip, dim = _GRADIENT.unpack_from(body, 1)
        return Gradient(origin, edge_id, clip, _floats(body, 1 + _GRADIENT.size, dim))
    if kind == HALT:
        if len(body) != 1:
            raise WireError(f"HALT frame of {len(body)} bytes")
        return Halt()
    raise WireError(f"unknown message kind {kind}")


def decode(frame: bytes) -> Message:
    """Decode exactly one length-prefixed frame."""
    if len(frame) < _LEN.size:
        raise WireError("truncated length prefix")
    (n,) = _LEN.unpack_from(frame)
    if len(frame) - _LEN.size != n:
        raise WireError(f"length field says {n} bytes, frame carries {len(frame) - _LEN.size}")
    return decode_body(memoryview(frame)[_LEN.size:])


async def read_message(reader, max_frame: int = DEFAULT_MAX_FRAME) -> Message:
    """Read one frame from an ``asyncio.StreamReader``.

    Raises ``asyncio.IncompleteReadError`` on a clean or abrupt EOF.
    """
    (n,) = _LEN.unpack(await reader.readexactly(_LEN.size))
    if n == 0 or n > max_frame:
        raise WireError(f"frame length {n} outside [1, {max_frame}]")
    return decode_body(await reader.readexactly(n))
