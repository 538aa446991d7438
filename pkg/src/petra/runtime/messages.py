"""Messages exchanged by neighbouring stages and their binary wire format.

Wire layout (all integers little-endian)::

    u8   kind            1 = forward, 2 = backward, 3 = end-of-stream
    u64  micro_batch_id
    u32  tensor count
    per tensor:
        u8   dtype code  (0 = f32, 1 = f64, 2 = i64)
        u8   ndim
        u64  dims[ndim]
        raw little-endian payload

Forward messages carry the activation and, when present, the labels as a
trailing i64 tensor. Backward messages carry the (reconstructed) input
activation and its gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

FORWARD, BACKWARD, EOS = 1, 2, 3

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


@dataclass
class Forward:
    mb: int
    x: np.ndarray
    labels: np.ndarray | None = None
    sender_version: int = -1

    @property
    def payload(self):
        return (self.x,)


@dataclass
class Backward:
    mb: int
    x: np.ndarray
    delta: np.ndarray
    sender_version: int = -1

    @property
    def payload(self):
        return (self.x, self.delta)


@dataclass
class EndOfStream:
    mb: int = 0
    payload: tuple = ()


class WireError(ValueError):
    pass


def _pack_tensor(a: np.ndarray) -> bytes:
    le = a.dtype.newbyteorder("<")
    try:
        code = _CODES[le]
    except KeyError:
        raise WireError(f"dtype {a.dtype} cannot be sent") from None
    head = struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype=le).tobytes()


def encode(msg) -> bytes:
    if isinstance(msg, Forward):
        kind = FORWARD
        tensors = [msg.x] + ([np.asarray(msg.labels, dtype=np.int64)] if msg.labels is not None else [])
    elif isinstance(msg, Backward):
        kind, tensors = BACKWARD, [msg.x, msg.delta]
    elif isinstance(msg, EndOfStream):
        kind, tensors = EOS, []
    else:
        raise WireError(f"cannot encode {type(msg).__name__}")
    parts = [struct.pack("<BQI", kind, msg.mb, len(tensors))]
    parts += [_pack_tensor(t) for t in tensors]
    return b"".join(parts)


def decode(buf: bytes):
    mv = memoryview(buf)
    try:
        kind, mb, count = struct.unpack_from("<BQI", mv, 0)
        off = struct.calcsize("<BQI")
        tensors = []
        for _ in range(count):
            code, ndim = struct.unpack_from("<BB", mv, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", mv, off)
            off += 8 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(shape)) * dt.itemsize
            if off + n > len(mv):
                raise WireError("truncated tensor payload")
            tensors.append(np.frombuffer(mv[off:off + n], dtype=dt).reshape(shape).copy())
            off += n
    except (struct.error, KeyError) as e:
        raise WireError(f"malformed message: {e}") from None
    if off != len(mv):
        raise WireError(f"{len(mv) - off} trailing bytes")
    if kind == FORWARD and count in (1, 2):
        return Forward(mb, tensors[0], tensors[1] if count == 2 else None)
    if kind == BACKWARD and count == 2:
        return Backward(mb, tensors[0], tensors[1])
    if kind == EOS and count == 0:
        return EndOfStream(mb)
    raise WireError(f"bad kind/count combination ({kind}, {count})")
