"""Flat binary checkpoints of stage parameters and batch-norm running statistics.

Layout (little-endian)::

    8 bytes  magic  b"PETRACKP"
    u32      format version (1)
    u8       dtype code (0 = f32, 1 = f64)
    u32      tensor count
    per tensor: u16 name length, name (utf-8), u8 ndim, u64 dims[ndim],
                u64 data offset, u64 data bytes
    raw tensor data, concatenated in table order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PETRACKP"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def named_tensors(plan, params) -> dict[str, np.ndarray]:
    out = {}
    for st, ps in zip(plan.stages, params):
        for spec, p in zip(st.param_specs, ps):
            out[f"s{st.stage_id}.{spec.name}"] = p
        for i, bn in enumerate(st.block.bn_states):
            out[f"s{st.stage_id}.bn{i}.running_mean"] = bn.running_mean
            out[f"s{st.stage_id}.bn{i}.running_var"] = bn.running_var
    return out


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    dtypes = {np.dtype(a.dtype).newbyteorder("<") for a in tensors.values()}
    if len(dtypes) > 1:
        raise CheckpointError(f"mixed dtypes {sorted(map(str, dtypes))}")
    dt = dtypes.pop() if dtypes else np.dtype("<f8")
    if dt not in _CODES:
        raise CheckpointError(f"unsupported dtype {dt}")
    table, blobs, offset = [], [], 0
    for name, a in tensors.items():
        data = np.ascontiguousarray(a, dtype=dt).tobytes()
        nb = name.encode()
        table.append(struct.pack("<H", len(nb)) + nb + struct.pack(f"<B{a.ndim}Q", a.ndim, *a.shape)
                     + struct.pack("<QQ", offset, len(data)))
        blobs.append(data)
        offset += len(data)
    head = MAGIC + struct.pack("<IBI", VERSION, _CODES[dt], len(tensors))
    return head + b"".join(table) + b"".join(blobs)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, code, count = struct.unpack_from("<IBI", buf, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        dt = _DTYPES[code]
        off = 8 + struct.calcsize("<IBI")
        entries = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = bytes(buf[off:off + ln]).decode()
            off += ln
            (ndim,) = struct.unpack_from("<B", buf, off)
            shape = struct.unpack_from(f"<{ndim}Q", buf, off + 1)
            off += 1 + 8 * ndim
            start, nbytes = struct.unpack_from("<QQ", buf, off)
            off += 16
            entries.append((name, shape, start, nbytes))
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    out = {}
    for name, shape, start, nbytes in entries:
        a, b = off + start, off + start + nbytes
        if b > len(buf) or nbytes != int(np.prod(shape)) * dt.itemsize:
            raise CheckpointError(f"tensor {name!r} is truncated or mis-sized")
        out[name] = np.frombuffer(buf[a:b], dtype=dt).reshape(shape).copy()
    return out


def save(path, plan, params):
    Path(path).write_bytes(dumps(named_tensors(plan, params)))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def restore(plan, params, tensors: dict[str, np.ndarray]):
    """Copy checkpoint values into ``params`` and the plan's batch-norm states in place."""
    for st, ps in zip(plan.stages, params):
        for spec, p in zip(st.param_specs, ps):
            key = f"s{st.stage_id}.{spec.name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint lacks {key}")
            if tensors[key].shape != p.shape:
                raise CheckpointError(f"{key}: shape {tensors[key].shape} != {p.shape}")
            p[...] = tensors[key]
        for i, bn in enumerate(st.block.bn_states):
            bn.running_mean = tensors[f"s{st.stage_id}.bn{i}.running_mean"].astype(bn.running_mean.dtype)
            bn.running_var = tensors[f"s{st.stage_id}.bn{i}.running_var"].astype(bn.running_var.dtype)
