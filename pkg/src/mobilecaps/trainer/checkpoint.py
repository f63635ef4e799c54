"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MCAP" | u32 version=1 | u32 count
    count x ( u16 name_len | utf-8 name | u8 dtype | u8 rank | rank x u32 dims | payload )

dtype 0 is float32, 1 is float64. Parameters are written in model order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MCAP"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Wrong magic, unsupported version or unknown dtype code."""


class CheckpointTruncatedError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError, KeyError):
    pass


def encode_state(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise TypeError(f"{name}: cannot serialise dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_state(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError("bad magic: not an MCAP checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in CODE_DTYPES:
            raise CheckpointFormatError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = CODE_DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
        state[name] = arr
    if pos != len(view):
        raise CheckpointFormatError(f"{len(view) - pos} trailing bytes after the last parameter")
    return state


def save_checkpoint(model_or_state, path) -> Path:
    state = model_or_state if isinstance(model_or_state, dict) else model_or_state.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_state(state))
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_state(Path(path).read_bytes())


def load_checkpoint(path, model):
    """Fill ``model`` with the parameters stored at ``path`` and return it."""
    state = read_checkpoint(path)
    own = dict(model.named_parameters())
    unknown = sorted(set(state) - set(own))
    if unknown:
        raise UnknownParameterError(f"checkpoint has parameters the model lacks: {unknown}")
    model.load_state_dict(state)
    return model
