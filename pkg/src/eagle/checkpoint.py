"""Binary tensor-table checkpoints.

Layout (little-endian)::

    b"EAGL"  u32 version=1  u32 count
    per tensor: u16 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64), u8 rank,
                u32 dims[rank], raw scalars

Optimizer state uses the ``opt.`` name prefix and RNG/sampler bookkeeping the
``rng.`` prefix. Integers wider than 2**53 are split into 32-bit halves.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"EAGL"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {torch.float32: 0, torch.float64: 1}


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, torch.Tensor]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        if t.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        raw = name.encode("utf-8")
        code = _CODES[t.dtype]
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def decode(data: bytes, source: str = "<bytes>") -> dict[str, torch.Tensor]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{source}: truncated at offset {pos} while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not an EAGL checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version} (expected {VERSION})")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"{name} dtype"))
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: {name} has unknown dtype code {code} at offset {pos - 2}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        n = int(np.prod(dims)) if rank else 1
        dt = _DTYPES[code]
        arr = np.frombuffer(take(n * dt.itemsize, f"{name} data"), dtype=dt).reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - pos} trailing bytes at offset {pos}")
    return tensors


def save_tensors(path, tensors: dict[str, torch.Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors))
    tmp.replace(path)


def load_tensors(path) -> dict[str, torch.Tensor]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"{path}: cannot read checkpoint ({err.strerror})") from err
    return decode(data, str(path))


def pack_int(value: int) -> torch.Tensor:
    """Exact float64 encoding of a non-negative 64-bit integer as two 32-bit halves."""
    value = int(value)
    return torch.tensor([float(value >> 32), float(value & 0xFFFFFFFF)], dtype=torch.float64)


def unpack_int(t: torch.Tensor) -> int:
    hi, lo = (int(x) for x in t.tolist())
    return (hi << 32) | lo


def save_checkpoint(path, params, optimizer_state=None, rng_state=None) -> None:
    """Model tensors plus ``opt.*`` optimizer tensors and ``rng.*`` integer counters."""
    tensors = dict(params)
    for name, t in (optimizer_state or {}).items():
        tensors[name if name.startswith("opt.") else f"opt.{name}"] = t
    for name, value in (rng_state or {}).items():
        tensors[f"rng.{name}"] = pack_int(value)
    save_tensors(path, tensors)


def load_checkpoint(path):
    """Return ``(params, optimizer_state, rng_state)``."""
    tensors = load_tensors(path)
    params, opt, rng = {}, {}, {}
    for name, t in tensors.items():
        if name.startswith("opt."):
            opt[name] = t
        elif name.startswith("rng."):
            rng[name[4:]] = unpack_int(t)
        else:
            params[name] = t
    return params, opt, rng
