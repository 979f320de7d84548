"""Binary checkpoints.

Layout: the magic ``TDAMCKP1``, a little-endian uint64 manifest length, a
UTF-8 manifest with one line per tensor (``name f32 rank dim...``), then the
raw little-endian float32 payloads in manifest order. Parameters come first,
then batch-norm running statistics.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .nn import Module

MAGIC = b"TDAMCKP1"


class CheckpointError(ValueError):
    pass


def _tensors(model: Module) -> list[tuple[str, np.ndarray]]:
    out = [(name, p.data) for name, p in model.named_parameters()]
    out += list(model.named_buffers())
    return out


def save(model: Module, path: Union[str, Path]) -> None:
    tensors = _tensors(model)
    lines = [" ".join([name, "f32", str(a.ndim)] + [str(d) for d in a.shape]) for name, a in tensors]
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for _, a in tensors:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read(path: Union[str, Path]) -> dict[str, np.ndarray]:
    """All tensors of a checkpoint file, keyed by name, in file order."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = raw[16 : 16 + n].decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{path}: manifest is not UTF-8") from e
    pos = 16 + n
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(manifest.splitlines(), 1):
        parts = line.split()
        if len(parts) < 3 or parts[1] != "f32" or not parts[2].isdigit() or len(parts) != 3 + int(parts[2]):
            raise CheckpointError(f"{path}: malformed manifest line {lineno}: {line!r}")
        shape = tuple(int(d) for d in parts[3:])
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: payload for {parts[0]} is truncated")
        out[parts[0]] = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after the payload")
    return out


def load(model: Module, path: Union[str, Path]) -> Module:
    """Copy checkpoint tensors into ``model``; names and shapes must match exactly."""
    stored = read(path)
    expected = _tensors(model)
    names = [n for n, _ in expected]
    missing = [n for n in names if n not in stored]
    extra = [n for n in stored if n not in set(names)]
    if missing or extra:
        raise CheckpointError(f"{path}: checkpoint does not fit the model (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, target in expected:
        src = stored[name]
        if src.shape != target.shape:
            raise CheckpointError(f"{path}: {name} has shape {src.shape}, model expects {target.shape}")
        target[...] = src
    return model
