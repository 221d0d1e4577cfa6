"""Binary file formats for volumes and checkpoints.

Volume format "VOL1": 8-byte magic ``VOLUME01``, three little-endian uint32
extents (w, h, d), then w*h*d little-endian float32 voxels with x varying
fastest. Checkpoint format "CKPT1": 8-byte magic ``CKPTV001``, little-endian
uint32 entry count, then per entry a uint16 name length, the UTF-8 name, a
uint8 rank, rank little-endian uint32 extents, and the float32 payload in C
order. Entries are written in sorted name order, so loading and re-saving a
checkpoint reproduces it byte for byte.
"""

from __future__ import annotations

import os
import struct

import numpy as np

VOL_MAGIC = b"VOLUME01"
CKPT_MAGIC = b"CKPTV001"


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated file: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def write_volume(path: str | os.PathLike, vol: np.ndarray) -> None:
    """Write a [w, h, d] array as a VOL1 file (cast to float32)."""
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise ValueError(f"volume must be 3-D, got shape {vol.shape}")
    w, h, d = vol.shape
    with open(path, "wb") as f:
        f.write(VOL_MAGIC)
        f.write(struct.pack("<III", w, h, d))
        f.write(np.ascontiguousarray(vol.astype("<f4").ravel(order="F")).tobytes())


def read_volume(path: str | os.PathLike) -> np.ndarray:
    """Read a VOL1 file into a float32 [w, h, d] array."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, "magic")
        if magic != VOL_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {VOL_MAGIC!r}")
        w, h, d = struct.unpack("<III", _read_exact(f, 12, "extents"))
        n = w * h * d
        payload = _read_exact(f, 4 * n, f"{n} voxels")
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after {n} voxels")
    flat = np.frombuffer(payload, dtype="<f4")
    return np.ascontiguousarray(flat.reshape((w, h, d), order="F"))


def write_checkpoint(path: str | os.PathLike, state: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays as a CKPT1 file, sorted by name."""
    names = sorted(state)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.asarray(state[name], dtype="<f4")
            enc = name.encode("utf-8")
            if len(enc) > 0xFFFF:
                raise ValueError(f"parameter name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise ValueError(f"parameter rank {arr.ndim} exceeds format limit")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read a CKPT1 file into {name: float32 array}."""
    state: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, "magic")
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "entry count"))
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "extents"))
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, 4 * n, f"payload of {name}")
            if name in state:
                raise ValueError(f"{path}: duplicate entry {name!r}")
            state[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after {count} entries")
    return state
