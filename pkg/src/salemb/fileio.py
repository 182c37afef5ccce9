"""Binary file formats shared across the pipeline.

All multi-byte integers are little-endian u32; all tensor payloads are
little-endian float32 in C (row-major) order. Three container kinds:

* tensor files      -- magic ``SSAME-TNSR`` + rank + dims + payload
* target files      -- a tensor file followed by one validity byte
* checkpoint files  -- magic ``SSAME-CKPT\\0`` + version + named tensors

Plus plain binary PPM (P6) / PGM (P5) images for anything a human may
want to open in an image viewer.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"SSAME-TNSR"
CHECKPOINT_MAGIC = b"SSAME-CKPT\x00"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Raised when a file does not match its declared container format."""


def tensor_to_bytes(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype=np.float64)
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record; returns (array, next offset)."""
    if data[offset : offset + len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    pos = offset + len(TENSOR_MAGIC)
    (rank,) = struct.unpack_from("<I", data, pos)
    pos += 4
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
    pos += 4 * count
    return payload.reshape(dims).astype(np.float64), pos


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def read_tensor(path: str | Path) -> np.ndarray:
    array, _ = tensor_from_bytes(Path(path).read_bytes())
    return array


def write_target(path: str | Path, grid: np.ndarray, valid: bool) -> None:
    """Saliency-target file: patch distribution tensor + 1 validity byte."""
    Path(path).write_bytes(tensor_to_bytes(grid) + bytes([1 if valid else 0]))


def read_target(path: str | Path) -> tuple[np.ndarray, bool]:
    data = Path(path).read_bytes()
    grid, pos = tensor_from_bytes(data)
    if pos + 1 != len(data):
        raise FormatError(f"trailing bytes in target file {path}")
    return grid, data[pos] != 0


def save_checkpoint(path: str | Path, entries: dict[str, np.ndarray], version: int = CHECKPOINT_VERSION) -> None:
    """Write named tensors sorted by name so equal dicts give equal bytes."""
    out = [CHECKPOINT_MAGIC, struct.pack("<I", version)]
    for name in sorted(entries):
        arr = np.ascontiguousarray(np.asarray(entries[name], dtype=np.float64), dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries: dict[str, np.ndarray] = {}
    while pos < len(data):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        if name in entries:
            raise FormatError(f"duplicate checkpoint entry {name!r}")
        entries[name] = payload.reshape(dims).astype(np.float64)
    return entries, version


def write_pgm(path: str | Path, grid: np.ndarray) -> None:
    """8-bit binary PGM (P5). Expects a (H, W) uint8 array."""
    arr = np.asarray(grid)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise FormatError("PGM writer expects a 2-D uint8 array")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    width, height, payload = _read_netpbm(path, b"P5")
    return np.frombuffer(payload, dtype=np.uint8, count=height * width).reshape(height, width)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PPM (P6). Expects a (H, W, 3) uint8 array."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise FormatError("PPM writer expects a (H, W, 3) uint8 array")
    header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    width, height, payload = _read_netpbm(path, b"P6")
    return np.frombuffer(payload, dtype=np.uint8, count=height * width * 3).reshape(height, width, 3)


def _read_netpbm(path: str | Path, magic: bytes) -> tuple[int, int, bytes]:
    data = Path(path).read_bytes()
    if not data.startswith(magic):
        raise FormatError(f"{path} is not a {magic.decode()} file")
    # header = magic, width, height, maxval as whitespace-separated tokens
    fields: list[int] = []
    pos = len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} in {path}")
    return width, height, data[pos:]
