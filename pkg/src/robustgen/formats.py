"""Binary containers: RGW1 tensor archives and IDX image/label files."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

RGW_MAGIC = b"RGW1"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
# u8 payload, rank 4 (N x C x H x W) for colour images
IDX_COLOR_IMAGES_MAGIC = 0x00000804


class FormatError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays in insertion order.

    Layout: ``RGW1`` then, per tensor, u32 name length, UTF-8 name, u32 rank,
    u32 dims, little-endian f64 payload.
    """
    chunks = [RGW_MAGIC]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != RGW_MAGIC:
        raise FormatError(f"bad RGW magic {buf[:4]!r}, expected {RGW_MAGIC!r}")
    out: dict[str, np.ndarray] = {}
    pos = 4
    try:
        while pos < len(buf):
            (name_len,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > len(buf):
                raise FormatError(f"truncated payload for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
            pos = end
    except struct.error as exc:
        raise FormatError(f"truncated RGW record at byte {pos}") from exc
    return out


def _read_idx(path, expected_magic: int, also_accept: tuple[int, ...] = ()) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{path}: file too short for IDX header")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic and magic not in also_accept:
        raise FormatError(f"{path}: IDX magic 0x{magic:08x} found, expected 0x{expected_magic:08x}")
    rank = magic & 0xFF
    dims = struct.unpack_from(f">{rank}I", buf, 4)
    offset = 4 + 4 * rank
    count = int(np.prod(dims))
    if len(buf) - offset != count:
        raise FormatError(f"{path}: expected {count} payload bytes, found {len(buf) - offset}")
    return np.frombuffer(buf, dtype=np.uint8, offset=offset).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; pixels come back as float64 in [0, 1].

    Single-channel image files (N x H x W) gain a channel axis.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, also_accept=(IDX_COLOR_IMAGES_MAGIC,))
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    x = images.astype(np.float64) / 255.0
    if x.ndim == 3:
        x = x[:, None]
    return x, labels.astype(np.int64)


def write_idx(images_path, labels_path, x: np.ndarray, y: np.ndarray) -> None:
    """Inverse of :func:`load_idx`; pixels are rounded back to u8.

    A single channel axis is dropped again so loaded files round-trip
    byte-for-byte.
    """
    pixels = np.rint(np.asarray(x) * 255.0).astype(np.uint8)
    if pixels.ndim == 4 and pixels.shape[1] == 1:
        pixels = pixels[:, 0]
    labels = np.asarray(y).astype(np.uint8)
    for path, arr, magic in ((images_path, pixels, 0x0800 | pixels.ndim), (labels_path, labels, IDX_LABELS_MAGIC)):
        header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
        Path(path).write_bytes(header + arr.tobytes())
