"""N2BT binary tensor container and 8-bit PGM image I/O."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"N2BT"


class TensorFileError(ValueError):
    pass


def encode_tensor(x) -> bytes:
    x = np.asarray(x, dtype="<f8")
    head = MAGIC + struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return head + x.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TensorFileError(f"bad magic {buf[:4]!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != 8 * count:
        raise TensorFileError(f"payload of {len(buf) - off} bytes does not fit shape {shape}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)


def write_tensor(path, x) -> None:
    Path(path).write_bytes(encode_tensor(x))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_pgm(path, img) -> None:
    """Write a 2-D image with values in [0, 1] as binary 8-bit PGM (P5)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise TensorFileError(f"PGM needs a 2-D image, got shape {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5, maxval <= 255) into float64 values in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise TensorFileError(f"only binary P5 PGM is supported, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise TensorFileError("16-bit PGM is not supported")
    pos += 1
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval
