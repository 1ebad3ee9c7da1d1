"""Binary PGM (P5) / PPM (P6) reading and writing, maxval 255."""

from __future__ import annotations

import os
from typing import Tuple, Union

import numpy as np

PathLike = Union[str, os.PathLike]


def _tokens(buf: bytes, count: int) -> Tuple[list, int]:
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        out.append(buf[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte before the raster


def _read(path: PathLike, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    toks, start = _tokens(buf, 4)
    if toks[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, got {toks[0]!r}")
    w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    ch = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=start)
    return data.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


def read_pgm(path: PathLike) -> np.ndarray:
    return _read(path, b"P5")


def read_ppm(path: PathLike) -> np.ndarray:
    return _read(path, b"P6")


def write_pgm(path: PathLike, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM expects a 2-D array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def write_ppm(path: PathLike, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM expects an (H, W, 3) array")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] float -> uint8 with round-half-to-even."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_image(path: PathLike) -> np.ndarray:
    """Dequantised float32 image in [0, 1]."""
    return read_pgm(path).astype(np.float32) / np.float32(255.0)
