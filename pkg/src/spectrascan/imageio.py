"""Binary PGM / PFM readers and writers plus JSON manifest helpers.

PGM (P5) is big-endian for 16-bit data per the netpbm spec. PFM stores rows
bottom-to-top; arrays handed to and returned from this module are always
top-to-bottom.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_pgm(path, image: np.ndarray, maxval: int | None = None) -> None:
    """Write a grayscale image. Float input in [0, 1] is quantised to ``maxval``."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if np.issubdtype(image.dtype, np.floating):
        maxval = maxval or 65535
        data = np.round(np.clip(image, 0.0, 1.0) * maxval)
    else:
        maxval = maxval or (255 if image.max(initial=0) < 256 else 65535)
        data = image
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data.astype(dtype)).tobytes())


def _read_tokens(fh, n):
    tokens = []
    while len(tokens) < n:
        line = fh.readline()
        if not line:
            raise ValueError("truncated header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def read_pgm(path, normalize: bool = True) -> np.ndarray:
    """Read a binary PGM. With ``normalize`` the result is float in [0, 1]."""
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_tokens(fh, 4)
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        w, h, maxval = int(w), int(h), int(maxval)
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h).reshape(h, w)
    if normalize:
        return data.astype(float) / maxval
    return data.astype(np.uint16 if maxval > 255 else np.uint8)


def write_pfm(path, image: np.ndarray) -> None:
    """Write a 1- or 3-channel float32 PFM (little-endian)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        magic = "Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = "PF"
    else:
        raise ValueError("PFM images must be HxW or HxWx3")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, scale = _read_tokens(fh, 4)
        channels = {b"PF": 3, b"Pf": 1}.get(magic)
        if channels is None:
            raise ValueError(f"{path}: not a PFM file")
        w, h, scale = int(w), int(h), float(scale)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def read_json(path):
    return json.loads(Path(path).read_text())
