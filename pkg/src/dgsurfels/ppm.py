"""Binary PPM (P6, 8-bit) image I/O.

Chosen for byte-level reproducibility: values quantize by round(255 * v) and
read back as v = byte / 255, so a write-read round trip moves any channel by
at most 1/510.
"""

from __future__ import annotations

import numpy as np

from .errors import IoError, MalformedHeader


def write_image(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise IoError(f"expected HxWx3 image, got {img.shape}")
    h, w, _ = img.shape
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    try:
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(data.tobytes())
    except OSError as e:
        raise IoError(str(e)) from e


def _read_token(f) -> bytes:
    # skips whitespace and '#' comments between header tokens
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise MalformedHeader("unexpected end of header")
        if c == b"#":
            while c and c != b"\n":
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_image(path) -> np.ndarray:
    try:
        f = open(path, "rb")
    except OSError as e:
        raise IoError(str(e)) from e
    with f:
        magic = f.read(2)
        if magic != b"P6":
            raise MalformedHeader(f"not a P6 file: {magic!r}")
        try:
            w = int(_read_token(f))
            h = int(_read_token(f))
            maxval = int(_read_token(f))
        except ValueError as e:
            raise MalformedHeader(f"bad header field: {e}") from e
        if w < 1 or h < 1 or maxval != 255:
            raise MalformedHeader(f"unsupported header: {w}x{h} max {maxval}")
        data = f.read(w * h * 3)
        if len(data) != w * h * 3:
            raise MalformedHeader(
                f"truncated pixel data: {len(data)} of {w * h * 3} bytes"
            )
        img = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
        return img.astype(np.float64) / 255.0
