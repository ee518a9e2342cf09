"""Netpbm (PPM P6 / PGM P5, 8-bit) readers and writers."""

from pathlib import Path

import numpy as np


def _to_u8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, rgb) -> None:
    """``rgb`` is (H, W, 3) in [0, 1]."""
    data = _to_u8(rgb)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm(path, gray) -> None:
    """``gray`` is (H, W) in [0, 1]; boolean masks map to 0/255."""
    g = np.asarray(gray)
    data = (g.astype(np.uint8) * 255) if g.dtype == bool else _to_u8(g)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def _read_netpbm(path, magic):
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode())
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic} file, found {tokens[0]}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return raw[pos + 1 :], w, h


def read_ppm(path) -> np.ndarray:
    body, w, h = _read_netpbm(path, "P6")
    return np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    body, w, h = _read_netpbm(path, "P5")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    """PGM as boolean: nonzero means set."""
    return read_pgm(path) > 0
