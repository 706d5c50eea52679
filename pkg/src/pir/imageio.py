"""Binary portable pixmap (P6, maxval 255) for [3, H, W] images in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from pir.errors import MissingArtifactError, ShapeError


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Linear clamp [0, 1] -> [0, 255], rounded to nearest; returns [H, W, 3] uint8."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected [3, H, W], got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, img: np.ndarray) -> None:
    data = to_bytes(img)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    """[3, H, W] float64 in [0, 1]."""
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"image {p} not found")
    raw = p.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.find(b"\n", pos) + 1 or len(raw)
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise ValueError(f"{p}: truncated pixmap header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or not all(t.isdigit() for t in tokens[1:]) or int(tokens[3]) != 255:
        raise ValueError(f"{p}: not an 8-bit P6 pixmap")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:]
    if len(body) != w * h * 3:
        raise ValueError(f"{p}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1) / 255.0
