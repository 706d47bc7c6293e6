"""Binary PPM (P6, 8-bit) image dumps for bit-exact fixtures."""

from __future__ import annotations

import numpy as np


def write_ppm(path, image01: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary P6."""
    img = np.asarray(image01, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file back into an (H, W, 3) float image in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM (P6) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    pos += 1  # single whitespace byte after maxval
    pix = np.frombuffer(raw[pos : pos + w * h * 3], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise ValueError("truncated PPM payload")
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0
