"""PFM / PGM / PPM readers and writers.

Depth and float maps go to grayscale PFM ("Pf", little-endian, rows
stored bottom-to-top).  Masks and visualizations go to 8-bit binary PGM,
RGB to 8-bit binary PPM.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DimensionMismatch, IoFailure, MalformedHeader


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def _write_bytes(path, payload: bytes) -> None:
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _header_tokens(buf: bytes, count: int, comments: bool):
    """Return ``count`` whitespace-separated header tokens and the payload offset.

    The payload starts after exactly one whitespace byte following the
    last token.
    """
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos:pos + 1].isspace() or (comments and buf[pos:pos + 1] == b"#")):
            if buf[pos:pos + 1] == b"#":
                while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeader("unexpected end of header")
        tokens.append(buf[start:pos].decode("ascii", errors="replace"))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise MalformedHeader("header not terminated by whitespace")
    return tokens, pos + 1


def _parse_dims(w_tok: str, h_tok: str):
    try:
        w, h = int(w_tok), int(h_tok)
    except ValueError as e:
        raise MalformedHeader(f"bad dimensions {w_tok!r} {h_tok!r}") from e
    if w <= 0 or h <= 0:
        raise MalformedHeader(f"non-positive dimensions {w}x{h}")
    return h, w


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a ``float32`` array in top-to-bottom row order."""
    buf = _read_bytes(path)
    tokens, off = _header_tokens(buf, 4, comments=False)
    if tokens[0] != "Pf":
        raise MalformedHeader(f"expected 'Pf' magic, got {tokens[0]!r}")
    h, w = _parse_dims(tokens[1], tokens[2])
    try:
        scale = float(tokens[3])
    except ValueError as e:
        raise MalformedHeader(f"bad scale token {tokens[3]!r}") from e
    if scale == 0 or not np.isfinite(scale):
        raise MalformedHeader("scale must be finite and non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    need = h * w * 4
    payload = buf[off:]
    if len(payload) < need:
        raise MalformedHeader(f"payload truncated: {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise DimensionMismatch(f"payload has {len(payload) - need} trailing bytes")
    data = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def write_pfm(d, path) -> None:
    d = np.asarray(d)
    if d.ndim != 2:
        raise DimensionMismatch(f"PFM writer expects a 2-D map, got {d.shape}")
    h, w = d.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(np.flipud(d), dtype="<f4").tobytes()
    _write_bytes(path, header + body)


def _read_pnm(path, magic: str, channels: int) -> np.ndarray:
    buf = _read_bytes(path)
    tokens, off = _header_tokens(buf, 4, comments=True)
    if tokens[0] != magic:
        raise MalformedHeader(f"expected {magic!r} magic, got {tokens[0]!r}")
    h, w = _parse_dims(tokens[1], tokens[2])
    try:
        maxval = int(tokens[3])
    except ValueError as e:
        raise MalformedHeader(f"bad maxval {tokens[3]!r}") from e
    if not 0 < maxval < 256:
        raise MalformedHeader(f"only 8-bit files are supported (maxval={maxval})")
    need = h * w * channels
    payload = buf[off:]
    if len(payload) < need:
        raise MalformedHeader(f"payload truncated: {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise DimensionMismatch(f"payload has {len(payload) - need} trailing bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return arr.reshape(shape).copy()


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 file as a ``uint8`` (H, W) array."""
    return _read_pnm(path, "P5", 1)


def write_pgm(img, path) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise DimensionMismatch(f"PGM writer expects a 2-D image, got {img.shape}")
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    img = np.clip(img, 0, 255).astype(np.uint8)
    h, w = img.shape
    _write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_mask(path) -> np.ndarray:
    return read_pgm(path) > 127


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit P6 file as float RGB in [0, 1]."""
    return _read_pnm(path, "P6", 3).astype(np.float64) / 255.0


def write_ppm(rgb, path) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionMismatch(f"PPM writer expects (H, W, 3), got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = rgb.shape[:2]
    _write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def to_gray8(values, lo: float | None = None, hi: float | None = None, gamma: float = 1.0,
             mask=None) -> np.ndarray:
    """Linearly map ``values`` onto 0..255 over [lo, hi] (data range by default).

    ``gamma`` < 1 brightens small values.  Pixels outside ``mask`` are 0.
    """
    v = np.asarray(values, dtype=np.float64)
    sel = np.ones(v.shape, bool) if mask is None else np.asarray(mask, bool)
    if not sel.any():
        return np.zeros(v.shape, np.uint8)
    lo = float(v[sel].min()) if lo is None else lo
    hi = float(v[sel].max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    t = np.clip((v - lo) / span, 0.0, 1.0) ** gamma
    out = np.round(t * 255.0).astype(np.uint8)
    out[~sel] = 0
    return out


def ensure_dir(path) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create directory {path}: {e}") from e
