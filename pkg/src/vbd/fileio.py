"""NetPBM (P5/P6) images and the raw little-endian float64 map container."""

from __future__ import annotations

import struct

import numpy as np

FLOAT_MAGIC = b"VBDF"
FLOAT_VERSION = 1


class FormatError(ValueError):
    pass


def _quantize(values):
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, values):
    """Grayscale P5; values in [0, 1] (booleans map to 0/255)."""
    q = _quantize(np.asarray(values, dtype=np.float64))
    if q.ndim != 2:
        raise ValueError("PGM needs a 2-D map")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (q.shape[1], q.shape[0]))
        fh.write(q.tobytes())


def write_ppm(path, image):
    """Color P6; a single-channel image is written as P5 instead."""
    q = _quantize(image)
    if q.ndim == 3 and q.shape[2] == 1:
        return write_pgm(path, np.asarray(image)[..., 0])
    if q.ndim != 3 or q.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (q.shape[1], q.shape[0]))
        fh.write(q.tobytes())


def _tokens(raw, count, path):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise FormatError(f"{path}: truncated header")
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        out.append(raw[start:pos])
    return out, pos + 1


def read_netpbm(path):
    """Read a binary P5/P6 file as uint8 of shape (H, W) or (H, W, 3)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    (magic, w, h, maxval), pos = _tokens(raw, 4, path)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported NetPBM magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: only 8-bit maxval is supported, got {maxval}")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    data = np.frombuffer(raw, dtype=np.uint8, count=min(need, max(0, len(raw) - pos)), offset=min(pos, len(raw)))
    if data.size != need:
        raise FormatError(f"{path}: expected {need} pixel bytes after offset {pos}, found {data.size}")
    data = data.reshape((h, w, 3) if ch == 3 else (h, w))
    if maxval != 255:
        data = np.rint(data.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return data


def read_image(path):
    """A NetPBM file as float64 in [0, 1] with shape (H, W, C)."""
    data = read_netpbm(path).astype(np.float64) / 255.0
    return data if data.ndim == 3 else data[..., None]


def write_float_container(path, values):
    v = np.asarray(values, dtype="<f8")
    shape = v.shape + (1,) * (3 - v.ndim)
    if len(shape) != 3:
        raise ValueError("float container holds (H, W) or (H, W, C) arrays")
    with open(path, "wb") as fh:
        fh.write(FLOAT_MAGIC + struct.pack("<HIIIB", FLOAT_VERSION, *shape, v.ndim))
        fh.write(v.tobytes())


def read_float_container(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FLOAT_MAGIC:
        raise FormatError(f"{path}: not a float container")
    version, h, w, c, ndim = struct.unpack_from("<HIIIB", raw, 4)
    if version != FLOAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<HIIIB")
    n = h * w * c
    if len(raw) - off != 8 * n:
        raise FormatError(f"{path}: expected {8 * n} payload bytes after offset {off}, found {len(raw) - off}")
    v = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64).reshape(h, w, c)
    return v[..., 0] if ndim == 2 else v
