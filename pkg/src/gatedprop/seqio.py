"""On-disk formats: netpbm images, sequence directories, weight files.

A sequence directory holds frames/NNNNN.ppm (binary P6), masks/NNNNN.pgm
(binary P5, pixel value = object index), and a meta.txt of key=value
lines (width, height, frames, objects, seed).

Weight files are a flat named-tensor container:
  magic "DEAOTW1\\0", u32 tensor count, then per tensor u16 name length,
  UTF-8 name, u8 ndim, u32 per dimension, u8 dtype code (0 = float32,
  1 = float64), raw little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError

WEIGHTS_MAGIC = b"DEAOTW1\x00"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


# -- netpbm ------------------------------------------------------------


def _read_pnm_tokens(buf: bytes, count: int):
    """First `count` whitespace tokens after the magic, skipping # comments.
    Returns (tokens, offset of binary payload)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(buf):
            raise DimensionError("truncated netpbm header")
        c = buf[i:i + 1]
        if c == b"#":
            while i < len(buf) and buf[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j:j + 1].isspace():
                j += 1
            tokens.append(buf[i:j])
            i = j
    return tokens, i + 1  # single whitespace separates header from payload


def write_pgm(path, values: np.ndarray):
    arr = np.asarray(values, dtype=np.uint8)
    if arr.ndim != 2:
        raise DimensionError("PGM payload must be 2D")
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P5"):
        raise DimensionError(f"{path}: not a binary PGM")
    (w, h, maxval), off = _read_pnm_tokens(buf[2:], 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DimensionError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=2 + off)
    return data.reshape(h, w).copy()


def write_ppm(path, rgb: np.ndarray):
    arr = np.asarray(rgb, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError("PPM payload must be HxWx3")
    h, w, _ = arr.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P6"):
        raise DimensionError(f"{path}: not a binary PPM")
    (w, h, maxval), off = _read_pnm_tokens(buf[2:], 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DimensionError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(buf, dtype=np.uint8, count=h * w * 3, offset=2 + off)
    return data.reshape(h, w, 3).copy()


# -- sequence directories ----------------------------------------------


def frame_name(i: int) -> str:
    return f"{i:05d}"


def write_meta(path, meta: dict):
    lines = [f"{k}={meta[k]}" for k in meta]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path) -> dict:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"{path}: bad meta line {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def write_sequence(root, frames, masks, meta: dict):
    """frames: list of HxWx3 uint8; masks: list of MaskMap or 2D arrays."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, (fr, mk) in enumerate(zip(frames, masks)):
        write_ppm(root / "frames" / f"{frame_name(i)}.ppm", fr)
        write_pgm(root / "masks" / f"{frame_name(i)}.pgm", getattr(mk, "values", mk))
    write_meta(root / "meta.txt", meta)


def read_sequence(root):
    """Returns (frames, masks, meta); masks may be missing (empty list)."""
    root = Path(root)
    meta = read_meta(root / "meta.txt") if (root / "meta.txt").exists() else {}
    frame_paths = sorted((root / "frames").glob("*.ppm"))
    if not frame_paths:
        raise ContractError(f"{root}: no frames/*.ppm found")
    frames = [read_ppm(p) for p in frame_paths]
    masks = []
    mask_dir = root / "masks"
    if mask_dir.is_dir():
        for p in frame_paths:
            mp = mask_dir / (p.stem + ".pgm")
            masks.append(read_pgm(mp) if mp.exists() else None)
    return frames, masks, meta


# -- weight files -------------------------------------------------------


def save_weights(path, named: dict):
    """Write name -> Tensor/ndarray pairs in deterministic (sorted) order."""
    chunks = [WEIGHTS_MAGIC, struct.pack("<I", len(named))]
    for name in sorted(named):
        arr = named[name]
        arr = np.asarray(getattr(arr, "data", arr))
        code = _CODE_OF.get(arr.dtype)
        if code is None:
            raise ContractError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<B", code))
        chunks.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> dict:
    buf = Path(path).read_bytes()
    if not buf.startswith(WEIGHTS_MAGIC):
        raise ContractError(f"{path}: bad magic, not a weights file")
    off = len(WEIGHTS_MAGIC)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        (code,) = struct.unpack_from("<B", buf, off)
        off += 1
        dt = _DTYPE_CODES.get(code)
        if dt is None:
            raise ContractError(f"{path}: unknown dtype code {code}")
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims)
        off += n * dt.itemsize
        out[name] = arr.astype(dt.newbyteorder("=")).copy()
    return out
