"""Binary PGM (P5) images and JSON lesion annotations: the ingestion boundary.

Any corpus laid out as ``images/<id>.pgm`` + ``annotations/<id>.json`` can be
read, whether it came from the phantom generator or from real data.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from . import audit


class PGMError(ValueError):
    pass


def write_pgm(path, pixels: np.ndarray) -> None:
    """Write a 2-D uint8 (maxval 255) or uint16 (maxval 65535, big-endian) array."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise PGMError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    if pixels.dtype == np.uint8:
        maxval, payload = 255, pixels.tobytes()
    elif pixels.dtype == np.uint16:
        maxval, payload = 65535, pixels.astype(">u2").tobytes()
    else:
        raise PGMError(f"PGM pixels must be uint8 or uint16, got {pixels.dtype}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(payload)


def _tokens(buf: bytes, count: int):
    out, pos = [], 2
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        out.append(int(buf[start:pos]))
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    audit.record_read(path)
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (P5)")
    (w, h, maxval), pos = _tokens(buf, 3)
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    need = w * h * np.dtype(dtype).itemsize
    if len(buf) - pos < need:
        raise PGMError(f"{path}: pixel payload truncated ({len(buf) - pos} of {need} bytes)")
    arr = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(np.uint8 if maxval < 256 else np.uint16)


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path):
    audit.record_read(path)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def list_ids(corpus_dir) -> list:
    names = os.listdir(os.path.join(corpus_dir, "annotations"))
    return sorted(n[:-5] for n in names if n.endswith(".json"))
