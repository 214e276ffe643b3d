"""ModelPackage: the binary container in which trained models leave a centre.

Layout (all integers little-endian)::

    "MGPK" | version u16 | kind u8 | tensor_count u32 | manifest_len u32 | manifest (UTF-8 JSON)
    tensor section: per tensor  name_len u16 | name | dtype u8 | rank u8 | extents u32 * rank | payload
    SHA-256 of every preceding byte (32 bytes)

The manifest's ``content_hash`` is the SHA-256 of the tensor section alone.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

MAGIC = b"MGPK"
FORMAT_VERSION = 1
KINDS = {"generator": 0, "classifier": 1}
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}
HASH_LEN = 32
_HEADER = struct.Struct("<4sHBII")
MANIFEST_FIELDS = ("model_id", "centre_id", "variant", "architecture", "config_digest", "epochs",
                   "checkpoint_epochs", "created_at")


class PackageError(ValueError):
    pass


class ParseError(PackageError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class IntegrityError(PackageError):
    def __init__(self, which: str):
        super().__init__(f"{which} mismatch: package is corrupt")
        self.which = which


class VersionError(PackageError):
    pass


@dataclass
class ModelPackage:
    kind: str
    manifest: dict
    tensors: dict = field(default_factory=dict)  # name -> ndarray, in file order
    version: int = FORMAT_VERSION

    @property
    def model_id(self) -> str:
        return self.manifest["model_id"]


def default_created_at() -> str:
    """UTC timestamp; SOURCE_DATE_EPOCH pins it for reproducible builds."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    ts = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


def _tensor_section(tensors: dict) -> bytes:
    parts = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise PackageError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if not np.isfinite(arr).all():
            raise PackageError(f"tensor {name!r} has non-finite values")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise PackageError(f"tensor {name!r}: name or rank too large")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
    return b"".join(parts)


def package_write(kind: str, tensors: dict, manifest_fields: dict) -> bytes:
    if kind not in KINDS:
        raise PackageError(f"kind must be one of {sorted(KINDS)}, got {kind!r}")
    missing = [k for k in MANIFEST_FIELDS if k not in manifest_fields]
    if missing:
        raise PackageError(f"manifest missing fields: {', '.join(missing)}")
    section = _tensor_section(tensors)
    manifest = dict(manifest_fields, content_hash=hashlib.sha256(section).hexdigest())
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, KINDS[kind], len(tensors), len(mbytes)) + mbytes + section
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ParseError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def package_read(data: bytes) -> ModelPackage:
    """Parse and verify (trailing file hash, then content hash) a package."""
    data = bytes(data)
    r = _Reader(data)
    magic, version, kind_code, count, mlen = r.unpack(_HEADER.format, "header")
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported package version {version} (reader supports {FORMAT_VERSION})")
    kinds = {v: k for k, v in KINDS.items()}
    if kind_code not in kinds:
        raise ParseError(f"unknown kind code {kind_code}", 6)
    mbytes = r.take(mlen, "manifest")
    section_start = r.pos
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name_at = r.pos
        raw_name = r.take(nlen, "tensor name")
        tag, rank = r.unpack("<BB", "tensor dtype/rank")
        if tag not in DTYPES:
            raise ParseError(f"unknown dtype tag {tag}", r.pos - 2)
        shape = r.unpack(f"<{rank}I", "tensor extents")
        size = math.prod(shape) * DTYPES[tag].itemsize  # python ints: corrupt extents must not wrap
        payload = r.take(size, "tensor payload")
        entries.append((raw_name, name_at, DTYPES[tag], shape, payload))
    section = data[section_start:r.pos]
    digest = r.take(HASH_LEN, "trailing hash")
    if r.pos != len(data):
        raise ParseError(f"{len(data) - r.pos} unexpected trailing bytes", r.pos)
    if hashlib.sha256(data[:-HASH_LEN]).digest() != digest:
        raise IntegrityError("file_hash")
    try:
        manifest = json.loads(mbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"manifest is not valid JSON ({exc})", _HEADER.size) from exc
    if manifest.get("content_hash") != hashlib.sha256(section).hexdigest():
        raise IntegrityError("content_hash")
    tensors = {}
    for raw_name, name_at, dtype, shape, payload in entries:
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("tensor name is not UTF-8", name_at) from exc
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return ModelPackage(kinds[kind_code], manifest, tensors, version)


def write_file(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_file(path) -> ModelPackage:
    with open(path, "rb") as fh:
        return package_read(fh.read())
