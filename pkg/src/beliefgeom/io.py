"""Binary artifact formats.

Two layouts, both little-endian:

* ActivationDump (magic ``BGAD``): one 2-D array. Header is magic, u16
  version, u8 dtype code, u8 ndim, u64 per dim, u32 info length, UTF-8 JSON
  info; the row-major payload fills the rest of the file. Row metadata
  (sequence id, position, per-component beliefs) lives in a sidecar
  ``<path>.meta`` tensor container.
* Tensor container (checkpoints, sidecars, bases): magic, u16 version, u32
  info length, JSON info, u32 tensor count, then per tensor u16 name length,
  name, u8 dtype code, u8 ndim, u64 per dim, payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
    np.dtype("u1"): 5,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}

DUMP_MAGIC = b"BGAD"
META_MAGIC = b"BGMD"


class FormatError(ValueError):
    """Wrong magic, unsupported version or malformed header."""


class CorruptionError(ValueError):
    """Payload length does not match the header."""

    def __init__(self, path, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{path}: payload has {actual} bytes, header implies {expected}")


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    try:
        return DTYPE_CODES[np.dtype(dt)]
    except KeyError:
        raise FormatError(f"unsupported dtype {arr.dtype}") from None


def _info_bytes(info: dict) -> bytes:
    return json.dumps(info, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_container(magic: bytes, tensors: dict[str, np.ndarray], info: dict | None = None) -> bytes:
    parts = [magic, struct.pack("<H", FORMAT_VERSION)]
    blob = _info_bytes(info or {})
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        code = _dtype_code(arr)
        arr = arr.astype(CODE_DTYPES[code], copy=False)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def write_container(path, magic: bytes, tensors: dict[str, np.ndarray], info: dict | None = None) -> None:
    atomic_write_bytes(path, encode_container(magic, tensors, info))


def read_container(path, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    pos = 4
    try:
        (version,) = struct.unpack_from("<H", raw, pos)
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        pos += 2
        (ilen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        info = json.loads(raw[pos:pos + ilen].decode("utf-8"))
        pos += ilen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            dt = CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise CorruptionError(path, nbytes, len(raw) - pos)
            tensors[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    return tensors, info


@dataclass
class ActivationDump:
    """Row-aligned 2-D array with optional metadata columns.

    ``meta`` maps column names to arrays whose first dimension equals the row
    count: ``seq_id``, ``position`` and ``belief/<component>`` by convention.
    """

    data: np.ndarray
    meta: dict[str, np.ndarray] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 2:
            raise FormatError(f"activation dumps are 2-D, got shape {self.data.shape}")
        for k, v in self.meta.items():
            if len(v) != self.data.shape[0]:
                raise FormatError(f"metadata column {k} has {len(v)} rows, data has {self.data.shape[0]}")

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    def beliefs(self) -> dict[str, np.ndarray]:
        return {k.split("/", 1)[1]: v for k, v in self.meta.items() if k.startswith("belief/")}

    def has_beliefs(self) -> bool:
        return any(k.startswith("belief/") for k in self.meta)

    def require_beliefs(self) -> dict[str, np.ndarray]:
        if not self.has_beliefs():
            raise ValueError(
                "this stage needs ground-truth beliefs, but the activation dump carries no belief/* metadata"
            )
        return self.beliefs()


def write_dump(path, dump: ActivationDump) -> None:
    arr = np.ascontiguousarray(dump.data)
    code = _dtype_code(arr)
    arr = arr.astype(CODE_DTYPES[code], copy=False)
    blob = _info_bytes(dump.info)
    header = DUMP_MAGIC + struct.pack("<HBB", FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<I", len(blob)) + blob
    if dump.meta:
        write_container(str(path) + ".meta", META_MAGIC, dump.meta, {"rows": arr.shape[0]})
    atomic_write_bytes(path, header + arr.tobytes())


def read_dump(path) -> ActivationDump:
    """Load and validate an activation dump (and its sidecar, if present)."""
    raw = Path(path).read_bytes()
    if raw[:4] != DUMP_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {DUMP_MAGIC!r}")
    try:
        version, code, ndim = struct.unpack_from("<HBB", raw, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if code not in CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        pos = 8
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        (ilen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        info = json.loads(raw[pos:pos + ilen].decode("utf-8"))
        pos += ilen
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if ndim != 2:
        raise FormatError(f"{path}: expected a 2-D dump, header says ndim={ndim}")
    dt = CODE_DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    actual = len(raw) - pos
    if actual != expected:
        raise CorruptionError(path, expected, actual)
    data = np.frombuffer(raw, dtype=dt, offset=pos).reshape(shape).copy()
    meta = {}
    side = Path(str(path) + ".meta")
    if side.exists():
        meta, _ = read_container(side, META_MAGIC)
    return ActivationDump(data, meta, info)


import_dump = read_dump
