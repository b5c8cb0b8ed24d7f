"""Binary named-tensor container used for checkpoints and feature files.

Layout (little-endian):

    b"PFCK" | u32 version | u32 len + utf-8 config text | u64 step | u32 count
    then per tensor: u32 len + utf-8 name | u8 dtype tag | u32 ndim | ndim x u64 | payload

Payloads are row-major. Dtype tags: 0 float32, 1 float64, 2 int64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PFCK"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    """Unreadable, foreign or incompatible container."""


@dataclass
class Container:
    tensors: dict[str, np.ndarray]
    config_text: str = ""
    step: int = 0


def save(path: str | Path, tensors: dict[str, np.ndarray], config_text: str = "", step: int = 0) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    cfg = config_text.encode("utf-8")
    chunks += [struct.pack("<I", len(cfg)), cfg, struct.pack("<QI", step, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        tag = _TAG_OF[arr.dtype]
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<BI", tag, arr.ndim)]
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load(path: str | Path) -> Container:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    (n,) = take("<I")
    config_text = buf[pos : pos + n].decode("utf-8")
    pos += n
    step, count = take("<QI")
    tensors = {}
    for _ in range(count):
        (n,) = take("<I")
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        tag, ndim = take("<BI")
        if tag not in _TAGS:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = take(f"<{ndim}Q") if ndim else ()
        dt = _TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += nbytes
    return Container(tensors, config_text, step)


def save_features(path: str | Path, features: np.ndarray, ids, cams, config_text: str = "") -> None:
    save(path, {
        "features": np.asarray(features),
        "ids": np.asarray(ids, dtype=np.int64),
        "cams": np.asarray(cams, dtype=np.int64),
    }, config_text)


def load_features(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = load(path)
    try:
        return c.tensors["features"], c.tensors["ids"], c.tensors["cams"]
    except KeyError as e:
        raise CheckpointError(f"{path}: not a feature file (missing {e})") from e
