"""Single-file model checkpoints.

Layout::

    b"MASV1"                     5-byte magic
    uint32 LE                    header length in bytes
    header (UTF-8 text)          key=value config lines, a line "--", then one
                                 manifest line per tensor: name dtype shape offset nbytes
    payload                      raw little-endian tensor bytes at the manifest offsets

Parameters are stored as float32 unless the model itself is float64 (then the
payload is float64 so training can resume bit-identically).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .blocks import MASV, ModelConfig
from .errors import ParseError

MAGIC = b"MASV1"
_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


def _encode_value(v) -> str:
    return json.dumps(v, sort_keys=True)


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    lines = [f"{k}={_encode_value(v)}" for k, v in meta.items()]
    lines.append("--")
    payload = []
    offset = 0
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else ("f8" if arr.dtype == np.float64 else "f4")
        buf = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        shape = "x".join(str(n) for n in arr.shape) or "scalar"
        lines.append(f"{name} {code} {shape} {offset} {len(buf)}")
        payload.append(buf)
        offset += len(buf)
    header = ("\n".join(lines) + "\n").encode()
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(header)) + header + b"".join(payload))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise ParseError(f"{path}: not a MASV1 checkpoint", 0)
    if len(raw) < 9:
        raise ParseError(f"{path}: truncated header", 5)
    (hlen,) = struct.unpack_from("<I", raw, 5)
    start = 9 + hlen
    if start > len(raw):
        raise ParseError(f"{path}: header length {hlen} exceeds file size", 5)
    text = raw[9:start].decode()
    meta_part, _, manifest = text.partition("--\n")
    meta = {}
    for line in meta_part.splitlines():
        key, _, value = line.partition("=")
        meta[key] = json.loads(value)
    tensors = {}
    for line in manifest.splitlines():
        name, code, shape, offset, nbytes = line.split()
        shape_t = () if shape == "scalar" else tuple(int(n) for n in shape.split("x"))
        offset, nbytes = int(offset), int(nbytes)
        lo = start + offset
        if lo + nbytes > len(raw):
            raise ParseError(f"{path}: tensor {name} runs past end of file", lo)
        arr = np.frombuffer(raw, dtype=_DTYPES[code], count=nbytes // np.dtype(_DTYPES[code]).itemsize, offset=lo)
        tensors[name] = arr.reshape(shape_t).copy()
    return meta, tensors


def save_checkpoint(path, model: MASV, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Model config + parameters + buffers, plus any extra named arrays (optimizer state)."""
    header = {"format": "MASV1", "dtype": str(model.dtype)}
    header.update({f"config.{k}": v for k, v in model.cfg.to_dict().items()})
    header.update(meta or {})
    tensors = dict(model.state_dict())
    for k, v in (extra or {}).items():
        tensors[f"extra:{k}"] = v
    write_container(path, header, tensors)


def load_checkpoint(path) -> tuple[MASV, dict, dict[str, np.ndarray]]:
    meta, tensors = read_container(path)
    cfg = ModelConfig.from_dict({k[7:]: v for k, v in meta.items() if k.startswith("config.")})
    dtype = np.dtype(meta.get("dtype", "float32"))
    model = MASV(cfg, dtype=dtype)
    extra = {k[6:]: v for k, v in tensors.items() if k.startswith("extra:")}
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("extra:")})
    user_meta = {k: v for k, v in meta.items() if not k.startswith("config.") and k not in ("format", "dtype")}
    return model, user_meta, extra


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
