"""Versioned binary checkpoint container.

Layout: 8-byte magic, u32 version, u32 header length, JSON header (kind,
config echo, sorted parameter names), then one record per parameter
(u32 name length, name, u8 ndim, i64 dims, float64 little-endian payload).
Round-trips byte-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"CHOIRCKP"
VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], kind: str, config: dict):
    names = sorted(params)
    header = json.dumps({"kind": kind, "config": config, "param_names": names},
                        sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(header))
    out += header
    for name in names:
        arr = np.ascontiguousarray(np.asarray(params[name], dtype="<f8"))
        name_b = name.encode("utf-8")
        out += struct.pack("<I", len(name_b)) + name_b
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}q", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, expected_kind: str | None = None):
    """Returns (kind, config, params)."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise DataFormatError(f"checkpoint: bad magic in {path}")
    version, head_len = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise DataFormatError(f"checkpoint: version {version} unsupported (expected {VERSION})")
    pos = 16
    header = json.loads(blob[pos:pos + head_len].decode("utf-8"))
    pos += head_len
    if expected_kind is not None and header["kind"] != expected_kind:
        raise DataFormatError(
            f"checkpoint: kind '{header['kind']}' where '{expected_kind}' was required")
    params = {}
    for name in header["param_names"]:
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        got = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if got != name:
            raise DataFormatError(f"checkpoint: parameter order mismatch at '{got}'")
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}q", blob, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        nbytes = count * 8
        if pos + nbytes > len(blob):
            raise DataFormatError("checkpoint: truncated payload")
        params[name] = np.frombuffer(blob[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise DataFormatError("checkpoint: trailing bytes")
    return header["kind"], header["config"], params


def apply_parameters(module, params: dict[str, np.ndarray], prefix: str = "",
                     require_all: bool = True):
    """Copy checkpoint arrays into a module's named parameters (shape-checked)."""
    named = module.named_parameters()
    missing = []
    for name, tensor in named.items():
        key = prefix + name
        if key not in params:
            missing.append(key)
            continue
        arr = params[key]
        if arr.shape != tensor.data.shape:
            raise DataFormatError(
                f"checkpoint: parameter '{key}' has shape {arr.shape}, model wants {tensor.data.shape}")
        tensor.data = arr.astype(np.float64).copy()
    if require_all and missing:
        raise DataFormatError(f"checkpoint: missing parameters {missing[:5]} (+{max(0, len(missing) - 5)} more)")
