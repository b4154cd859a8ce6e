"""Flat binary checkpoint container.

Layout: 8-byte magic ``AHLCKPT1``, little-endian u32 version, little-endian
u32 metadata length, UTF-8 JSON metadata (sorted keys; includes the ordered
parameter name/shape list), then the raw parameter tensors in declaration
order as little-endian 64-bit reals.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"AHLCKPT1"
VERSION = 1


def write_checkpoint(path: str | Path, kind: str, meta: dict,
                     params: list[tuple[str, np.ndarray]]) -> None:
    meta = dict(meta)
    meta["kind"] = kind
    meta["params"] = [[name, list(arr.shape)] for name, arr in params]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for _, arr in params:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path, expect_kind: str | None = None
                    ) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated checkpoint header at byte {len(raw)}")
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r} at byte 0")
    version, meta_len = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 16 + meta_len:
        raise FormatError(f"{path}: truncated metadata at byte {len(raw)}")
    try:
        meta = json.loads(raw[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed metadata at byte 16") from exc
    if expect_kind is not None and meta.get("kind") != expect_kind:
        raise FormatError(f"{path}: expected kind {expect_kind!r}, found {meta.get('kind')!r}")
    offset = 16 + meta_len
    params: list[tuple[str, np.ndarray]] = []
    for name, shape in meta.get("params", []):
        count = int(np.prod(shape)) if shape else 1
        need = count * 8
        if len(raw) - offset < need:
            raise FormatError(
                f"{path}: truncated tensor {name!r} at byte {len(raw)} "
                f"(need {offset + need} bytes)"
            )
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        params.append((name, arr.astype(np.float64).reshape(shape)))
        offset += need
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes at byte {offset}")
    return meta, params
