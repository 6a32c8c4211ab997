"""Binary container shared by checkpoints, masks and datasets.

Layout: an 8-byte little-endian unsigned header length, the UTF-8 JSON
header, then the raw little-endian payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np


def write_container(path: str | Path, header: dict[str, Any], payload: np.ndarray) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    data = np.ascontiguousarray(payload)
    data = data.astype(data.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(data.tobytes())


def read_container(path: str | Path, dtype: str = "<f8") -> tuple[dict[str, Any], np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated container")
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    payload = np.frombuffer(raw[8 + n :], dtype=dtype).copy()
    return header, payload
