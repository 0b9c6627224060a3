"""Single-file container for named arrays with a JSON header.

Layout (all integers little-endian):

    bytes 0..9    magic b"MVHEADCK1\\n"
    bytes 10..17  uint64 header length in bytes
    header        UTF-8 JSON, sorted keys: {"arrays": [...], "meta": {...}}
    payload       raw array bytes, C order, little-endian, concatenated in
                  the order listed under "arrays"

Each array entry records name, dtype (numpy little-endian string), shape,
offset into the payload and byte count. The same container backs training
checkpoints and any cached artifact that needs named arrays plus metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MVHEADCK1\n"


def _little_endian(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype.byteorder == ">":
        return a.astype(a.dtype.newbyteorder("<"))
    return a


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = _little_endian(np.asarray(arrays[name]))
        blob = a.tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": a.dtype.str,
                "shape": list(a.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        a = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = a.reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def config_hash(config_dict: dict) -> str:
    """Stable hash of a JSON-serializable config mapping."""
    canon = json.dumps(config_dict, sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
