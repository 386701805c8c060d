"""Flat binary container: one JSON header line plus raw array payloads.

Used for model checkpoints and sample outputs. The format is deliberately
boring and fully deterministic (sorted keys, sorted array names, C-order
float64 buffers, no timestamps), so a rerun with the same inputs produces
byte-identical files. That property is part of the CLI contract.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"TACALAB\x01"
FORMAT_VERSION = 1


def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    entries = []
    offset = 0
    for name in names:
        # shape comes from asarray: ascontiguousarray would promote 0-d to 1-d
        arr = np.asarray(arrays[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {"version": FORMAT_VERSION, "meta": meta, "arrays": entries}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header_bytes).to_bytes(8, "little"))
            fh.write(header_bytes)
            for name in names:
                fh.write(np.ascontiguousarray(arrays[name], dtype=np.float64).tobytes())
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise OSError(f"{path}: not a tacalab array container")
            header_len = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(header_len).decode("utf-8"))
            if header.get("version") != FORMAT_VERSION:
                raise OSError(f"{path}: unsupported container version {header.get('version')}")
            payload = fh.read()
    except OSError as exc:
        raise OSError(f"failed reading {path}: {exc}") from exc
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=np.float64, count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return header["meta"], arrays
