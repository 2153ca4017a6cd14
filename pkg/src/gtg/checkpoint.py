"""Self-describing checkpoint container shared by the denoiser and the proxy.

A checkpoint is a numpy ``.npz`` archive. The ``__header__`` entry holds
UTF-8 JSON (kind, architecture, schedule, dtype, training metadata); every
other entry is a named row-major parameter tensor.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_HEADER_KEY = "__header__"


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    dtypes = {str(np.asarray(a).dtype) for a in arrays.values()}
    full_header = {"format_version": FORMAT_VERSION, "dtype": sorted(dtypes), **header}
    encoded = np.frombuffer(json.dumps(full_header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    payload = {name: np.ascontiguousarray(a) for name, a in arrays.items()}
    if _HEADER_KEY in payload:
        raise ValueError(f"{_HEADER_KEY!r} is reserved")
    buf = io.BytesIO()
    np.savez(buf, **{_HEADER_KEY: encoded}, **payload)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as archive:
        if _HEADER_KEY not in archive:
            raise ValueError(f"{path}: missing checkpoint header")
        header = json.loads(archive[_HEADER_KEY].tobytes().decode("utf-8"))
        arrays = {k: archive[k] for k in archive.files if k != _HEADER_KEY}
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    return header, arrays
