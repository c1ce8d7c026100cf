"""Shared serialization helpers: float blobs and atomic file writes."""

import base64
import os
import tempfile
from pathlib import Path

import numpy as np


def encode_f32(array) -> str:
    """Base64 of the little-endian float32 bytes of ``array`` (row-major)."""
    data = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    return base64.b64encode(data.tobytes()).decode("ascii")


def decode_f32(text: str, shape) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    flat = np.frombuffer(raw, dtype="<f4")
    count = int(np.prod(shape)) if len(shape) else 1
    if flat.size != count:
        raise ValueError(f"blob holds {flat.size} values, expected {count} for shape {tuple(shape)}")
    return flat.reshape(shape).astype(np.float32)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
