"""Named-tensor checkpoints (npz container with a version tag and metadata)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

FORMAT_VERSION = "fleetsense-ckpt/1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: Optional[dict] = None) -> None:
    arrays = {}
    for name, t in tensors.items():
        arr = t.data if hasattr(t, "data") and not isinstance(t, np.ndarray) else t
        arrays["t:" + name] = np.asarray(arr, dtype=np.float64)
    header = {"version": FORMAT_VERSION,
              "shapes": {n: list(a.shape) for n, a in arrays.items()},
              "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(name -> float64 array, meta)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    try:
        z = np.load(path, allow_pickle=False)
    except (ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    if not hasattr(z, "files"):
        raise CheckpointError(f"{path}: not an npz archive")
    with z:
        if "__header__" not in z:
            raise CheckpointError(f"{path}: missing header")
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
        out = {}
        for key, shape in header["shapes"].items():
            arr = z[key]
            if list(arr.shape) != shape:
                raise CheckpointError(f"{path}: {key} has shape {arr.shape}, header says {shape}")
            out[key[2:]] = arr
    return out, header.get("meta", {})
