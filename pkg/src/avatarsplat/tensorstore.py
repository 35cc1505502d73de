"""Manifest + blob tensor storage shared by checkpoints and generator weights.

A store is a directory holding two files:

* ``manifest.json`` -- ``{"tensors": {name: {"shape", "dtype", "offset", "nbytes"}}, "meta": {...}}``
* ``blob.bin`` -- the raw little-endian tensor bytes, concatenated in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import SchemaMismatch

MANIFEST = "manifest.json"
BLOB = "blob.bin"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}
_TORCH_TO_CODE = {
    torch.float32: "f32",
    torch.float64: "f64",
    torch.int64: "i64",
    torch.uint8: "u8",
}


def _as_array(value) -> tuple[np.ndarray, str]:
    if isinstance(value, torch.Tensor):
        code = _TORCH_TO_CODE.get(value.dtype)
        if code is None:
            raise TypeError(f"unsupported tensor dtype {value.dtype}")
        return value.detach().cpu().contiguous().numpy().astype(_DTYPES[code], copy=False), code
    arr = np.asarray(value)
    for code, dt in _DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return arr.astype(dt, copy=False), code
    raise TypeError(f"unsupported array dtype {arr.dtype}")


def save(path: str | Path, tensors: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> Path:
    """Write ``tensors`` (torch or numpy) plus JSON-serialisable ``meta`` to ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, value in tensors.items():
            arr, code = _as_array(value)
            raw = np.ascontiguousarray(arr).tobytes()
            index[name] = {"shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)}
            fh.write(raw)
            offset += len(raw)
    manifest = {"tensors": index, "meta": dict(meta or {})}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=False))
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise SchemaMismatch(f"no {MANIFEST} in {path}") from exc
    if "tensors" not in manifest:
        raise SchemaMismatch(f"{path / MANIFEST} lacks a 'tensors' index")
    return manifest


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read a store back; returns ``(tensors, meta)`` with tensors as torch CPU tensors."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    out = {}
    for name, entry in manifest["tensors"].items():
        try:
            dt = _DTYPES[entry["dtype"]]
            start, nbytes = int(entry["offset"]), int(entry["nbytes"])
            shape = tuple(entry["shape"])
        except KeyError as exc:
            raise SchemaMismatch(f"tensor '{name}': malformed manifest entry ({exc})") from exc
        if start + nbytes > len(blob):
            raise SchemaMismatch(f"tensor '{name}': blob truncated")
        arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=start).reshape(shape)
        out[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    return out, manifest.get("meta", {})


def load_into_module(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str = "") -> None:
    """Copy stored tensors into ``module``'s state, raising :class:`SchemaMismatch` on gaps."""
    state = module.state_dict()
    for key, target in state.items():
        name = prefix + key
        if name not in tensors:
            raise SchemaMismatch(f"missing tensor '{name}'")
        src = tensors[name]
        if tuple(src.shape) != tuple(target.shape):
            raise SchemaMismatch(f"tensor '{name}': shape {tuple(src.shape)} != expected {tuple(target.shape)}")
        with torch.no_grad():
            target.copy_(src.to(target.dtype))
