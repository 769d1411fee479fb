"""Model serialization: named float64 tensors plus a JSON architecture record.

Containers are .npz files. Loading restores every tensor bitwise, so a
forward pass after a save/load round trip is exactly reproducible.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class Container:
    kind: str
    arch: dict
    params: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def save_container(path, kind: str, arch: dict, params: dict[str, np.ndarray],
                   extra: dict | None = None) -> None:
    meta = json.dumps({
        "version": FORMAT_VERSION,
        "kind": kind,
        "arch": arch,
        "extra": extra or {},
    }, sort_keys=True)
    arrays = {f"param::{name}": np.asarray(v) for name, v in params.items()}
    arrays["__meta__"] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def params_hash(params: dict[str, np.ndarray]) -> str:
    """Content hash of named tensors, independent of file-format metadata."""
    import hashlib
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def load_container(path) -> Container:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing model checkpoint: {path}")
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = {
            key[len("param::"):]: data[key]
            for key in data.files if key.startswith("param::")
        }
    return Container(kind=meta["kind"], arch=meta["arch"], params=params,
                     extra=meta["extra"], version=meta["version"])


def named_params(layers) -> dict[str, np.ndarray]:
    """Flatten Parameters and buffers of one or more layers into a name->value dict."""
    out: dict[str, np.ndarray] = {}
    if not isinstance(layers, (list, tuple)):
        layers = [layers]
    for layer in layers:
        for p in layer.params():
            if p.name in out:
                raise ValueError(f"duplicate parameter name '{p.name}'")
            out[p.name] = p.value
        for full_name, attr, owner in layer.buffers():
            if full_name in out:
                raise ValueError(f"duplicate buffer name '{full_name}'")
            out[full_name] = getattr(owner, attr)
    return out


def restore_params(layers, saved: dict[str, np.ndarray]) -> None:
    """Copy saved tensors into matching Parameters/buffers, erroring on mismatch."""
    if not isinstance(layers, (list, tuple)):
        layers = [layers]
    for layer in layers:
        for p in layer.params():
            if p.name not in saved:
                raise KeyError(f"checkpoint missing parameter '{p.name}'")
            v = saved[p.name]
            if v.shape != p.value.shape:
                raise ValueError(f"shape mismatch for '{p.name}': "
                                 f"{v.shape} vs {p.value.shape}")
            p.value[...] = v
        for full_name, attr, owner in layer.buffers():
            if full_name not in saved:
                raise KeyError(f"checkpoint missing buffer '{full_name}'")
            setattr(owner, attr, saved[full_name].copy())
