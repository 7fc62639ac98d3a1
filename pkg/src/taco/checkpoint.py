"""Versioned binary container for named arrays plus a JSON header.

Layout::

    magic  b"TACOCKPT"         8 bytes
    version                    uint32 little-endian
    header length              uint64 little-endian
    header                     UTF-8 JSON
    payload                    concatenated little-endian array bytes

The header holds free-form metadata (model config, optimizer step, ...) and
an index of ``{name, dtype, shape, offset, nbytes, sha256}`` entries with
offsets relative to the payload start.  Reading verifies every digest, so a
truncated or corrupted file raises :class:`CheckpointError` instead of
returning garbage.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"TACOCKPT"
VERSION = 1
_PRE = struct.Struct("<8sIQ")
_DTYPES = {"float64", "float32", "int64", "int32", "uint8", "bool"}


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype.byteorder == ">" or (a.dtype.byteorder == "=" and not _little()):
        a = a.byteswap().view(a.dtype.newbyteorder("<"))
    return a


def _little() -> bool:
    import sys

    return sys.byteorder == "little"


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = _le(np.asarray(arrays[name]))
        dt = a.dtype.name
        if dt not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dt} for {name!r}")
        raw = a.tobytes()
        index.append({
            "name": name,
            "dtype": dt,
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": index}, sort_keys=True).encode()
    return _PRE.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _PRE.size:
        raise CheckpointError("file too short for a container header")
    magic, version, hlen = _PRE.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version > VERSION:
        raise CheckpointError(f"container version {version} is newer than supported {VERSION}")
    start = _PRE.size + hlen
    if len(blob) < start:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[_PRE.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    out = {}
    for t in header["tensors"]:
        a, b = start + t["offset"], start + t["offset"] + t["nbytes"]
        if b > len(blob):
            raise CheckpointError(f"truncated payload for {t['name']!r}")
        raw = blob[a:b]
        if hashlib.sha256(raw).hexdigest() != t["sha256"]:
            raise CheckpointError(f"checksum mismatch for {t['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"]).newbyteorder("<")).reshape(t["shape"])
        out[t["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return out, header["meta"]


def save(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    """Write atomically (temp file + rename); disk errors surface as ``OSError``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = dumps(arrays, meta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return path


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return loads(path.read_bytes())


def digest(arrays: Mapping[str, np.ndarray], prefix: str = "") -> str:
    """Content hash over the arrays whose names start with ``prefix``."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        if name.startswith(prefix):
            a = _le(np.asarray(arrays[name]))
            h.update(name.encode())
            h.update(str(a.dtype).encode() + str(a.shape).encode())
            h.update(a.tobytes())
    return h.hexdigest()


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# model parameters, compressed contexts and KV caches


def save_model(path, params: Mapping, cfg, meta: Mapping | None = None) -> Path:
    arrays = {k: (v.data if hasattr(v, "data") else v) for k, v in params.items()}
    return save(path, arrays, {"kind": "model", "model_config": cfg.to_dict(), **dict(meta or {})})


def load_model(path):
    """Return ``(params as Tensors, ModelConfig, meta)``."""
    from .tab2d import ModelConfig
    from .tensor import Tensor

    arrays, meta = load(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path} carries no model config")
    cfg = ModelConfig(**meta["model_config"])
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items() if not k.startswith("opt.")}
    return params, cfg, meta


def save_context(path, ctx) -> Path:
    meta = {
        "kind": "compressed_context",
        "n_source_rows": ctx.n_source_rows,
        "source_fingerprint": ctx.source_fingerprint,
        "compressor_version": ctx.compressor_version,
        "schema": [list(s) for s in ctx.schema],
        "extra": ctx.meta,
    }
    return save(path, {"latents": ctx.latents}, meta)


def load_context(path):
    from .compressor import CompressedContext

    arrays, meta = load(path)
    if meta.get("kind") != "compressed_context":
        raise CheckpointError(f"{path} is not a compressed context")
    return CompressedContext(
        arrays["latents"],
        n_source_rows=meta["n_source_rows"],
        source_fingerprint=meta["source_fingerprint"],
        compressor_version=meta["compressor_version"],
        schema=tuple(tuple(s) for s in meta["schema"]),
        meta=meta["extra"],
    )


def save_kv_cache(path, cache) -> Path:
    arrays = {}
    for b, (k, v) in enumerate(zip(cache.keys, cache.values)):
        arrays[f"k.{b:03d}"] = k
        arrays[f"v.{b:03d}"] = v
    return save(path, arrays, {"kind": "kv_cache", "blocks": len(cache.keys)})


def load_kv_cache(path):
    from .predictor import KVCache

    arrays, meta = load(path)
    if meta.get("kind") != "kv_cache":
        raise CheckpointError(f"{path} is not a KV cache")
    n = meta["blocks"]
    return KVCache([arrays[f"k.{b:03d}"] for b in range(n)], [arrays[f"v.{b:03d}"] for b in range(n)])
