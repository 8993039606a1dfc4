"""Named-tensor container and model/token files.

Container layout::

    [u64 little-endian header length N][N bytes UTF-8 JSON header][payload]

The header maps tensor name -> {"dtype", "shape", "offset", "nbytes"} with
offsets relative to the payload start; the reserved key ``__metadata__``
holds ``format_version`` plus free-form metadata. Payload is contiguous
little-endian data in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (ConfigError, DimensionError, DomainError, HeaderError, ManifestError, TruncatedError,
                     VersionError)
from .moe import ExpertWeights, MoeLayer, RouterConfig

FORMAT_VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_MAX_HEADER = 100 * 1024 * 1024


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_container(tensors: dict, metadata: dict | None = None, dtype: str = "f32") -> bytes:
    np_dtype = DTYPES[dtype]
    header = {"__metadata__": {**(metadata or {}), "format_version": FORMAT_VERSION}}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if name == "__metadata__":
            raise HeaderError("tensor name __metadata__ is reserved")
        data = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
        header[name] = {"dtype": dtype, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)}
        blobs.append(data)
        offset += len(data)
    head = dumps_json(header).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(blobs)


def decode_container(raw: bytes):
    """Parse container bytes into ``({name: float64 array}, metadata)``."""
    if len(raw) < 8:
        raise HeaderError("file too short for a header length")
    (n,) = struct.unpack("<Q", raw[:8])
    if n > _MAX_HEADER or 8 + n > len(raw):
        raise HeaderError(f"header length {n} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict):
        raise HeaderError("header is not a JSON object")
    meta = header.pop("__metadata__", {})
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"format version {meta.get('format_version')!r}, expected {FORMAT_VERSION}")
    payload = memoryview(raw)[8 + n :]
    tensors = {}
    for name, info in header.items():
        try:
            np_dtype = DTYPES[info["dtype"]]
            shape = tuple(int(s) for s in info["shape"])
            offset, nbytes = int(info["offset"]), int(info["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise HeaderError(f"malformed entry for tensor {name!r}") from None
        if nbytes != int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize or offset < 0:
            raise HeaderError(f"tensor {name!r}: nbytes does not match shape")
        if offset + nbytes > len(payload):
            raise TruncatedError(f"tensor {name!r} runs past the end of the payload")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=np_dtype).reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return tensors, meta


def write_container(path, tensors: dict, metadata: dict | None = None, dtype: str = "f32") -> None:
    Path(path).write_bytes(encode_container(tensors, metadata, dtype))


def read_container(path):
    return decode_container(Path(path).read_bytes())


def write_tokens(path, tokens) -> None:
    write_container(path, {"tokens": np.asarray(tokens)}, {"kind": "tokens"})


def read_tokens(path) -> np.ndarray:
    tensors, _ = read_container(path)
    if "tokens" not in tensors or tensors["tokens"].ndim != 2:
        raise ManifestError(f"{path} has no 2-D 'tokens' tensor")
    return tensors["tokens"]


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def _expert_tensors(prefix: str, experts) -> dict:
    out = {}
    for k, e in enumerate(experts):
        for name, w in e.matrices().items():
            out[f"{prefix}.{k:04d}.{name}"] = w
    return out


def _read_experts(tensors: dict, prefix: str, count: int):
    experts = []
    for k in range(count):
        try:
            experts.append(ExpertWeights(*(tensors[f"{prefix}.{k:04d}.{n}"] for n in ("w_up", "w_gate", "w_down"))))
        except KeyError:
            raise ManifestError(f"container is missing tensors for {prefix} {k}") from None
    return experts


def save_model(layer, path, provenance: dict | None = None) -> dict:
    """Write the layer container at ``path`` and its manifest next to it.

    Accepts a MoeLayer or a MergedLayer (whose index map goes in the manifest).
    Returns the manifest dict.
    """
    tensors = {"router.weight": layer.router.weight, "router.bias": layer.router.bias}
    tensors.update(_expert_tensors("experts", layer.experts))
    tensors.update(_expert_tensors("shared", layer.shared_experts))
    index_map = getattr(layer, "index_map", None)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "moe" if index_map is None else "merged",
        "d": layer.d,
        "d_ff": layer.d_ff,
        "num_experts": len(layer.experts),
        "router_rows": layer.router.num_experts,
        "top_k": layer.top_k,
        "gate_mode": layer.router.gate_mode,
        "shared_expert_count": len(layer.shared_experts),
        "provenance": provenance or {},
    }
    if index_map is not None:
        manifest["index_map"] = [int(i) for i in index_map]
    write_container(path, tensors, {"kind": "model"})
    manifest_path(path).write_text(dumps_json(manifest) + "\n")
    return manifest


def load_manifest(path) -> dict:
    mp = manifest_path(path)
    try:
        manifest = json.loads(mp.read_text())
    except FileNotFoundError:
        raise ManifestError(f"missing manifest {mp}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"unreadable manifest {mp}: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"manifest version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}")
    return manifest


def load_model(path):
    """Load a MoeLayer or MergedLayer; any disagreement between the container
    and its manifest raises ManifestError."""
    manifest = load_manifest(path)
    tensors, _ = read_container(path)
    try:
        return _build_model(manifest, tensors)
    except KeyError as exc:
        raise ManifestError(f"manifest/container mismatch: missing {exc}") from None
    except (DimensionError, DomainError, ConfigError) as exc:
        raise ManifestError(f"manifest/container mismatch: {exc}") from None


def _build_model(manifest: dict, tensors: dict):
    K, d, d_ff = manifest["num_experts"], manifest["d"], manifest["d_ff"]
    router = RouterConfig(
        weight=tensors["router.weight"], bias=tensors["router.bias"],
        top_k=manifest["top_k"], gate_mode=manifest["gate_mode"],
    )
    experts = _read_experts(tensors, "experts", K)
    shared = _read_experts(tensors, "shared", manifest["shared_expert_count"])
    if router.num_experts != manifest["router_rows"] or any((e.d, e.d_ff) != (d, d_ff) for e in experts):
        raise ManifestError("tensor shapes disagree with the manifest")
    if manifest["kind"] == "merged":
        from .merge import MergedLayer

        return MergedLayer(router=router, experts=tuple(experts), shared_experts=tuple(shared),
                           index_map=np.asarray(manifest["index_map"], dtype=np.int64))
    if manifest["kind"] != "moe":
        raise ManifestError(f"unknown model kind {manifest['kind']!r}")
    return MoeLayer(router=router, experts=tuple(experts), shared_experts=tuple(shared))
