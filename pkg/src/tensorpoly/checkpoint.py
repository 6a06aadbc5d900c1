"""Versioned binary container for adapters, routing logits and whole models.

Layout (all integers little-endian)::

    bytes 0-3    magic  b"TPCK"
    bytes 4-7    uint32 format version (currently 1)
    bytes 8-11   uint32 header length H
    next H bytes UTF-8 JSON header (keys sorted)
    rest         payload: float64 little-endian, arrays back to back in C order

The header records the method tag, the ``TensorDims`` fields and, for every
array, its name, shape and byte offset into the payload. Round trips are
bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .adapters import AdapterLayer, LoRAAdapter, TLoRAFactors
from .routing import PolyInventory, RoutingLogits, TensorPolyInventory, TensorTrainInventory
from .tensor_core import TensorDims, TensorTrainCores

MAGIC = b"TPCK"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def encode(method: str, arrays: dict[str, np.ndarray], dims: Optional[TensorDims] = None,
           meta: Optional[dict] = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_LE_F64)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        raw = a.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "method": method,
        "dims": dims.as_dict() if dims is not None else None,
        "arrays": entries,
        "payload_bytes": offset,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    payload = memoryview(blob)[12 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("payload length does not match header")
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype=_LE_F64, count=count, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return header, arrays


def dims_from_header(header: dict) -> Optional[TensorDims]:
    d = header.get("dims")
    return TensorDims(**d) if d else None


def save(path, method: str, arrays: dict[str, np.ndarray], dims: Optional[TensorDims] = None,
         meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode(method, arrays, dims, meta))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# typed helpers


def adapter_arrays(adapter, routing: Optional[RoutingLogits] = None) -> tuple[str, dict, Optional[TensorDims], dict]:
    """``(method tag, arrays, dims, meta)`` describing one adapter."""
    if isinstance(adapter, LoRAAdapter):
        method, arrays, dims = "lora", {"A": adapter.A, "B": adapter.B}, None
        meta = {"s": adapter.s}
    elif isinstance(adapter, TLoRAFactors):
        method, arrays, dims = "tlora", adapter.params(), adapter.dims
        meta = {"s": adapter.s}
    elif isinstance(adapter, PolyInventory):
        method, arrays, dims = "poly", adapter.params(), None
        meta = {"s": adapter.s}
    elif isinstance(adapter, TensorPolyInventory):
        method, arrays, dims = adapter.variant, adapter.params(), adapter.dims
        meta = {"s": adapter.s}
    elif isinstance(adapter, TensorTrainInventory):
        method, arrays, dims = "tpx", adapter.params(), None
        meta = {"s": adapter.s, "d_out": adapter.d_out, "d_in": adapter.d_in}
    else:
        raise CheckpointError(f"cannot serialize {type(adapter).__name__}")
    arrays = dict(arrays)
    if routing is not None:
        arrays["logits"] = routing.z
        meta["routing_variant"] = routing.variant
    return method, arrays, dims, meta


def adapter_from_arrays(method: str, arrays: dict, dims: Optional[TensorDims], meta: dict):
    s = meta.get("s", 1.0)
    if method == "lora":
        ad = LoRAAdapter(arrays["A"], arrays["B"], s)
    elif method == "tlora":
        ad = TLoRAFactors(arrays["a_factors"], arrays["b_factors"], dims, s)
    elif method == "poly":
        ad = PolyInventory(arrays["A"], arrays["B"], s)
    elif method in ("tp1", "tp2"):
        ad = TensorPolyInventory(TLoRAFactors(arrays["a_factors"], arrays["b_factors"], dims, s), method)
    elif method == "tpx":
        n = sum(1 for k in arrays if k.startswith("core"))
        cores = TensorTrainCores(tuple(arrays[f"core{i}"] for i in range(n)))
        ad = TensorTrainInventory(cores, meta["d_out"], meta["d_in"], s)
    else:
        raise CheckpointError(f"unknown method tag {method!r}")
    routing = None
    if "logits" in arrays:
        routing = RoutingLogits(meta["routing_variant"], arrays["logits"])
    return ad, routing


def save_adapter(path, adapter, routing: Optional[RoutingLogits] = None) -> None:
    method, arrays, dims, meta = adapter_arrays(adapter, routing)
    save(path, method, arrays, dims, meta)


def load_adapter(path):
    header, arrays = load(path)
    return adapter_from_arrays(header["method"], arrays, dims_from_header(header), header["meta"])


def encode_model(layers: list[AdapterLayer], method: str, dims: Optional[TensorDims],
                 meta: Optional[dict] = None) -> bytes:
    """All layers of a model: base weights (with digests), adapters and routing."""
    arrays = {}
    layer_meta = []
    for i, layer in enumerate(layers):
        arrays[f"layer{i}/w0"] = layer.w0
        entry = {"layer_id": layer.layer_id, "w0_sha256": digest(layer.w0)}
        if layer.adapter is not None:
            m, arrs, _, ameta = adapter_arrays(layer.adapter, layer.routing)
            entry.update(method=m, meta=ameta)
            for k, v in arrs.items():
                arrays[f"layer{i}/{k}"] = v
        layer_meta.append(entry)
    full_meta = dict(meta or {})
    full_meta["layers"] = layer_meta
    return encode(method, arrays, dims, full_meta)


def decode_model(blob: bytes) -> tuple[list[AdapterLayer], dict]:
    header, arrays = decode(blob)
    dims = dims_from_header(header)
    layers = []
    for i, entry in enumerate(header["meta"]["layers"]):
        prefix = f"layer{i}/"
        own = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        w0 = own.pop("w0")
        if digest(w0) != entry["w0_sha256"]:
            raise CheckpointError(f"base weight digest mismatch in layer {i}")
        adapter = routing = None
        if "method" in entry:
            adapter, routing = adapter_from_arrays(entry["method"], own, dims, entry["meta"])
        layers.append(AdapterLayer(w0, adapter, entry["layer_id"], routing))
    return layers, header
