"""Model/adapter bundle format.

A bundle is a directory holding ``manifest.json`` plus ``weights.bin``.  The
manifest carries the model config and a tensor table (name, dtype, shape,
byte offset); the blob is the tensors concatenated in table order.  Dtypes:

  * ``f32le``    — row-major little-endian IEEE-754 32-bit
  * ``i8``       — one int8 code per byte
  * ``i4packed`` — two int4 codes per byte, low nibble first

The loader rejects manifests whose shape products disagree with the blob
size or whose offsets are not contiguous.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import BundleError
from .kernels import pack_int4, unpack_int4
from .model import LayerWeights, ModelConfig, ModelWeights

MANIFEST = "manifest.json"
BLOB = "weights.bin"
SCHEMA = 1

_LAYER_MATS = ("attn_gain", "wq", "wk", "wv", "wo", "mlp_gain", "w_up", "w_gate", "w_down")


def _nbytes(dtype: str, shape) -> int:
    numel = int(np.prod(shape)) if shape else 1
    if dtype == "f32le":
        return 4 * numel
    if dtype == "i8":
        return numel
    if dtype == "i4packed":
        return (numel + 1) // 2
    raise BundleError(f"unknown dtype tag {dtype!r}")


def _encode(arr: np.ndarray, dtype: str) -> bytes:
    if dtype == "f32le":
        return np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if dtype == "i8":
        return np.ascontiguousarray(arr, dtype=np.int8).tobytes()
    if dtype == "i4packed":
        return pack_int4(np.ascontiguousarray(arr, dtype=np.int8)).tobytes()
    raise BundleError(f"unknown dtype tag {dtype!r}")


def _decode(raw: bytes, dtype: str, shape) -> np.ndarray:
    numel = int(np.prod(shape)) if shape else 1
    if dtype == "f32le":
        return np.frombuffer(raw, dtype="<f4", count=numel).reshape(shape).astype(np.float32)
    if dtype == "i8":
        return np.frombuffer(raw, dtype=np.int8, count=numel).reshape(shape).copy()
    if dtype == "i4packed":
        return unpack_int4(np.frombuffer(raw, dtype=np.uint8), numel).reshape(shape)
    raise BundleError(f"unknown dtype tag {dtype!r}")


def save_bundle(path, tensors, *, config: dict | None = None, extra: dict | None = None):
    """Write a bundle. `tensors` maps name -> array or (array, dtype, attrs)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    chunks = []
    offset = 0
    for name, entry in tensors.items():
        if isinstance(entry, tuple):
            arr, dtype, attrs = entry
        else:
            arr, dtype, attrs = entry, "f32le", None
        arr = np.asarray(arr)
        raw = _encode(arr, dtype)
        rec = {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset}
        if attrs:
            rec["attrs"] = attrs
        table.append(rec)
        chunks.append(raw)
        offset += len(raw)
    manifest = {"schema": SCHEMA, "dtype": "f32le", "tensors": table}
    if config is not None:
        manifest["config"] = config
    if extra:
        manifest.update(extra)
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_bundle(path):
    """Read a bundle back as (manifest, {name: array})."""
    path = Path(path)
    mf_path = path / MANIFEST
    if not mf_path.exists():
        raise BundleError(f"no {MANIFEST} in {path}")
    manifest = json.loads(mf_path.read_text())
    if manifest.get("schema") != SCHEMA:
        raise BundleError(f"unsupported bundle schema {manifest.get('schema')}")
    raw = (path / BLOB).read_bytes()
    tensors = {}
    offset = 0
    for rec in manifest["tensors"]:
        if any(d <= 0 for d in rec["shape"]):
            raise BundleError(f"tensor {rec['name']} has non-positive dims {rec['shape']}")
        if rec["offset"] != offset:
            raise BundleError(
                f"tensor {rec['name']} offset {rec['offset']} != expected {offset}")
        size = _nbytes(rec["dtype"], rec["shape"])
        if offset + size > len(raw):
            raise BundleError(
                f"tensor {rec['name']} overruns blob ({offset + size} > {len(raw)})")
        tensors[rec["name"]] = _decode(raw[offset:offset + size], rec["dtype"], rec["shape"])
        offset += size
    if offset != len(raw):
        raise BundleError(f"blob has {len(raw)} bytes, manifest accounts for {offset}")
    return manifest, tensors


# -- model / adapter level ---------------------------------------------------


def save_model(path, weights: ModelWeights, *, forecast=None):
    """Write a model bundle; `forecast` is an optional (prefix, slots) pair."""
    tensors = dict(weights.all_tensors())
    if forecast is not None:
        prefix, slots = forecast
        tensors["forecast_prefix"] = np.asarray(prefix, np.float32)
        tensors["forecast_slots"] = np.asarray(slots, np.float32)
    return save_bundle(path, tensors, config=weights.config.to_dict(),
                       extra={"role": "model"})


def weights_from_tensors(config: ModelConfig, tensors) -> ModelWeights:
    layers = []
    for i in range(config.num_layers):
        kw = {}
        for name in _LAYER_MATS:
            key = f"layers.{i}.{name}"
            if key not in tensors:
                raise BundleError(f"missing tensor {key}")
            kw[name] = tensors[key]
        layers.append(LayerWeights(**kw))
    return ModelWeights(
        config, tensors["token_embedding"], layers, tensors["final_gain"],
        head=tensors.get("head"),
    )


def load_model(path) -> ModelWeights:
    manifest, tensors = load_bundle(path)
    if manifest.get("role") != "model":
        raise BundleError(f"{path} is not a model bundle (role={manifest.get('role')!r})")
    if "config" not in manifest:
        raise BundleError("model manifest missing config")
    config = ModelConfig.from_dict(manifest["config"])
    return weights_from_tensors(config, tensors)


def load_forecast(path):
    """(prefix, slots) arrays from a model bundle, or None if absent."""
    _, tensors = load_bundle(path)
    if "forecast_prefix" in tensors and "forecast_slots" in tensors:
        return tensors["forecast_prefix"], tensors["forecast_slots"]
    return None


def save_adapter(path, adapter):
    tensors = {}
    for i, ll in enumerate(adapter.layers):
        for name in ("a_q", "b_q", "a_k", "b_k", "a_v", "b_v", "a_o", "b_o"):
            tensors[f"layers.{i}.{name}"] = getattr(ll, name)
    return save_bundle(path, tensors, extra={
        "role": "lora", "task_id": adapter.task_id,
        "rank": adapter.rank, "scale": adapter.scale,
    })


def load_adapter(path):
    from .lora import LoraAdapter, LoraLayer

    manifest, tensors = load_bundle(path)
    if manifest.get("role") != "lora":
        raise BundleError(f"{path} is not an adapter bundle")
    layers = []
    i = 0
    while f"layers.{i}.a_q" in tensors:
        layers.append(LoraLayer(**{
            name: tensors[f"layers.{i}.{name}"]
            for name in ("a_q", "b_q", "a_k", "b_k", "a_v", "b_v", "a_o", "b_o")
        }))
        i += 1
    if not layers:
        raise BundleError("adapter bundle has no layers")
    return LoraAdapter(task_id=manifest["task_id"], rank=int(manifest["rank"]),
                       scale=float(manifest["scale"]), layers=layers)
