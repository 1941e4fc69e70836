"""Checkpoints: a JSON manifest plus a little-endian float32 blob.

``<stem>.json`` holds the architecture, scalar state at full precision and a
table of tensor names, shapes and offsets into ``<stem>.bin``.  Serialization
is deterministic, so save -> load -> save reproduces both files byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from lcnn.layers import build_layer, layer_spec
from lcnn.model import Sequential

FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def manifest_and_blob(model: Sequential, metadata: dict | None = None) -> tuple[str, bytes]:
    tensors, scalars, chunks = [], {}, []
    offset = 0
    for i, layer in enumerate(model.layers):
        for k, s in layer.scalars().items():
            scalars[f"layers.{i}.{k}"] = float(s)
        for k, a in layer.arrays().items():
            arr = np.ascontiguousarray(a, dtype=BLOB_DTYPE)
            tensors.append({"name": f"layers.{i}.{k}", "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            chunks.append(arr.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "model_meta": model.meta,
        "layers": [layer_spec(layer) for layer in model.layers],
        "scalars": scalars,
        "tensors": tensors,
        "total_floats": offset,
        "metadata": metadata or {},
    }
    return json.dumps(manifest, sort_keys=True, indent=2) + "\n", b"".join(chunks)


def save_checkpoint(model: Sequential, path, metadata: dict | None = None) -> Path:
    """Write ``<stem>.json`` and ``<stem>.bin``; returns the manifest path."""
    mpath, bpath = _paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    text, blob = manifest_and_blob(model, metadata)
    bpath.write_bytes(blob)
    mpath.write_text(text, encoding="utf-8")
    return mpath


def read_manifest(path) -> dict:
    mpath, _ = _paths(path)
    try:
        return json.loads(Path(mpath).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint manifest {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {mpath}: {exc}") from exc


def load_checkpoint(path) -> tuple[Sequential, dict]:
    """Rebuild a model; every check happens before any layer state is set."""
    mpath, bpath = _paths(path)
    man = read_manifest(mpath)
    if man.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {man.get('format_version')!r}")
    try:
        blob = bpath.read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint blob {bpath}") from exc
    total = int(man["total_floats"])
    if len(blob) != total * BLOB_DTYPE.itemsize:
        raise CheckpointError(
            f"blob has {len(blob)} bytes, manifest declares {total} float32 values")
    flat = np.frombuffer(blob, dtype=BLOB_DTYPE)

    layers = [build_layer(spec) for spec in man["layers"]]
    arrays: dict[str, np.ndarray] = {}
    for entry in man["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        lo = int(entry["offset"])
        if lo < 0 or lo + size > total:
            raise CheckpointError(f"tensor {entry['name']} lies outside the blob")
        arrays[entry["name"]] = flat[lo : lo + size].reshape(shape).astype(np.float64)

    staged = []
    for i, layer in enumerate(layers):
        pre = f"layers.{i}."
        la = {k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)}
        ls = {k[len(pre):]: v for k, v in man["scalars"].items() if k.startswith(pre)}
        expected = layer.arrays()
        for k, ref in expected.items():
            if k not in la:
                raise CheckpointError(f"checkpoint lacks tensor {pre}{k}")
            if la[k].shape != np.shape(ref):
                raise CheckpointError(
                    f"tensor {pre}{k} has shape {la[k].shape}, layer expects {np.shape(ref)}")
        missing = set(layer.scalars()) - set(ls)
        if missing:
            raise CheckpointError(f"checkpoint lacks scalars {sorted(pre + m for m in missing)}")
        staged.append((layer, la, ls))
    for layer, la, ls in staged:
        layer.load_state(la, ls)
    model = Sequential(layers, man["input_shape"], man["num_classes"], man.get("model_meta"))
    return model, man.get("metadata", {})
