"""Checkpoint directory: ``manifest.json`` plus ``weights.bin``.

The blob holds every parameter as little-endian float64, row-major, in the
order listed by the manifest.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch
from .layers import LayerSpec, from_spec
from .network import Network

FORMAT = "lipcert-ckpt-v1"
MANIFEST, WEIGHTS = "manifest.json", "weights.bin"


def manifest_for(net: Network, config=None, seed=None) -> dict:
    layers = []
    for layer in net.layers:
        s = layer.spec()
        layers.append({"kind": s.kind, "role": s.role, "in_shape": list(s.in_shape),
                       "out_shape": list(s.out_shape), "hyper": s.hyper})
    params = [{"name": k, "shape": list(v.shape)} for k, v in net.named_params()]
    return {"format": FORMAT, "input_shape": list(net.input_shape), "n_classes": net.n_classes,
            "mechanisms": sorted({l["kind"] for l in layers}), "layers": layers,
            "params": params, "param_count": net.param_count(), "seed": seed,
            "config": config or {}}


def save(net: Network, path, config=None, seed=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = manifest_for(net, config, seed)
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in net.named_params())
    (path / WEIGHTS).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    manifest = json.loads((Path(path) / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load(path) -> tuple[Network, dict]:
    """Rebuild the network; fails before touching layers if the blob size disagrees."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / WEIGHTS).read_bytes()
    declared = int(manifest["param_count"])
    if sum(int(np.prod(p["shape"])) for p in manifest["params"]) != declared:
        raise ShapeMismatch("manifest parameter list disagrees with its declared count")
    if len(blob) != declared * 8:
        raise ShapeMismatch(f"weights.bin holds {len(blob) // 8} values, manifest declares {declared}")
    layers = [from_spec(LayerSpec(l["kind"], tuple(l["in_shape"]), tuple(l["out_shape"]),
                                  l["role"], l["hyper"])) for l in manifest["layers"]]
    net = Network(layers, manifest["input_shape"], manifest["n_classes"])
    flat = np.frombuffer(blob, dtype="<f8")
    offset = 0
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"]))
        net.set_param(entry["name"], flat[offset:offset + n].reshape(entry["shape"]).astype(np.float64))
        offset += n
    return net, manifest
