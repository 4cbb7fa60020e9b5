"""Toy checkpoint format: JSON manifest plus one little-endian binary blob per tensor.

Layout of ``<dir>/manifest.json``::

    {"format": "reflectrag-toy-checkpoint", "version": 1, "kind": "dense" | "moe",
     "dims": {"d_model": 16, "d_ff": 32, "n_layers": 2, "activation": "silu"},
     "moe": {"d_adapter": 4, "n_experts": 4, "top_k": 2, "seed": 7, "sigma": "silu"},   # moe only
     "tensors": [{"name": "layers.0.mix", "shape": [16, 16], "dtype": "float64",
                  "file": "layers.0.mix.bin", "sha256": "..."}, ...]}
"""
from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import numpy as np

from ..errors import BadCheckpoint
from .layer import ExpertAdapter, MoeLayer, MoeLayerSpec, SharedFfn
from .model import DenseBlock, DenseModel, MoeBlock, MoeModel

FORMAT = "reflectrag-toy-checkpoint"
DTYPES = {"float32": "<f4", "float64": "<f8"}


def _write_tensors(root: Path, tensors: dict[str, np.ndarray], dtype: str):
    entries = []
    for name in sorted(tensors, key=_natural_key):
        raw = np.ascontiguousarray(tensors[name], dtype=DTYPES[dtype]).tobytes()
        fname = f"{name}.bin"
        (root / fname).write_bytes(raw)
        entries.append({
            "name": name,
            "shape": list(tensors[name].shape),
            "dtype": dtype,
            "file": fname,
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
    return entries


def _natural_key(name):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", name)]


def save_checkpoint(model, path, dtype: str = "float64") -> Path:
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if isinstance(model, DenseModel):
        kind = "dense"
        dims = {"d_model": model.d_model, "d_ff": model.d_ff, "n_layers": len(model.blocks),
                "activation": model.activation}
        extra = {}
    elif isinstance(model, MoeModel):
        kind = "moe"
        ffn = model.blocks[0].moe.ffn
        dims = {"d_model": model.spec.d_model, "d_ff": ffn.w_in.shape[1], "n_layers": len(model.blocks),
                "activation": model.activation}
        extra = {"moe": {"d_adapter": model.spec.d_adapter, "n_experts": model.spec.n_experts,
                         "top_k": model.spec.top_k, "seed": model.seed, "sigma": model.sigma}}
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    manifest = {"format": FORMAT, "version": 1, "kind": kind, "dims": dims, **extra,
                "tensors": _write_tensors(root, model.tensors(), dtype)}
    mpath = root / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return mpath


def manifest_hash(path) -> str:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _read_tensors(root: Path, manifest) -> dict[str, np.ndarray]:
    out = {}
    for t in manifest.get("tensors", []):
        try:
            raw = (root / t["file"]).read_bytes()
            arr = np.frombuffer(raw, dtype=DTYPES[t["dtype"]]).astype(np.float64).reshape(t["shape"])
        except (KeyError, OSError, ValueError) as exc:
            raise BadCheckpoint(f"tensor {t.get('name')!r}: {exc}") from exc
        if "sha256" in t and hashlib.sha256(raw).hexdigest() != t["sha256"]:
            raise BadCheckpoint(f"tensor {t['name']!r}: checksum mismatch")
        out[t["name"]] = arr
    return out


def load_checkpoint(path):
    root = Path(path)
    if root.is_file():
        root = root.parent
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BadCheckpoint(f"unreadable manifest in {root}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise BadCheckpoint(f"unknown checkpoint format {manifest.get('format')!r}")
    dims = manifest["dims"]
    t = _read_tensors(root, manifest)
    d = dims["d_model"]
    act = dims.get("activation", "silu")

    def get(name, shape=None):
        if name not in t:
            raise BadCheckpoint(f"missing tensor {name}")
        if shape is not None and t[name].shape != tuple(shape):
            raise BadCheckpoint(f"{name} has shape {t[name].shape}, expected {tuple(shape)}")
        return t[name]

    if manifest["kind"] == "dense":
        blocks = []
        for i in range(dims["n_layers"]):
            p = f"layers.{i}"
            blocks.append(DenseBlock(
                get(f"{p}.attn_norm", (d,)), get(f"{p}.mix", (d, d)), get(f"{p}.ffn_norm", (d,)),
                SharedFfn(get(f"{p}.ffn.w_in", (d, dims["d_ff"])), get(f"{p}.ffn.w_out", (dims["d_ff"], d)), act),
            ))
        return DenseModel(blocks, act)
    if manifest["kind"] == "moe":
        m = manifest["moe"]
        spec = MoeLayerSpec(d, m["d_adapter"], m["n_experts"], m["top_k"], dims["n_layers"])
        blocks = []
        for i in range(dims["n_layers"]):
            p = f"layers.{i}"
            ffn = SharedFfn(get(f"{p}.ffn.w_in"), get(f"{p}.ffn.w_out"), act)
            adapters = [ExpertAdapter(get(f"{p}.experts.{e}.w_down"), get(f"{p}.experts.{e}.w_up"))
                        for e in range(spec.n_experts)]
            blocks.append(MoeBlock(get(f"{p}.attn_norm"), get(f"{p}.mix"), get(f"{p}.ffn_norm"),
                                   MoeLayer(get(f"{p}.router", (spec.n_experts, d)), ffn, adapters, spec.top_k),
                                   m.get("sigma", "silu")))
        return MoeModel(blocks, spec, m.get("seed", 0), act, m.get("sigma", "silu"))
    raise BadCheckpoint(f"unknown checkpoint kind {manifest['kind']!r}")
