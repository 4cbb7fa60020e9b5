"""Toy dense/MoE transformer stacks, sparse upcycling, parameter accounting, routing stats."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..errors import BadCheckpoint, EmptyBatch
from .layer import SILU, ExpertAdapter, MoeLayer, MoeLayerSpec, SharedFfn, _topk_indices, moe_forward_batch


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


@dataclass
class DenseBlock:
    """Residual block: a linear token mixer standing in for attention, then the FFN."""

    attn_norm: np.ndarray
    mix: np.ndarray
    ffn_norm: np.ndarray
    ffn: SharedFfn

    def attention(self, x):
        return x + rms_norm(x, self.attn_norm) @ self.mix

    def forward(self, x):
        x = self.attention(x)
        return x + self.ffn(rms_norm(x, self.ffn_norm))

    def tensors(self, prefix):
        return {
            f"{prefix}.attn_norm": self.attn_norm,
            f"{prefix}.mix": self.mix,
            f"{prefix}.ffn_norm": self.ffn_norm,
            f"{prefix}.ffn.w_in": self.ffn.w_in,
            f"{prefix}.ffn.w_out": self.ffn.w_out,
        }


@dataclass
class MoeBlock:
    attn_norm: np.ndarray
    mix: np.ndarray
    ffn_norm: np.ndarray
    moe: MoeLayer
    sigma: str = "silu"

    def attention(self, x):
        return x + rms_norm(x, self.attn_norm) @ self.mix

    def forward(self, x, return_gates=False):
        x = self.attention(x)
        # router consumes the normalized post-attention stream, same as the FFN input
        h = rms_norm(x, self.ffn_norm)
        y, gates = moe_forward_batch(h, self.moe, self.sigma, x_in=h, return_gates=True)
        out = x + y
        return (out, gates) if return_gates else out

    def tensors(self, prefix):
        out = {
            f"{prefix}.attn_norm": self.attn_norm,
            f"{prefix}.mix": self.mix,
            f"{prefix}.ffn_norm": self.ffn_norm,
            f"{prefix}.ffn.w_in": self.moe.ffn.w_in,
            f"{prefix}.ffn.w_out": self.moe.ffn.w_out,
            f"{prefix}.router": self.moe.router,
        }
        for e, a in enumerate(self.moe.adapters):
            out[f"{prefix}.experts.{e}.w_down"] = a.w_down
            out[f"{prefix}.experts.{e}.w_up"] = a.w_up
        return out


@dataclass
class DenseModel:
    blocks: list[DenseBlock]
    activation: str = "silu"

    @property
    def d_model(self):
        return self.blocks[0].mix.shape[0]

    @property
    def d_ff(self):
        return self.blocks[0].ffn.w_in.shape[1]

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for b in self.blocks:
            x = b.forward(x)
        return x

    def tensors(self):
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.tensors(f"layers.{i}"))
        return out


@dataclass
class MoeModel:
    blocks: list[MoeBlock]
    spec: MoeLayerSpec
    seed: int = 0
    activation: str = "silu"
    sigma: str = "silu"

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for b in self.blocks:
            x = b.forward(x)
        return x

    def tensors(self):
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.tensors(f"layers.{i}"))
        return out


def random_dense_model(d_model=16, d_ff=32, n_layers=2, seed=0, activation="silu") -> DenseModel:
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(n_layers):
        blocks.append(DenseBlock(
            attn_norm=1.0 + 0.1 * rng.standard_normal(d_model),
            mix=rng.standard_normal((d_model, d_model)) / np.sqrt(d_model),
            ffn_norm=1.0 + 0.1 * rng.standard_normal(d_model),
            ffn=SharedFfn(rng.standard_normal((d_model, d_ff)) / np.sqrt(d_model),
                          rng.standard_normal((d_ff, d_model)) / np.sqrt(d_ff), activation),
        ))
    return DenseModel(blocks, activation)


def upcycle(dense: DenseModel, spec: MoeLayerSpec, seed: int = 0, init_scale: float = 0.02,
            sigma: str = "silu") -> MoeModel:
    """Wrap every FFN in an adapter-MoE layer.

    The FFN weights are shared (not copied) by all experts and stay frozen.
    W_up starts at zero, so the upcycled forward pass equals the dense one.
    """
    if not isinstance(dense, DenseModel) or not dense.blocks:
        raise BadCheckpoint("dense model has no layers")
    if dense.d_model != spec.d_model:
        raise BadCheckpoint(f"checkpoint width {dense.d_model} != spec d_model {spec.d_model}")
    if len(dense.blocks) != spec.n_layers:
        raise BadCheckpoint(f"checkpoint has {len(dense.blocks)} layers, spec says {spec.n_layers}")
    rng = np.random.default_rng(seed)
    d, r = spec.d_model, spec.d_adapter
    blocks = []
    for b in dense.blocks:
        router = init_scale * rng.standard_normal((spec.n_experts, d))
        adapters = [
            ExpertAdapter(init_scale * rng.standard_normal((d, r)), np.zeros((r, d)))
            for _ in range(spec.n_experts)
        ]
        blocks.append(MoeBlock(
            attn_norm=b.attn_norm.copy(),
            mix=b.mix.copy(),
            ffn_norm=b.ffn_norm.copy(),
            moe=MoeLayer(router, b.ffn, adapters, spec.top_k),
            sigma=sigma,
        ))
    return MoeModel(blocks, spec, seed, dense.activation, sigma)


# --------------------------------------------------------------------------- accounting


@dataclass(frozen=True)
class ParamCount:
    per_expert_adapter: int
    router: int
    total: int
    active: int
    base: int

    def rows(self):
        return [
            ("base", self.base),
            ("per_expert_adapter", self.per_expert_adapter),
            ("router", self.router),
            ("total", self.total),
            ("active", self.active),
        ]


def count_params(spec: MoeLayerSpec, base_params: int) -> ParamCount:
    """Closed-form parameter budget of an adapter-MoE model built on a dense base."""
    per_expert = spec.n_layers * 2 * spec.d_model * spec.d_adapter
    router = spec.n_layers * spec.n_experts * spec.d_model
    return ParamCount(
        per_expert_adapter=per_expert,
        router=router,
        total=base_params + spec.n_experts * per_expert + router,
        active=base_params + spec.top_k * per_expert + router,
        base=base_params,
    )


def enumerate_params(model) -> dict[str, int]:
    """Literal count of stored parameters, grouped by role.

    Shared FFN weights are counted once per layer no matter how many experts use them.
    """
    seen: set[int] = set()
    counts = {"frozen": 0, "adapter": 0, "router": 0}
    for name, arr in model.tensors().items():
        if id(arr) in seen:
            continue
        seen.add(id(arr))
        if ".experts." in name:
            counts["adapter"] += arr.size
        elif name.endswith(".router"):
            counts["router"] += arr.size
        else:
            counts["frozen"] += arr.size
    counts["total"] = sum(counts.values())
    return counts


# --------------------------------------------------------------------------- routing stats


@dataclass
class RoutingStats:
    counts: np.ndarray  # (n_layers, n_experts)
    n_tokens: int
    top_k: int
    extra: dict = field(default_factory=dict)

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.n_tokens

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "expert", "count", "frequency"])
        freq = self.frequencies
        for layer in range(self.counts.shape[0]):
            for e in range(self.counts.shape[1]):
                w.writerow([layer, e, int(self.counts[layer, e]), repr(float(freq[layer, e]))])
        return buf.getvalue()


def routing_stats(model: MoeModel, tokens: np.ndarray) -> RoutingStats:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    if tokens.shape[0] == 0:
        raise EmptyBatch("routing stats need at least one token")
    counts = []
    x = tokens
    for b in model.blocks:
        x = b.attention(x)
        h = rms_norm(x, b.ffn_norm)
        sel = _topk_indices(h @ b.moe.router.T, b.moe.top_k)
        counts.append(np.bincount(sel.ravel(), minlength=b.moe.n_experts))
        x = x + moe_forward_batch(h, b.moe, b.sigma, x_in=h)
    return RoutingStats(np.array(counts, dtype=np.int64), tokens.shape[0], model.spec.top_k)


def layer_routing_counts(x_in: np.ndarray, layer: MoeLayer) -> np.ndarray:
    sel = _topk_indices(np.atleast_2d(x_in) @ layer.router.T, layer.top_k)
    return np.bincount(sel.ravel(), minlength=layer.n_experts)


__all__ = [
    "DenseBlock", "DenseModel", "MoeBlock", "MoeModel", "ParamCount", "RoutingStats",
    "count_params", "enumerate_params", "random_dense_model", "routing_stats", "upcycle", "SILU",
]
