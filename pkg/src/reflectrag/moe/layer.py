"""Router, adapters, mixture forward/backward and load balancing for one layer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import EmptyBatch, ShapeMismatch


@dataclass(frozen=True)
class MoeLayerSpec:
    d_model: int
    d_adapter: int
    n_experts: int = 8
    top_k: int = 2
    n_layers: int = 1

    def __post_init__(self):
        if self.d_model < 1 or self.n_experts < 1 or self.top_k < 1 or self.n_layers < 1:
            raise ValueError("d_model, n_experts, top_k and n_layers must be >= 1")
        if self.d_adapter < 0:
            raise ValueError("d_adapter must be >= 0")
        if self.top_k > self.n_experts:
            raise ValueError("top_k cannot exceed n_experts")


@dataclass(frozen=True)
class Activation:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    smooth: bool = True


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _silu(a):
    return a * _sigmoid(a)


def _silu_grad(a):
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


ACTIVATIONS = {
    "silu": Activation("silu", _silu, _silu_grad),
    "identity": Activation("identity", lambda a: a, np.ones_like),
    "tanh": Activation("tanh", np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    "relu": Activation("relu", lambda a: np.maximum(a, 0.0), lambda a: (a > 0).astype(float), smooth=False),
}
SILU = ACTIVATIONS["silu"]


def _act(sigma) -> Activation:
    return ACTIVATIONS[sigma] if isinstance(sigma, str) else sigma


@dataclass
class ExpertAdapter:
    w_down: np.ndarray  # (d_model, d_adapter)
    w_up: np.ndarray  # (d_adapter, d_model)
    trainable: bool = True

    def __post_init__(self):
        d, r = self.w_down.shape
        if self.w_up.shape != (r, d):
            raise ShapeMismatch(f"w_up shape {self.w_up.shape} does not match w_down {self.w_down.shape}")

    @property
    def n_params(self) -> int:
        return self.w_down.size + self.w_up.size


@dataclass
class SharedFfn:
    """Frozen two-matrix feed-forward sublayer, stored once per layer."""

    w_in: np.ndarray  # (d_model, d_ff)
    w_out: np.ndarray  # (d_ff, d_model)
    activation: str = "silu"
    frozen: bool = True

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return _act(self.activation).fn(x @ self.w_in) @ self.w_out

    @property
    def n_params(self) -> int:
        return self.w_in.size + self.w_out.size


@dataclass
class MoeLayer:
    router: np.ndarray  # (n_experts, d_model)
    ffn: SharedFfn
    adapters: list[ExpertAdapter] = field(default_factory=list)
    top_k: int = 2

    @property
    def n_experts(self) -> int:
        return self.router.shape[0]

    @property
    def d_model(self) -> int:
        return self.router.shape[1]

    def trainable_params(self) -> dict[str, np.ndarray]:
        out = {"router": self.router}
        for e, a in enumerate(self.adapters):
            out[f"experts.{e}.w_down"] = a.w_down
            out[f"experts.{e}.w_up"] = a.w_up
        return out


# --------------------------------------------------------------------------- routing


def _topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -logits keeps lower expert index first among ties
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def route(x_in: np.ndarray, router: np.ndarray, top_k: int) -> np.ndarray:
    """Sparse gate vector: softmax over the top-k router logits, zeros elsewhere."""
    x_in = np.asarray(x_in, dtype=np.float64)
    if x_in.ndim != 1 or router.ndim != 2 or router.shape[1] != x_in.shape[0]:
        raise ShapeMismatch(f"router {router.shape} cannot consume input {x_in.shape}")
    if not 1 <= top_k <= router.shape[0]:
        raise ValueError(f"top_k={top_k} out of range for {router.shape[0]} experts")
    return route_batch(x_in[None, :], router, top_k)[0]


def route_batch(x_in: np.ndarray, router: np.ndarray, top_k: int) -> np.ndarray:
    logits = x_in @ router.T
    sel = _topk_indices(logits, top_k)
    picked = np.take_along_axis(logits, sel, axis=-1)
    w = np.exp(picked - picked.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    gates = np.zeros_like(logits)
    np.put_along_axis(gates, sel, w, axis=-1)
    return gates


def router_probs(x_in: np.ndarray, router: np.ndarray) -> np.ndarray:
    """Full (dense) softmax router probabilities, one row per token."""
    logits = np.atleast_2d(x_in) @ router.T
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return p / p.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------- forward


def adapter_forward(x: np.ndarray, a: ExpertAdapter, sigma=SILU) -> np.ndarray:
    """Bottleneck adapter with residual: sigma(x W_down) W_up + x."""
    if x.shape[-1] != a.w_down.shape[0]:
        raise ShapeMismatch(f"input width {x.shape[-1]} != adapter width {a.w_down.shape[0]}")
    return _act(sigma).fn(x @ a.w_down) @ a.w_up + x


def _check_layer(x, layer: MoeLayer):
    if x.shape[-1] != layer.d_model or layer.ffn.w_in.shape[0] != layer.d_model:
        raise ShapeMismatch(f"input width {x.shape[-1]} != layer width {layer.d_model}")
    if len(layer.adapters) != layer.n_experts:
        raise ShapeMismatch(f"{len(layer.adapters)} adapters for {layer.n_experts} router rows")


def moe_forward_batch(x: np.ndarray, layer: MoeLayer, sigma=SILU, x_in: np.ndarray | None = None,
                      return_gates: bool = False):
    """Mixture output for a (tokens, d_model) batch.

    The expert outputs share the frozen FFN result ``h`` and gates sum to one,
    so the mixture is evaluated as ``h + sum_e gate_e * adapter_delta_e``;
    unselected experts are never evaluated.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_in = x if x_in is None else np.atleast_2d(x_in)
    _check_layer(x, layer)
    act = _act(sigma)
    gates = route_batch(x_in, layer.router, layer.top_k)
    h = layer.ffn(x)
    acc = np.zeros_like(h)
    for e, a in enumerate(layer.adapters):
        rows = np.nonzero(gates[:, e])[0]
        if rows.size == 0:
            continue
        hs = h[rows]
        delta = act.fn(hs @ a.w_down) @ a.w_up
        acc[rows] += gates[rows, e, None] * delta
    y = h + acc
    return (y, gates) if return_gates else y


def moe_forward(x: np.ndarray, layer: MoeLayer, sigma=SILU, x_in: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatch("moe_forward takes one d_model vector; use moe_forward_batch")
    return moe_forward_batch(x[None], layer, sigma, None if x_in is None else np.asarray(x_in)[None])[0]


# --------------------------------------------------------------------------- load balancing


def load_balance_loss(probs: np.ndarray, selections: np.ndarray) -> float:
    """Switch-style auxiliary loss N_E * sum_e f_e * P_e.

    ``probs`` are full-softmax router probabilities (tokens, n_experts);
    ``selections`` are the chosen expert indices (tokens, k). ``f_e`` is the
    share of the tokens' k slots assigned to expert e, ``P_e`` the mean probability.
    Uniform routing gives exactly 1.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    selections = np.atleast_2d(np.asarray(selections))
    if probs.shape[0] == 0 or selections.size == 0:
        raise EmptyBatch("load balance loss over an empty batch")
    n_tokens, n_experts = probs.shape
    k = selections.shape[1]
    counts = np.bincount(selections.ravel(), minlength=n_experts)
    f = counts / (n_tokens * k)
    p_mean = probs.mean(axis=0)
    return float(n_experts * np.dot(f, p_mean))


def layer_load_balance_loss(x_in: np.ndarray, layer: MoeLayer) -> float:
    probs = router_probs(x_in, layer.router)
    return load_balance_loss(probs, _topk_indices(np.atleast_2d(x_in) @ layer.router.T, layer.top_k))


# --------------------------------------------------------------------------- gradients


class QuadraticLoss:
    """0.5 * ||y - target||^2 summed over tokens."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def __call__(self, y):
        return 0.5 * float(np.sum((y - self.target) ** 2))

    def grad(self, y):
        return y - self.target


class LinearLoss:
    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def __call__(self, y):
        return float(np.sum(self.c * y))

    def grad(self, y):
        return np.broadcast_to(self.c, y.shape).copy()


class ZeroLoss:
    def __call__(self, y):
        return 0.0

    def grad(self, y):
        return np.zeros_like(y)


def analytic_grads(x: np.ndarray, layer: MoeLayer, loss, sigma=SILU, x_in=None) -> dict[str, np.ndarray]:
    """Backward pass for the trainable parameters (router and adapters)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_in = x if x_in is None else np.atleast_2d(x_in)
    act = _act(sigma)
    y = moe_forward_batch(x, layer, act, x_in)
    gy = loss.grad(y)
    h = layer.ffn(x)
    grads = {name: np.zeros_like(p) for name, p in layer.trainable_params().items()}
    logits = x_in @ layer.router.T
    sel = _topk_indices(logits, layer.top_k)
    for t in range(x.shape[0]):
        idx = sel[t]
        z = logits[t, idx]
        g = np.exp(z - z.max())
        g /= g.sum()
        dg = np.empty_like(g)
        for j, e in enumerate(idx):
            a = layer.adapters[e]
            pre = h[t] @ a.w_down
            s = act.fn(pre)
            out = s @ a.w_up + h[t]
            dg[j] = gy[t] @ out
            grads[f"experts.{e}.w_up"] += g[j] * np.outer(s, gy[t])
            dpre = g[j] * (a.w_up @ gy[t]) * act.grad(pre)
            grads[f"experts.{e}.w_down"] += np.outer(h[t], dpre)
        dz = g * (dg - np.dot(g, dg))
        grads["router"][idx] += np.outer(dz, x_in[t])
    return grads


def numeric_grads(x, layer: MoeLayer, loss, eps=1e-5, sigma=SILU, x_in=None):
    """Central differences for every trainable entry.

    Returns ``(grads, valid)`` where ``valid`` masks out entries whose +/-eps
    perturbation changed some token's top-k set (non-differentiable there).
    """
    x = np.atleast_2d(x)
    x_route = x if x_in is None else np.atleast_2d(x_in)

    def selection():
        return np.sort(_topk_indices(x_route @ layer.router.T, layer.top_k), axis=-1)

    base_sel = selection()
    grads, valid = {}, {}
    for name, param in layer.trainable_params().items():
        flat = param.reshape(-1)
        g = np.zeros(flat.size)
        ok = np.ones(flat.size, dtype=bool)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss(moe_forward_batch(x, layer, sigma, x_in))
            same = np.array_equal(selection(), base_sel)
            flat[i] = orig - eps
            lm = loss(moe_forward_batch(x, layer, sigma, x_in))
            same = same and np.array_equal(selection(), base_sel)
            flat[i] = orig
            g[i] = (lp - lm) / (2 * eps)
            ok[i] = same
        grads[name] = g.reshape(param.shape)
        valid[name] = ok.reshape(param.shape)
    return grads, valid


def grad_check(layer: MoeLayer, loss, eps: float = 1e-5, x=None, sigma=SILU, x_in=None,
               rng=None, n_tokens: int = 4, per_tensor: bool = False) -> float:
    """Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||).

    By default the norms run over all trainable gradients concatenated. With
    ``per_tensor`` the worst tensor is reported instead; that is stricter but
    flags tensors whose gradient sits at the finite-difference noise floor
    (experts with near-zero gates). Entries whose perturbation flips a top-k
    selection are left out of both sides. Returns 0 when every compared
    gradient is exactly zero.
    """
    if x is None:
        rng = np.random.default_rng(0) if rng is None else rng
        x = rng.standard_normal((n_tokens, layer.d_model))
    analytic = analytic_grads(x, layer, loss, sigma, x_in)
    numeric, valid = numeric_grads(x, layer, loss, eps, sigma, x_in)
    pairs = [(analytic[k][valid[k]], numeric[k][valid[k]]) for k in analytic]
    if not per_tensor:
        pairs = [(np.concatenate([a for a, _ in pairs]), np.concatenate([n for _, n in pairs]))]
    worst = 0.0
    for a, n in pairs:
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst
