"""Per-layer expert selection frequencies of an upcycled toy model.

    python scripts/routing_analysis.py [--seed 0] [--tokens 5000] [--out runs/routes.csv]

At initialization the router is random, so the interesting number is how far
each layer is from uniform (k/N per expert) and the load-balancing loss.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from reflectrag.moe import random_dense_model, routing_stats, upcycle
from reflectrag.moe.layer import layer_load_balance_loss
from reflectrag.moe.model import rms_norm
from reflectrag.presets import LOAD_BALANCE_COEF, MOE_PRESETS, TOY_D_FF

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tokens", type=int, default=5000)
    ap.add_argument("--init-scale", type=float, default=1.0, help="router init scale (larger = sharper routing)")
    ap.add_argument("--out", default="runs/routes.csv")
    args = ap.parse_args()

    spec, _ = MOE_PRESETS["toy"]
    dense = random_dense_model(spec.d_model, TOY_D_FF, spec.n_layers, seed=args.seed)
    moe = upcycle(dense, spec, seed=args.seed, init_scale=args.init_scale)
    tokens = np.random.default_rng(args.seed).standard_normal((args.tokens, spec.d_model))
    stats = routing_stats(moe, tokens)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(stats.to_csv())

    uniform = spec.top_k / spec.n_experts
    x = tokens
    for i, block in enumerate(moe.blocks):
        x = block.attention(x)
        h = rms_norm(x, block.ffn_norm)
        lb = layer_load_balance_loss(h, block.moe)
        freqs = " ".join(f"{f:.3f}" for f in stats.frequencies[i])
        print(f"layer {i}: freq [{freqs}] (uniform {uniform:.3f}), "
              f"load-balance loss {lb:.4f} (x{LOAD_BALANCE_COEF} in training)")
        x = block.forward(x) - block.attention(x) + x
    print("wrote", args.out)
