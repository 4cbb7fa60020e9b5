"""Named presets so experiments cite a preset name rather than loose numbers."""
from __future__ import annotations

from .moe.layer import MoeLayerSpec
from .reflection import ScoreWeights

# Inference weights for Relevance / Grounding / Utility.
DEFAULT_WEIGHTS = ScoreWeights(1.0, 1.0, 0.5, include_seq_term=False)

# Long-form segment beam search.
BEAM_SIZE = 2
MAX_DEPTH = 7

# Multi-hop contexts retrieved per query.
TOP_N_CONTEXTS = 3

# Base (dense) parameter counts; 13B is the nominal model size.
MOE_PRESETS: dict[str, tuple[MoeLayerSpec, int]] = {
    "7b": (MoeLayerSpec(d_model=4096, d_adapter=512, n_experts=8, top_k=2, n_layers=32), 6_740_000_000),
    "13b": (MoeLayerSpec(d_model=5120, d_adapter=512, n_experts=8, top_k=2, n_layers=40), 13_000_000_000),
    "toy": (MoeLayerSpec(d_model=16, d_adapter=4, n_experts=4, top_k=2, n_layers=2), 2 * (16 + 16 * 16 + 16 + 2 * 16 * 32)),
}
TOY_D_FF = 32

# Budgets reported for the two released model sizes: (per-expert adapters, total, active).
REPORTED_BUDGETS = {
    "7b": {"per_expert_adapter": 135e6, "total": 7.81e9, "active": 7.01e9},
    "13b": {"per_expert_adapter": 213e6},
}

LOAD_BALANCE_COEF = 0.01
