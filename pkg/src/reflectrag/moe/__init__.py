"""Adapter-based sparse mixture-of-experts layers at desk scale (float64 numpy)."""
from .layer import (  # noqa: F401
    ACTIVATIONS,
    Activation,
    ExpertAdapter,
    MoeLayer,
    MoeLayerSpec,
    SharedFfn,
    adapter_forward,
    analytic_grads,
    grad_check,
    load_balance_loss,
    moe_forward,
    moe_forward_batch,
    route,
    route_batch,
)
from .model import (  # noqa: F401
    DenseBlock,
    DenseModel,
    MoeBlock,
    MoeModel,
    ParamCount,
    RoutingStats,
    count_params,
    enumerate_params,
    random_dense_model,
    routing_stats,
    upcycle,
)
