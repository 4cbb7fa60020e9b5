import numpy as np
import pytest

from reflectrag.errors import BadCheckpoint, EmptyBatch, ShapeMismatch
from reflectrag.moe import (
    ACTIVATIONS,
    MoeLayerSpec,
    count_params,
    enumerate_params,
    grad_check,
    load_balance_loss,
    moe_forward,
    moe_forward_batch,
    random_dense_model,
    route,
    routing_stats,
    upcycle,
)
from reflectrag.moe.checkpoint import load_checkpoint, manifest_hash, save_checkpoint
from reflectrag.moe.layer import LinearLoss, QuadraticLoss, ZeroLoss
from reflectrag.moe.model import layer_routing_counts
from reflectrag.presets import MOE_PRESETS, REPORTED_BUDGETS, TOY_D_FF

from oracles import dense_moe_oracle
from toys import random_layer


def test_route_example():
    w = np.eye(4)
    g = route(np.array([3.0, 1.0, 2.0, 0.0]), w, 2)
    assert np.count_nonzero(g) == 2
    assert g[0] == pytest.approx(np.e / (np.e + 1)) and g[2] == pytest.approx(1 / (np.e + 1))


def test_route_ties_go_to_lower_index():
    g = route(np.ones(4), np.eye(4), 2)
    assert list(np.nonzero(g)[0]) == [0, 1]
    assert g[0] == g[1] == 0.5


def test_route_k_equals_n_is_full_softmax():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal(5), rng.standard_normal((3, 5))
    logits = w @ x
    want = np.exp(logits - logits.max())
    assert np.allclose(route(x, w, 3), want / want.sum(), atol=1e-15)


def test_route_errors():
    with pytest.raises(ShapeMismatch):
        route(np.ones(3), np.eye(4), 2)
    with pytest.raises(ValueError):
        route(np.ones(4), np.eye(4), 5)


def test_forward_matches_dense_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d, n = int(rng.integers(2, 17)), int(rng.integers(1, 9))
        k = int(rng.integers(1, n + 1))
        layer = random_layer(rng, d, n, k)
        x = rng.standard_normal(d)
        y = moe_forward(x, layer)
        want, gates = dense_moe_oracle(x, layer.router, layer.ffn.w_in, layer.ffn.w_out,
                                       [a.w_down for a in layer.adapters], [a.w_up for a in layer.adapters], k)
        assert np.max(np.abs(y - want)) < 1e-12
        assert np.allclose(route(x, layer.router, k), gates, atol=1e-15)


def test_forward_batch_equals_rows():
    rng = np.random.default_rng(2)
    layer = random_layer(rng, 8, 4, 2)
    xs = rng.standard_normal((5, 8))
    batch = moe_forward_batch(xs, layer)
    for i in range(5):
        assert np.allclose(batch[i], moe_forward(xs[i], layer), rtol=0, atol=1e-13)


def test_forward_rejects_bad_width():
    layer = random_layer(np.random.default_rng(0), 8, 4, 2)
    with pytest.raises(ShapeMismatch):
        moe_forward(np.ones(7), layer)


def test_load_balance_uniform_is_one():
    n, t = 4, 8
    probs = np.full((t, n), 1 / n)
    sel = np.array([[i % n, (i + 1) % n] for i in range(t)])
    assert load_balance_loss(probs, sel) == pytest.approx(1.0, abs=1e-12)


def test_load_balance_collapsed_is_n():
    n, t = 4, 6
    probs = np.zeros((t, n))
    probs[:, 0] = 1.0
    assert load_balance_loss(probs, np.zeros((t, 1), dtype=int)) == pytest.approx(n)


def test_load_balance_empty():
    with pytest.raises(EmptyBatch):
        load_balance_loss(np.zeros((0, 4)), np.zeros((0, 2), dtype=int))


def test_grad_check_quadratic_silu():
    rng = np.random.default_rng(3)
    layer = random_layer(rng, 8, 4, 2)
    target = rng.standard_normal((4, 8))
    assert grad_check(layer, QuadraticLoss(target), rng=rng) < 1e-6
    assert grad_check(layer, QuadraticLoss(target), rng=rng, per_tensor=True) < 1e-4


class _WrongGradLoss(QuadraticLoss):
    def grad(self, y):
        return 1.01 * super().grad(y)


def test_grad_check_catches_wrong_gradient():
    rng = np.random.default_rng(3)
    layer = random_layer(rng, 8, 4, 2)
    assert grad_check(layer, _WrongGradLoss(rng.standard_normal((4, 8))), rng=rng) > 5e-3


def test_grad_check_linear_identity_is_tight():
    rng = np.random.default_rng(4)
    layer = random_layer(rng, 6, 3, 2)
    err = grad_check(layer, LinearLoss(rng.standard_normal(6)), sigma=ACTIVATIONS["identity"], rng=rng)
    assert err < 1e-7


def test_grad_check_zero_loss():
    layer = random_layer(np.random.default_rng(5), 4, 2, 1)
    assert grad_check(layer, ZeroLoss()) == 0.0


def test_count_params_7b_budget():
    spec, base = MOE_PRESETS["7b"]
    c = count_params(spec, base)
    assert c.per_expert_adapter == 134_217_728
    for key, want in REPORTED_BUDGETS["7b"].items():
        assert abs(getattr(c, key) - want) / want < 0.01, key


def test_count_params_13b_budget():
    spec, base = MOE_PRESETS["13b"]
    c = count_params(spec, base)
    assert abs(c.per_expert_adapter - 213e6) / 213e6 < 0.02


def test_count_params_k_equals_n():
    spec = MoeLayerSpec(16, 4, 4, 4, 2)
    c = count_params(spec, 1000)
    assert c.active == c.total


def test_upcycle_identity_and_counts():
    spec, base = MOE_PRESETS["toy"]
    dense = random_dense_model(spec.d_model, TOY_D_FF, spec.n_layers, seed=11)
    moe = upcycle(dense, spec, seed=3)
    x = np.random.default_rng(0).standard_normal((50, spec.d_model))
    assert np.array_equal(moe.forward(x), dense.forward(x))
    before, after = enumerate_params(dense), enumerate_params(moe)
    assert before["total"] == base
    c = count_params(spec, base)
    assert after["total"] == c.total
    assert after["total"] - before["total"] == spec.n_experts * c.per_expert_adapter + c.router


def test_upcycle_shape_mismatch():
    dense = random_dense_model(8, 16, 2)
    with pytest.raises(BadCheckpoint):
        upcycle(dense, MoeLayerSpec(16, 4, 4, 2, 2))
    with pytest.raises(BadCheckpoint):
        upcycle(dense, MoeLayerSpec(8, 4, 4, 2, 3))


def test_routing_counts_monte_carlo():
    # identity router on isotropic inputs: each expert lands in the top-k with prob k/N
    rng = np.random.default_rng(6)
    n, k, t = 8, 2, 20000
    layer = random_layer(rng, n, n, k)
    layer.router = np.eye(n)
    counts = layer_routing_counts(rng.standard_normal((t, n)), layer)
    p = k / n
    sigma = np.sqrt(t * p * (1 - p))
    assert counts.sum() == t * k
    assert np.all(np.abs(counts - t * p) < 3 * sigma)


def test_routing_stats_csv():
    spec, _ = MOE_PRESETS["toy"]
    moe = upcycle(random_dense_model(spec.d_model, TOY_D_FF, spec.n_layers), spec)
    stats = routing_stats(moe, np.random.default_rng(0).standard_normal((100, spec.d_model)))
    assert stats.counts.shape == (spec.n_layers, spec.n_experts)
    assert np.all(stats.counts.sum(axis=1) == 100 * spec.top_k)
    lines = stats.to_csv().splitlines()
    assert lines[0] == "layer,expert,count,frequency"
    assert len(lines) == 1 + spec.n_layers * spec.n_experts


def test_checkpoint_round_trip(tmp_path):
    spec, _ = MOE_PRESETS["toy"]
    dense = random_dense_model(spec.d_model, TOY_D_FF, spec.n_layers, seed=2)
    moe = upcycle(dense, spec, seed=5)
    for model, name in [(dense, "d"), (moe, "m")]:
        save_checkpoint(model, tmp_path / name)
        back = load_checkpoint(tmp_path / name)
        x = np.random.default_rng(1).standard_normal((10, spec.d_model))
        assert np.array_equal(back.forward(x), model.forward(x))


def test_checkpoint_hash_deterministic(tmp_path):
    spec, _ = MOE_PRESETS["toy"]
    for name in ("a", "b"):
        dense = random_dense_model(spec.d_model, TOY_D_FF, spec.n_layers, seed=7)
        save_checkpoint(upcycle(dense, spec, seed=7), tmp_path / name)
    assert manifest_hash(tmp_path / "a") == manifest_hash(tmp_path / "b")


def test_checkpoint_corruption_detected(tmp_path):
    dense = random_dense_model(4, 8, 1)
    save_checkpoint(dense, tmp_path)
    blob = next(p for p in tmp_path.iterdir() if p.name != "manifest.json")
    blob.write_bytes(b"\0" * len(blob.read_bytes()))
    with pytest.raises(BadCheckpoint):
        load_checkpoint(tmp_path)
