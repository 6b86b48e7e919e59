import numpy as np
import pytest

from reinjectr.errors import InvalidInput, NumericalFailure
from reinjectr.mmdit import (
    DiffusionBatch,
    MMDiTConfig,
    ToyMMDiT,
    attention_mask,
    epsilon_loss,
    forward,
    forward_full,
    grad_check,
    loss_and_grads,
    param_group,
    text_gradient_norm,
    time_bin,
)
from reinjectr.reinject import ReinjectionPlan, calibrate_rotation_map

SMALL = MMDiTConfig(layers=3, width=8, text_tokens=4, image_tokens=5, heads=2, mlp_ratio=2, time_bins=4)


@pytest.fixture
def small():
    return ToyMMDiT.init(SMALL)


def small_batch(seed=0, size=2, text_len=None):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((size, SMALL.image_tokens, SMALL.width))
    cond = rng.standard_normal((size, SMALL.text_tokens, SMALL.width))
    return DiffusionBatch.make(x0, cond, rng.uniform(0.05, 0.95, size), rng, text_len=text_len)


def test_config_validation():
    with pytest.raises(InvalidInput):
        MMDiTConfig(width=10, heads=4)
    with pytest.raises(InvalidInput):
        MMDiTConfig(layers=0)


def test_param_groups(small):
    assert param_group("b2.q_t") == "q_t"
    assert param_group("temb") == "temb"
    assert "b0.q_i" in small.params and "b0.q_t" in small.params
    assert not any(k.startswith("text_head") for k in small.params)


def test_init_is_seeded():
    a, b = ToyMMDiT.init(SMALL), ToyMMDiT.init(SMALL)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = ToyMMDiT.init(SMALL, seed=1)
    assert not np.array_equal(a.params["b0.q_t"], c.params["b0.q_t"])


def test_attention_mask_modes():
    full = attention_mask(2, 3)
    assert full.all()
    m = attention_mask(2, 3, "no_image_to_text")
    assert not m[2:, :2].any() and m[:2, 2:].all()
    nc = attention_mask(2, 3, "no_cross")
    assert not nc[:2, 2:].any() and not nc[2:, :2].any()
    padded = attention_mask(3, 2, text_len=2)
    assert not padded[:, 2].any()
    with pytest.raises(InvalidInput):
        attention_mask(2, 2, "sideways")


def test_time_bin():
    np.testing.assert_array_equal(time_bin([0.0, 0.49, 1.0], 4), [0, 1, 3])
    with pytest.raises(InvalidInput):
        time_bin(1.5, 4)


def test_forward_shapes_and_stack(small):
    rng = np.random.default_rng(0)
    pred, stack = forward(small, rng.standard_normal((4, 8)), rng.standard_normal((5, 8)), 0.5)
    assert pred.shape == (5, 8)
    assert stack.n_layers == SMALL.layers + 1
    assert stack.timestep == 0.5


def test_forward_shape_errors(small):
    with pytest.raises(InvalidInput):
        forward(small, np.zeros((3, 8)), np.zeros((5, 8)), 0.5)
    with pytest.raises(InvalidInput):
        forward(small, np.zeros((4, 7)), np.zeros((5, 8)), 0.5)


def test_nan_activation_raises(small):
    broken = small.copy()
    broken.params["b1.mlp_t.b2"][:] = np.nan
    with pytest.raises(NumericalFailure):
        forward(broken, np.zeros((4, 8)), np.zeros((5, 8)), 0.5)


def test_forward_deterministic(small):
    rng = np.random.default_rng(1)
    t, z = rng.standard_normal((4, 8)), rng.standard_normal((5, 8))
    a, sa = forward(small, t, z, 0.3)
    b, sb = forward(small, t, z, 0.3)
    np.testing.assert_array_equal(a, b)
    assert sa.equals(sb)


def test_zero_weight_plan_is_identity(small):
    rng = np.random.default_rng(2)
    t, z = rng.standard_normal((4, 8)), rng.standard_normal((5, 8))
    base, _ = forward(small, t, z, 0.5)
    plan = ReinjectionPlan(0, (1, 2), weight=0.0, rotation_enabled=False)
    out, _ = forward(small, t, z, 0.5, plan=plan)
    assert np.max(np.abs(out - base)) <= 1e-8


def test_injection_locality_and_finiteness(small):
    rng = np.random.default_rng(3)
    t, z = rng.standard_normal((4, 8)), rng.standard_normal((5, 8))
    _, base = forward(small, t, z, 0.5)
    plan = ReinjectionPlan(0, (2,), weight=0.025, rotation_enabled=False)
    pred, stack = forward(small, t, z, 0.5, plan=plan)
    assert np.all(np.isfinite(pred))
    for l in range(2):
        np.testing.assert_array_equal(stack[l], base[l])
    assert not np.array_equal(stack[2], base[2])


def test_rotation_plan_runs(small):
    rng = np.random.default_rng(4)
    res = forward_full(small, rng.standard_normal((32, 4, 8)), rng.standard_normal((32, 5, 8)), 0.5)
    from reinjectr.stack import FeatureStack

    calib = FeatureStack(layers=tuple(t.reshape(-1, 8) for t in res.text_layers))
    rmap = calibrate_rotation_map(calib, 1, (2,))
    plan = ReinjectionPlan(1, (2,), weight=0.1)
    pred, _ = forward(small, rng.standard_normal((4, 8)), rng.standard_normal((5, 8)), 0.5, plan=plan, rmap=rmap)
    assert np.all(np.isfinite(pred))
    with pytest.raises(InvalidInput):
        forward(small, np.zeros((4, 8)), np.zeros((5, 8)), 0.5, plan=plan)


def test_output_continuous_in_weight(small):
    rng = np.random.default_rng(5)
    t, z = rng.standard_normal((4, 8)), rng.standard_normal((5, 8))
    plan = ReinjectionPlan(0, (1, 2), weight=0.05, rotation_enabled=False)
    a, _ = forward(small, t, z, 0.5, plan=plan)
    b, _ = forward(small, t, z, 0.5, plan=plan.with_options(weight=0.05 + 1e-6))
    assert 0 < np.linalg.norm(a - b) < 1e-4


def test_rigged_oracle_has_zero_loss(small):
    rigged = small.copy()
    for k in rigged.params:
        if param_group(k) in ("o_i", "mlp_i.w2", "mlp_i.b2", "temb", "pos_i", "out.b"):
            rigged.params[k][:] = 0.0
    rigged.params["out.w"] = np.eye(SMALL.width)
    batch = small_batch()
    batch.t[:] = 1.0
    assert epsilon_loss(rigged, batch) == 0.0


def test_zero_prediction_loss_is_noise_power():
    cfg = MMDiTConfig(layers=1, width=16, text_tokens=4, image_tokens=64, heads=2)
    model = ToyMMDiT.init(cfg)
    model.params["out.w"][:] = 0.0
    rng = np.random.default_rng(0)
    batch = DiffusionBatch.make(
        rng.standard_normal((8, 64, 16)), rng.standard_normal((8, 4, 16)), 0.5, rng
    )
    # 8192 unit-variance samples: std of the mean square is sqrt(2/8192) ~ 0.016
    assert abs(epsilon_loss(model, batch) - 1.0) < 0.08


def test_loss_ignores_text_stream_outputs(small):
    batch = small_batch()
    base = epsilon_loss(small, batch)
    # the final block's text MLP only feeds text outputs, which no loss term sees
    bumped = small.copy()
    last = f"b{SMALL.layers - 1}."
    for name in ("mlp_t.w2", "mlp_t.b2", "o_t"):
        bumped.params[last + name] += 10.0
    assert epsilon_loss(bumped, batch) == base


def test_z_t_schedule():
    rng = np.random.default_rng(0)
    b = DiffusionBatch.make(np.ones((1, 2, 2)), np.zeros((1, 2, 2)), 0.25, rng)
    np.testing.assert_allclose(b.z_t, 0.75 + 0.25 * b.eps)


@pytest.mark.parametrize("mask", ["full", "no_image_to_text"])
def test_grad_check_small(small, mask):
    assert grad_check(small, small_batch(), samples=4, mask=mask) < 1e-4


def test_grad_check_selectors(small):
    assert grad_check(small, small_batch(), which=("q_t", "text"), samples=3) < 1e-4
    with pytest.raises(InvalidInput):
        grad_check(small, small_batch(), which=("nope",))


def test_text_gradient_structural_zero(small):
    batch = small_batch()
    assert text_gradient_norm(small, batch, "no_image_to_text") < 1e-12
    assert text_gradient_norm(small, batch, "no_cross") < 1e-12
    assert text_gradient_norm(small, batch, "full") > 1e-6


def test_padding_gradient_zero(small):
    _, _, d_text, _ = loss_and_grads(small, small_batch(text_len=2))
    assert np.abs(d_text[:, 2:]).max() == 0.0
    assert np.abs(d_text[:, :2]).max() > 0.0
