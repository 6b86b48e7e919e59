import warnings

import numpy as np
import pytest

from reinjectr.errors import DegenerateWarning, InvalidInput
from reinjectr.linalg import layer_norm, token_stats
from reinjectr.reinject import (
    PILOT_WEIGHTS,
    PRESETS,
    ReinjectionPlan,
    RotationMap,
    _fuse,
    anchored_inject,
    apply_plan,
    calibrate_rotation,
    calibrate_rotation_map,
    estimate_cost,
    is_orthogonal,
    parse_targets,
    plan_layers,
    preset_plan,
    residual_attribute_inject,
)
from reinjectr.stack import FeatureStack


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def test_calibrate_self_alignment(rng):
    x = rng.standard_normal((200, 16))
    r = calibrate_rotation(x, x, check_normalized=False)
    np.testing.assert_allclose(r, np.eye(16), atol=1e-8)


def test_planted_rotation_recovered(rng):
    x = rng.standard_normal((200, 16))
    q = random_orthogonal(rng, 16)
    r = calibrate_rotation(x, x @ q, check_normalized=False)
    assert np.linalg.norm(x @ r - x @ q) / np.linalg.norm(x @ q) < 1e-8
    assert np.linalg.norm(r - q) < 1e-6
    assert abs(abs(np.linalg.det(r)) - 1) < 1e-6


def test_procrustes_beats_random_candidates(rng):
    d = 8
    x = rng.standard_normal((100, d))
    y = x @ random_orthogonal(rng, d) + 0.05 * rng.standard_normal((100, d))
    r = calibrate_rotation(x, y, check_normalized=False)
    best = np.linalg.norm(x @ r - y)
    for _ in range(1000):
        assert best <= np.linalg.norm(x @ random_orthogonal(rng, d) - y)


def test_procrustes_locally_optimal(rng):
    d = 6
    x = rng.standard_normal((80, d))
    y = x @ random_orthogonal(rng, d) + 0.1 * rng.standard_normal((80, d))
    r = calibrate_rotation(x, y, check_normalized=False)
    best = np.linalg.norm(x @ r - y)
    for _ in range(50):
        a = rng.standard_normal((d, d)) * 1e-3
        # Cayley transform keeps the perturbation orthogonal
        s = a - a.T
        p = np.linalg.solve(np.eye(d) + s, np.eye(d) - s)
        assert best <= np.linalg.norm(x @ (r @ p) - y) + 1e-12


def test_layer_normed_calibration_maps_ones_to_ones(rng):
    d = 12
    x = layer_norm(rng.standard_normal((300, d)))
    y = layer_norm(rng.standard_normal((300, d)) + x)
    with warnings.catch_warnings():
        warnings.simplefilter("error", DegenerateWarning)
        r = calibrate_rotation(x, y)
    np.testing.assert_allclose(np.ones(d) @ r, np.ones(d), atol=1e-8)
    assert is_orthogonal(r)


def test_calibrate_errors_and_warnings(rng):
    with pytest.raises(InvalidInput):
        calibrate_rotation(np.ones((5, 3)), np.ones((5, 4)))
    with pytest.warns(DegenerateWarning):
        calibrate_rotation(rng.standard_normal((3, 8)), rng.standard_normal((3, 8)), check_normalized=False)
    with pytest.warns(UserWarning, match="layer-normalized"):
        calibrate_rotation(5 + rng.standard_normal((40, 4)), rng.standard_normal((40, 4)))


def test_rank_deficient_still_orthogonal():
    x = np.zeros((10, 4))
    x[:, 0] = np.arange(10)
    with pytest.warns(DegenerateWarning):
        r = calibrate_rotation(x, x, check_normalized=False)
    assert is_orthogonal(r)


def test_rotation_map_invariants(rng):
    with pytest.raises(InvalidInput):
        RotationMap(3, {2: np.eye(4)})
    with pytest.raises(InvalidInput):
        RotationMap(0, {1: 2 * np.eye(4)})
    rmap = RotationMap(0, {3: np.eye(2), 1: np.eye(2)})
    assert rmap.targets == (1, 3)


def plan(w=0.025, anchor=True, rotation=False, **kw):
    return ReinjectionPlan(0, (1,), weight=w, anchor_enabled=anchor, rotation_enabled=rotation, **kw)


@pytest.mark.parametrize("rotation", [False, True])
def test_zero_weight_identity(rng, rotation):
    t_ori, t_tgt = rng.standard_normal((2, 20, 8)) * 3
    r = random_orthogonal(rng, 8) if rotation else None
    out = anchored_inject(t_ori, t_tgt, plan(0.0, rotation=rotation), r)
    assert np.max(np.abs(out - t_tgt)) <= 1e-10
    fused = _fuse(t_ori, t_tgt, 0.0, r, True, 1e-6)
    assert np.max(np.abs(fused - t_tgt)) <= 1e-10


@pytest.mark.parametrize("w", [0.0, 0.025, 0.1, 1.0, 5.0])
def test_statistics_restored(rng, w):
    t_ori = rng.standard_normal((30, 16)) * 4 - 1
    t_tgt = rng.standard_normal((30, 16)) * 2 + 3
    r = random_orthogonal(rng, 16)
    out = anchored_inject(t_ori, t_tgt, plan(w, rotation=True), r)
    a, b = token_stats(out), token_stats(t_tgt)
    assert np.max(np.abs(a.mean - b.mean)) <= 1e-8
    assert np.max(np.abs(a.std - b.std)) <= 1e-8


def test_plain_residual_exact(rng):
    t_ori, t_tgt = rng.standard_normal((2, 10, 4))
    out = anchored_inject(t_ori, t_tgt, plan(0.025, anchor=False))
    np.testing.assert_array_equal(out, t_tgt + 0.025 * t_ori)


def test_literal_restore_variant(rng):
    t_ori, t_tgt = rng.standard_normal((2, 10, 6))
    p = plan(0.1, exact_restore=False)
    out = anchored_inject(t_ori, t_tgt, p)
    st = token_stats(t_tgt)
    fused = layer_norm(t_tgt) + 0.1 * layer_norm(t_ori)
    np.testing.assert_allclose(out, fused * st.std[:, None] + st.mean[:, None], atol=1e-12)


def test_inject_errors(rng):
    with pytest.raises(InvalidInput):
        anchored_inject(np.ones((3, 2)), np.ones((4, 2)), plan())
    with pytest.raises(InvalidInput):
        anchored_inject(np.ones((3, 2)), np.ones((3, 2)), plan(rotation=True))
    with pytest.raises(InvalidInput):
        ReinjectionPlan(0, (1,), weight=-0.1)
    with pytest.raises(InvalidInput):
        ReinjectionPlan(2, (1, 3))


def test_residual_attribute_inject(rng):
    stack = FeatureStack(layers=tuple(rng.standard_normal((5, 7, 3))))
    t_b0 = rng.standard_normal((7, 3))
    assert residual_attribute_inject(stack, t_b0, 0.0).equals(stack)
    out = residual_attribute_inject(stack, t_b0, 0.05, start_layer=2)
    for l in (0, 1):
        np.testing.assert_array_equal(out[l], stack[l])
    for l in range(2, 5):
        np.testing.assert_array_equal(out[l], stack[l] + 0.05 * t_b0)
    with pytest.raises(InvalidInput):
        residual_attribute_inject(stack, np.ones((6, 3)), 0.1)


def test_pilot_weights_span():
    assert min(PILOT_WEIGHTS) == 0.01 and max(PILOT_WEIGHTS) == 0.1


def test_plan_layers_geometries():
    assert plan_layers(24, 1).target_layers == tuple(range(2, 24))
    assert plan_layers(24, 1, "range", 2, 11).target_layers == tuple(range(2, 12))
    assert plan_layers(24, 1, "stride", 2, 23, stride=3).target_layers == (2, 5, 8, 11, 14, 17, 20, 23)
    with pytest.raises(InvalidInput):
        plan_layers(24, 23)
    with pytest.raises(InvalidInput):
        plan_layers(24, 5, "range", 1, 3)


def test_parse_targets():
    assert parse_targets("full", 24, 1).target_layers == tuple(range(2, 24))
    assert parse_targets("2..11", 24, 1).target_layers == tuple(range(2, 12))
    assert parse_targets("stride:3:2..23", 24, 1).target_layers[:3] == (2, 5, 8)
    with pytest.raises(InvalidInput):
        parse_targets("deep", 24, 1)


def test_presets():
    sd3 = preset_plan("sd3")
    assert sd3.origin_layer == 1 and sd3.target_layers == tuple(range(2, 24)) and sd3.weight == 0.025
    assert preset_plan("qwen").target_layers[0] == 31
    assert preset_plan("flux").target_layers[0] == 3
    assert set(PRESETS) == {"sd3", "sd35", "flux", "qwen"}
    with pytest.raises(InvalidInput):
        preset_plan("sdxl")


def test_apply_plan_only_touches_targets(rng):
    stack = FeatureStack(layers=tuple(rng.standard_normal((6, 40, 8))))
    p = ReinjectionPlan(1, (3, 4), weight=0.5)
    rmap = calibrate_rotation_map(stack, 1, (3, 4))
    out = apply_plan(stack, p, rmap)
    for l in (0, 1, 2, 5):
        np.testing.assert_array_equal(out[l], stack[l])
    assert not np.array_equal(out[3], stack[3])
    with pytest.raises(InvalidInput):
        apply_plan(stack, p, None)
    with pytest.raises(InvalidInput):
        apply_plan(stack, p, calibrate_rotation_map(stack, 1, (3,)))


def test_cost_arithmetic():
    rep = estimate_cost(512, 1536, 56)
    nd = 512 * 1536
    assert rep.add_flops == 56 * nd
    assert rep.rotation_flops == 2 * nd * 1536 * 56
    assert rep.anchor_flops == 7 * nd * 56
    assert rep.origin_copy_bytes == 2 * nd
    assert rep.total_flops == rep.add_flops + rep.anchor_flops + rep.rotation_flops
    d = rep.to_dict()["per_target_block"]["flops"]
    assert d["total"] == d["plain_add"] + d["anchoring"] + d["rotation"]


def test_cost_plain_add_same_order_as_reported():
    assert 1 / 3 < estimate_cost(512, 1536, 56).add_flops / 3.28e7 < 3


def test_cost_switches_off():
    p = ReinjectionPlan(0, (1,), anchor_enabled=False, rotation_enabled=False)
    rep = estimate_cost(16, 8, 2, p)
    assert rep.anchor_flops == rep.rotation_flops == 0
    assert rep.rotation_matrix_bytes == 0
    with pytest.raises(InvalidInput):
        estimate_cost(0, 8, 1)


def test_cost_summary_prints_assumptions():
    text = estimate_cost(512, 1536, 56).summary()
    assert "n=512" in text and "d=1536" in text and "applications=56" in text


from hypothesis import given, settings, strategies as st


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 2.0), st.booleans())
def test_statistics_restored_property(seed, w, rotate):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(2, 12), rng.integers(2, 12)
    t_ori = rng.standard_normal((n, d)) * rng.uniform(0.01, 50)
    t_tgt = rng.standard_normal((n, d)) * rng.uniform(0.01, 50) + rng.uniform(-10, 10)
    r = random_orthogonal(rng, d) if rotate else None
    out = anchored_inject(t_ori, t_tgt, plan(w, rotation=rotate), r)
    a, b = token_stats(out), token_stats(t_tgt)
    scale = max(1.0, np.abs(t_tgt).max())
    assert np.max(np.abs(a.mean - b.mean)) <= 1e-8 * scale
    assert np.max(np.abs(a.std - b.std)) <= 1e-8 * scale
