import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluff import block, gradcheck, ops
from fluff.block import FluffConfig, FluffParams, fluff_backward, fluff_forward, init_fluff_params, make_variant


def _rng(seed=0):
    return np.random.default_rng(seed)


@pytest.mark.parametrize("l, expected", [(0, [1, 2, 3, 6]), (1, [1, 3, 4, 8]), (2, [2, 3, 5, 9]), (3, [2, 4, 5, 11])])
def test_rate_schedule_table(l, expected):
    assert block.rate_schedule([1, 2, 3, 6], l) == expected


def test_rate_schedule_rounds_half_away_from_zero():
    # 1.25 * 2 = 2.5 -> 3 and 1.25 * 6 = 7.5 -> 8, both exact halves
    assert block.rate_schedule([2, 6], 1) == [3, 8]
    assert block.rate_schedule([1], 0) == [1]
    with pytest.raises(ValueError):
        block.rate_schedule([0, 1], 1)
    with pytest.raises(ValueError):
        block.rate_schedule([1], -1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=1, max_size=6), st.integers(0, 20))
def test_rate_schedule_matches_decimal_rounding(rates, l):
    from decimal import ROUND_HALF_UP, Decimal
    want = [max(1, int(((Decimal(1) + Decimal("0.25") * l) * r).quantize(Decimal(1), ROUND_HALF_UP))) for r in rates]
    assert block.rate_schedule(rates, l) == want


def test_config_defaults_and_validation():
    cfg = FluffConfig(c_pre=256)
    assert cfg.c_out == 256 and cfg.levels == 3 and cfg.branches == 4
    assert cfg.rates == ((1, 2, 3, 6),) * 3
    assert cfg.concat_channels == 768
    with pytest.raises(ValueError, match="divisible"):
        FluffConfig(c_pre=10)
    with pytest.raises(ValueError):
        FluffConfig(c_pre=8, rates=((1, 2, 3, 6),) * 2)
    with pytest.raises(ValueError):
        FluffConfig(c_pre=8, rates=((1, 2, 0, 6),) * 3)
    with pytest.raises(ValueError):
        FluffConfig(c_pre=8, fusion_kind="deformable")
    with pytest.raises(ValueError):
        FluffConfig(c_pre=8, c_out=4, identity_shortcut=True)


def test_config_dict_round_trip():
    cfg = FluffConfig(c_pre=8, c_out=6, levels=2, branches=2, rates=((1, 3), (2, 5)), fusion_kind="avg_pool")
    assert FluffConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        FluffConfig.from_dict({**cfg.to_dict(), "extra": 1})


@pytest.mark.parametrize("c_pre", [8, 64, 256])
def test_concat_has_three_c_pre_channels_and_size_is_kept(c_pre):
    cfg = FluffConfig(c_pre=c_pre, levels=3, branches=4)
    params = init_fluff_params(cfg, _rng())
    x = _rng(1).standard_normal((1, c_pre, 9, 9)).astype(np.float32)
    cache = {}
    out = fluff_forward(x, cfg, params, cache)
    assert cache["concat"].shape == (1, 3 * c_pre, 9, 9)
    assert out.shape == (1, c_pre, 9, 9)


def test_output_shape_with_distinct_c_out():
    cfg = FluffConfig(c_pre=16, c_out=10)
    out = fluff_forward(np.ones((2, 16, 7, 5), np.float32), cfg, init_fluff_params(cfg, _rng()))
    assert out.shape == (2, 10, 7, 5)


def test_zero_network_outputs_zero():
    cfg = FluffConfig(c_pre=8)
    params = init_fluff_params(cfg, _rng())
    for arr in params.named().values():
        arr[...] = 0
    out = fluff_forward(_rng(2).standard_normal((1, 8, 6, 6)).astype(np.float32), cfg, params)
    assert not np.any(out)


def test_structural_collapse_to_single_conv():
    rng = _rng(3)
    c = 3
    cfg = FluffConfig(c_pre=c, c_out=c, levels=1, branches=1, rates=((1,),))
    params = init_fluff_params(cfg, rng)
    eye = np.eye(c, dtype=np.float32)[:, :, None, None]
    params.entry[0].weight[...] = eye
    params.output.weight[...] = eye
    params.shortcut.weight[...] = 0
    cell = params.cells[0][0]
    cell.bias[...] = rng.standard_normal(c)
    x = rng.standard_normal((2, c, 6, 6)).astype(np.float32)
    # output = relu(conv1x1_I(relu(cell(x)))) + 0 then relu; all identity maps
    want = ops.relu_forward(ops.conv2d_forward(x, cell))
    np.testing.assert_allclose(fluff_forward(x, cfg, params), want, atol=1e-6)


def test_identity_shortcut_adds_input():
    cfg = FluffConfig(c_pre=4, identity_shortcut=True)
    params = init_fluff_params(cfg, _rng())
    assert params.shortcut is None
    params.output.weight[...] = 0
    x = np.abs(_rng(4).standard_normal((1, 4, 5, 5))).astype(np.float32)
    np.testing.assert_allclose(fluff_forward(x, cfg, params), x, atol=1e-7)


def test_forward_is_deterministic():
    cfg = FluffConfig(c_pre=8)
    params = init_fluff_params(cfg, _rng())
    x = _rng(5).standard_normal((2, 8, 7, 7)).astype(np.float32)
    assert fluff_forward(x, cfg, params).tobytes() == fluff_forward(x, cfg, params).tobytes()


def test_forward_follows_the_documented_recipe():
    rng = _rng(6)
    cfg = FluffConfig(c_pre=4, c_out=3, levels=2, branches=2, rates=((1, 2), (3, 1)))
    params = init_fluff_params(cfg, rng)
    for arr in params.named().values():
        if arr.ndim == 1:
            arr[...] = rng.standard_normal(arr.shape)
    x = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
    relu = lambda a: np.maximum(a, 0)
    recorded = {}
    for r in range(2):
        u = ops.conv2d_forward(x, params.entry[r])
        for l in range(2):
            u = ops.conv2d_forward(u if l == 0 else relu(u), params.cells[l][r])
            recorded[l, r] = u
    cat = np.concatenate([recorded[l, r] for l in range(2) for r in range(2)], axis=1)
    want = relu(ops.conv2d_forward(relu(cat), params.output) + ops.conv2d_forward(x, params.shortcut))
    np.testing.assert_allclose(fluff_forward(x, cfg, params), want, atol=1e-6)


def test_dnet_with_unit_rates_equals_cnet():
    rates = ((1, 1), (1, 1), (1, 1))
    base = FluffConfig(c_pre=4, levels=3, branches=2, rates=rates)
    dnet, cnet = make_variant(base, "DNet"), make_variant(base, "CNet")
    params = init_fluff_params(dnet, _rng(7))
    x = _rng(8).standard_normal((1, 4, 6, 6)).astype(np.float32)
    a = fluff_forward(x, dnet, params)
    b = fluff_forward(x, cnet, FluffParams.from_named(cnet, params.named()))
    assert a.tobytes() == b.tobytes()


def test_branch_permutation_equivariance():
    rng = _rng(9)
    cfg = FluffConfig(c_pre=6, c_out=5, levels=2, branches=3, rates=((1, 2, 3), (2, 3, 1)))
    params = init_fluff_params(cfg, rng)
    x = rng.standard_normal((1, 6, 7, 7)).astype(np.float32)
    perm = [2, 0, 1]
    pcfg = FluffConfig(c_pre=6, c_out=5, levels=2, branches=3,
                       rates=tuple(tuple(row[p] for p in perm) for row in cfg.rates))
    named = params.named()
    cb = cfg.branch_channels
    pn = {}
    for new, old in enumerate(perm):
        for kind in ("weight", "bias"):
            pn[f"entry.{new}.{kind}"] = named[f"entry.{old}.{kind}"]
            for l in range(2):
                pn[f"cell.{l}.{new}.{kind}"] = named[f"cell.{l}.{old}.{kind}"]
    cols = [named["output.weight"][:, (l * 3 + old) * cb:(l * 3 + old + 1) * cb] for l in range(2) for old in perm]
    pn["output.weight"] = np.concatenate(cols, axis=1)
    for k in ("output.bias", "shortcut.weight", "shortcut.bias"):
        pn[k] = named[k]
    a = fluff_forward(x, cfg, params)
    b = fluff_forward(x, pcfg, FluffParams.from_named(pcfg, pn))
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_make_variant_rows():
    base = FluffConfig(c_pre=8)
    assert make_variant(base, "SSD-baseline") is None
    a = make_variant(base, "ANet")
    assert a.branches == 1 and a.levels == 3 and a.fusion_kind == "plain_conv"
    b = make_variant(base, "BNet")
    assert b.levels == 1 and b.branches == 4 and b.fusion_kind == "plain_conv"
    c = make_variant(base, "CNet")
    assert c.multi_level and c.multi_branch and c.fusion_kind == "plain_conv" and not c.inter_level_relu
    d = make_variant(base, "DNet")
    assert d.fusion_kind == "dilated_conv" and not d.inter_level_relu
    f = make_variant(base, "Fluff")
    assert f.fusion_kind == "dilated_conv" and f.inter_level_relu
    assert make_variant(base, "CNet-maxpool").fusion_kind == "max_pool"
    assert make_variant(base, "CNet-avgpool").fusion_kind == "avg_pool"
    with pytest.raises(ValueError):
        make_variant(base, "ENet")


def test_plain_conv_ignores_rates():
    cfg = make_variant(FluffConfig(c_pre=8), "CNet")
    assert all(p.dilation == 1 and p.padding == 1 for row in init_fluff_params(cfg, _rng()).cells for p in row)


def test_params_check_rejects_wrong_shapes():
    cfg = FluffConfig(c_pre=8)
    named = dict(init_fluff_params(cfg, _rng()).named())
    named["output.weight"] = np.zeros((8, 10, 1, 1), np.float32)
    with pytest.raises(ValueError):
        FluffParams.from_named(cfg, named)


def test_channel_mismatch_raises():
    cfg = FluffConfig(c_pre=8)
    with pytest.raises(ValueError):
        fluff_forward(np.zeros((1, 4, 5, 5), np.float32), cfg, init_fluff_params(cfg, _rng()))


def test_zero_grad_out_gives_zero_gradients():
    cfg = FluffConfig(c_pre=8, levels=2, branches=2, rates=((1, 2), (2, 3)))
    params = init_fluff_params(cfg, _rng())
    x = _rng(1).standard_normal((1, 8, 6, 6)).astype(np.float32)
    gx, grads = fluff_backward(x, cfg, params, np.zeros((1, 8, 6, 6), np.float32))
    assert not np.any(gx)
    assert set(grads) == set(params.named())
    assert not any(np.any(g) for g in grads.values())


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backward_finite_differences_small_case(dtype):
    cfg = FluffConfig(c_pre=8, levels=2, branches=2, rates=((1, 2), (2, 1)))
    res = gradcheck.check_fluff(_rng(11), dtype, cfg=cfg, shape=(1, 6, 6))
    assert all(r.passed for r in res), [r.line() for r in res if not r.passed]


@pytest.mark.parametrize("row", ["ANet", "BNet", "CNet", "CNet-maxpool", "CNet-avgpool", "DNet", "Fluff"])
def test_every_variant_passes_finite_differences(row):
    cfg = make_variant(FluffConfig(c_pre=4, levels=2, branches=2, rates=((1, 2), (2, 3))), row)
    res = gradcheck.check_fluff(_rng(12), np.float64, cfg=cfg, shape=(1, 6, 6))
    assert all(r.passed for r in res), [r.line() for r in res if not r.passed]


def test_shortcut_path_isolation():
    rng = _rng(13)
    cfg = FluffConfig(c_pre=4, c_out=3, levels=2, branches=2, rates=((1, 2), (2, 1)))
    params = init_fluff_params(cfg, rng)
    params.output.weight[...] = 0  # freeze the main path
    params.output.bias[...] = 0
    params.shortcut.bias[...] = rng.standard_normal(3)
    x = rng.standard_normal((2, 4, 5, 5)).astype(np.float64)
    g = rng.standard_normal((2, 3, 5, 5))
    _, grads = fluff_backward(x, cfg, params, g)
    pre = ops.conv2d_forward(x, params.shortcut)
    _, gw, gb = ops.conv2d_backward(x, params.shortcut, ops.relu_backward(pre, g))
    np.testing.assert_allclose(grads["shortcut.weight"], gw, atol=1e-6)
    np.testing.assert_allclose(grads["shortcut.bias"], gb, atol=1e-6)


def test_backward_without_cache_matches_cached():
    cfg = FluffConfig(c_pre=4, levels=2, branches=2, rates=((1, 2), (2, 1)))
    params = init_fluff_params(cfg, _rng())
    x = _rng(1).standard_normal((1, 4, 5, 5)).astype(np.float32)
    g = _rng(2).standard_normal((1, 4, 5, 5)).astype(np.float32)
    cache = {}
    fluff_forward(x, cfg, params, cache)
    gx1, g1 = fluff_backward(x, cfg, params, g, cache)
    gx2, g2 = fluff_backward(x, cfg, params, g)
    np.testing.assert_array_equal(gx1, gx2)
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])
