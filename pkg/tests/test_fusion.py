from fractions import Fraction

import pytest
import torch

from rsktseg.fusion import (
    Aggregator,
    CETLayer,
    ClassReduce,
    ConfigurationError,
    CrossAttention,
    FusionConfig,
    SelfAttention,
    SETLayer,
    SpatialReduce,
    attention_flops,
    reduction_ratio,
)
from rsktseg.training import gradient_check


def _identity_conv(sr: SpatialReduce, d):
    with torch.no_grad():
        sr.conv.weight.zero_()
        sr.conv.bias.zero_()
        for c in range(d):
            sr.conv.weight[c, c, 0, 0] = 1.0


def test_spatial_reduce_identity_at_r1():
    d, g = 6, 4
    sr = SpatialReduce(d, g, d, r1=1)
    _identity_conv(sr, d)
    cost = torch.randn(4, 4, 3, d)
    out = sr(cost, torch.randn(4, 4, g), torch.randn(4, 4, g))
    assert torch.allclose(out, cost, atol=1e-6)


def test_spatial_reduce_shape_and_constant_average():
    d, g = 3, 2
    sr = SpatialReduce(d, g, 1, r1=2)
    assert sr(torch.randn(8, 8, 2, d), torch.randn(8, 8, g), torch.randn(8, 8, g)).shape == (4, 4, 2, 1)
    with torch.no_grad():
        sr.conv.weight.fill_(0.0)
        sr.conv.weight[0, :d] = 1.0 / 4  # averaging kernel over the cost channels
        sr.conv.bias.zero_()
    cost = torch.full((8, 8, 2, d), 0.7)
    out = sr(cost, torch.randn(8, 8, g), torch.randn(8, 8, g))
    # oracle: a 2x2 window average of a constant is the constant, summed over d channels
    assert torch.allclose(out, torch.full_like(out, 0.7 * d), atol=1e-6)
    with pytest.raises(ConfigurationError):
        sr(torch.randn(7, 7, 2, d), torch.randn(7, 7, g), torch.randn(7, 7, g))


def test_set_layer_contracts():
    torch.manual_seed(0)
    layer = SETLayer(8, 2, positional_embedding=True)
    cost, reduced = torch.randn(4, 4, 3, 8), torch.randn(2, 2, 3, 8)
    out, probs = layer(cost, reduced, return_weights=True)
    assert out.shape == cost.shape
    assert probs.shape == (3, 2, 16, 4)
    assert torch.allclose(probs.sum(-1), torch.ones(3, 2, 16), atol=1e-6)


def test_set_layer_class_axis_is_batch_axis():
    torch.manual_seed(0)
    layer = SETLayer(8, 2, positional_embedding=False)
    cost, reduced = torch.randn(4, 4, 3, 8), torch.randn(2, 2, 3, 8)
    perm = torch.tensor([1, 2, 0])
    assert torch.allclose(layer(cost, reduced)[:, :, perm], layer(cost[:, :, perm], reduced[:, :, perm]), atol=1e-6)


def test_set_layer_head_divisibility():
    with pytest.raises(ConfigurationError):
        SETLayer(10, 3)


def test_cross_attention_with_shared_input_equals_self_attention(f64):
    torch.manual_seed(1)
    cross = CrossAttention(12, 3)
    self_attn = SelfAttention.from_cross(cross)
    x = torch.randn(5, 7, 12)
    a, pa = cross(x, x, x, return_weights=True)
    b, pb = self_attn(x, return_weights=True)
    assert torch.allclose(a, b, atol=1e-6)
    assert torch.allclose(pa, pb, atol=1e-6)


def test_class_reduce_identity_shape_and_constant():
    d, t = 4, 3
    cr = ClassReduce(d, t, r2=1)
    with torch.no_grad():
        cr.proj.weight.zero_()
        cr.proj.weight[:, :d] = torch.eye(d)
        cr.proj.bias.zero_()
    cost = torch.randn(4, 4, 2, d)
    assert torch.allclose(cr(cost, torch.randn(2, t)), cost, atol=1e-6)

    cr2 = ClassReduce(d, t, r2=2)
    assert cr2(torch.randn(8, 8, 2, d), torch.randn(2, t)).shape == (4, 4, 2, d)
    cr2.load_state_dict(cr.state_dict())
    const = torch.full((8, 8, 2, d), -0.25)
    assert torch.allclose(cr2(const, torch.randn(2, t)), torch.full((4, 4, 2, d), -0.25), atol=1e-6)


def test_cet_layer_contracts():
    torch.manual_seed(2)
    cet = CETLayer(8, 2)
    reduced, skip = torch.randn(2, 2, 4, 8), torch.randn(4, 4, 4, 8)
    out, probs = cet(reduced, skip, return_weights=True)
    assert out.shape == (4, 4, 4, 8)
    assert torch.allclose(probs.sum(-1), torch.ones_like(probs.sum(-1)), atol=1e-6)
    perm = torch.tensor([3, 1, 0, 2])
    assert torch.allclose(cet(reduced[:, :, perm], skip[:, :, perm]), out[:, :, perm], atol=1e-6)


def _inputs(N=3, H=4, C=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    dt = torch.get_default_dtype()
    return (
        torch.randn(H, H, N, C, generator=g, dtype=dt),
        torch.randn(H, H, C, generator=g, dtype=dt),
        torch.randn(H, H, C, generator=g, dtype=dt),
        torch.randn(N, C, generator=g, dtype=dt),
    )


def test_aggregate_zero_layers_is_input_projection():
    agg = Aggregator(FusionConfig(num_layers=0, d_c=16, heads=2), in_dim=8, guide_dim=8, text_dim=8)
    cost, cm, dm, txt = _inputs()
    assert torch.allclose(agg(cost, cm, dm, txt), agg.input_proj(cost))


def test_aggregate_two_layers_shape():
    agg = Aggregator(FusionConfig(num_layers=2, d_c=16, heads=2), in_dim=8, guide_dim=8, text_dim=8)
    assert agg(*_inputs()).shape == (4, 4, 3, 16)


def test_aggregate_class_permutation_equivariance(f64):
    torch.manual_seed(3)
    agg = Aggregator(FusionConfig(num_layers=2, d_c=16, heads=2, positional_embedding=True), 8, 8, 8)
    cost, cm, dm, txt = _inputs(N=4)
    perm = torch.tensor([2, 3, 0, 1])
    a = agg(cost, cm, dm, txt)[:, :, perm]
    b = agg(cost[:, :, perm], cm, dm, txt[perm])
    assert torch.allclose(a, b, rtol=1e-5, atol=1e-10)


@pytest.mark.parametrize("n", range(7))
def test_aggregate_finite_for_all_layer_counts(n):
    torch.manual_seed(n)
    agg = Aggregator(FusionConfig(num_layers=n, d_c=16, heads=2), 8, 8, 8)
    assert torch.isfinite(agg(*_inputs(seed=n))).all()


def test_aggregate_gradients_match_finite_differences(f64):
    torch.manual_seed(4)
    agg = Aggregator(FusionConfig(num_layers=1, d_c=8, heads=2), 8, 8, 8)
    cost, cm, dm, txt = _inputs(N=2)
    target = torch.randn(4, 4, 2, 8)
    report = gradient_check(agg, lambda: ((agg(cost, cm, dm, txt) - target) ** 2).mean(), num_coords=60, step=1e-5)
    assert len(report.entries) == 60
    assert report.max_rel_error < 1e-3


def test_config_validation():
    with pytest.raises(ConfigurationError):
        FusionConfig(d_c=10, heads=4).validate()
    with pytest.raises(ConfigurationError):
        FusionConfig(r1=3).validate(4, 4)
    FusionConfig().validate(4, 4)


def test_attention_flops_definition_and_errors():
    assert attention_flops(16, 4, 128) == 2 * 16 * 4 * 128
    for bad in [(0, 1, 1), (1, -1, 1), (1, 1, 0)]:
        with pytest.raises(ValueError):
            attention_flops(*bad)


@pytest.mark.parametrize("r, both, kv", [(1, Fraction(1), Fraction(1)), (2, Fraction(1, 16), Fraction(1, 4)), (4, Fraction(1, 256), Fraction(1, 16))])
def test_reduction_ratio_readings(r, both, kv):
    assert reduction_ratio(16, 16, 64, r, "both") == both
    assert reduction_ratio(16, 16, 64, r, "kv") == kv
