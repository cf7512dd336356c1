import pytest
import torch
import torch.nn as nn

from zoomsr.imaging import pixel_unshuffle, resize_bicubic_t
from zoomsr.restoration import ResBlock, Restorer


def inputs(n=1, h=8, w=8, c=8, r_t=4, r_w=2, gen_seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(gen_seed)
    lr = torch.rand(n, 3, h, w, generator=g, dtype=dtype)
    return dict(
        lr_img=lr,
        lr_feat=torch.randn(n, c, h, w, generator=g, dtype=dtype),
        ref_t_feat=torch.randn(n, 3 * r_t * r_t, h, w, generator=g, dtype=dtype),
        ref_w_feat=torch.randn(n, 3 * r_w * r_w, h, w, generator=g, dtype=dtype),
        ref_img=torch.rand(n, 3, h, w, generator=g, dtype=dtype),
        lr_center=lr[..., h // 2 - h // 8:h // 2 + h // 8, w // 2 - w // 8:w // 2 + w // 8],
    )


def randomize_tail(net, seed=0):
    torch.manual_seed(seed)
    nn.init.normal_(net.tail.weight, std=0.05)
    nn.init.normal_(net.tail.bias, std=0.01)


@pytest.mark.parametrize("mode", ["dzsr", "tzsr", "rw_only"])
@pytest.mark.parametrize("hw", [(8, 8), (12, 16), (16, 8)])
def test_output_dims(mode, hw):
    torch.manual_seed(0)
    net = Restorer(8, 4, mode=mode)
    x = inputs(2, *hw)
    assert net(**x).shape == (2, 3, 4 * hw[0], 4 * hw[1])


def test_zero_tail_returns_bicubic_base():
    torch.manual_seed(0)
    net = Restorer(8, 4)
    x = inputs()
    y = net(**x)
    assert torch.isfinite(y).all()
    torch.testing.assert_close(y, resize_bicubic_t(x["lr_img"], scale=4), rtol=0, atol=0)


def test_ones_scales_equal_unmodulated_blocks():
    torch.manual_seed(0)
    block = ResBlock(6)
    x = torch.randn(2, 6, 5, 5)
    torch.testing.assert_close(block(x, torch.ones(2, 6)), block(x), rtol=0, atol=0)

    net = Restorer(8, 3)
    randomize_tail(net)
    x = inputs()
    ones = [torch.ones(1, 8)] * 3
    y = net(**x, scales=ones)
    # same network with the modulation stripped out
    ft = net.adapt_t(x["ref_t_feat"])
    h = net.head(torch.cat([x["lr_feat"], ft], dim=1))
    z = h
    for b in net.blocks:
        z = b(z)
    z = net.body_tail(z) + h
    expect = resize_bicubic_t(x["lr_img"], scale=4) + net.tail(net.up(z))
    torch.testing.assert_close(y, expect)


def test_modulation_vectors_shape_and_range():
    torch.manual_seed(0)
    net = Restorer(8, 5)
    nn.init.normal_(net.encoder.mlp[-1].weight, std=3.0)
    x = inputs(3)
    fused = torch.randn(3, 8, 8, 8)
    v = net.modulation_vectors(fused, x["ref_img"], x["lr_center"])
    assert len(v) == 5
    for s in v:
        assert s.shape == (3, 8)
        assert ((s > 0) & (s < 2)).all()


def test_color_gain_changes_modulation():
    torch.manual_seed(0)
    net = Restorer(8, 4)
    nn.init.normal_(net.encoder.mlp[-1].weight, std=0.5)
    x = inputs()
    fused = torch.randn(1, 8, 8, 8)
    gains = torch.ones(3, requires_grad=True)
    v = net.modulation_vectors(fused, x["ref_img"] * gains[None, :, None, None], x["lr_center"])
    jac = torch.autograd.grad(torch.stack(v).sum(), gains)[0]
    assert jac.abs().max() > 1e-6
    bumped = net.modulation_vectors(fused, x["ref_img"] * torch.tensor([1.1, 1.0, 0.9])[None, :, None, None],
                                    x["lr_center"])
    assert max((a - b).abs().max() for a, b in zip(v, bumped)) > 0


def test_zero_init_gives_unit_scales():
    net = Restorer(8, 4)
    x = inputs()
    for s in net.modulation_vectors(torch.randn(1, 8, 8, 8), x["ref_img"], x["lr_center"]):
        torch.testing.assert_close(s, torch.ones_like(s))


@pytest.mark.parametrize("fusion", ["w_then_t", "t_then_w", "concat"])
def test_tzsr_with_zeroed_wide_reference(fusion):
    torch.manual_seed(0)
    net = Restorer(8, 4, mode="tzsr", fusion=fusion)
    randomize_tail(net)
    x = inputs()
    x["ref_w_feat"] = torch.zeros_like(x["ref_w_feat"])
    y = net(**x)
    assert torch.isfinite(y).all()
    yc = y.clamp(0, 1)
    assert yc.min() >= 0 and yc.max() <= 1


def test_fusion_orders_differ():
    x = inputs()
    outs = []
    for fusion in ("w_then_t", "t_then_w"):
        torch.manual_seed(0)
        net = Restorer(8, 4, mode="tzsr", fusion=fusion)
        randomize_tail(net)
        outs.append(net(**x))
    assert not torch.allclose(outs[0], outs[1])


def test_progressive_merge_layer_only_when_sequential():
    assert Restorer(8, 4, mode="tzsr").merge is not None
    assert Restorer(8, 4, mode="tzsr", fusion="concat").merge is None
    assert Restorer(8, 4, mode="dzsr").merge is None


def test_translation_consistency():
    torch.manual_seed(0)
    net = Restorer(8, 3)
    randomize_tail(net)
    x = inputs(h=32, w=32)
    scales = [torch.rand(1, 8) + 0.5 for _ in range(3)]
    y = net(**x, scales=scales)
    shifted = {k: (torch.roll(v, 1, dims=-1) if k not in ("ref_img", "lr_center") else v) for k, v in x.items()}
    ys = net(**shifted, scales=scales)
    r, m = 4, 48
    assert y[..., m:-m, m:-m].numel() > 0
    torch.testing.assert_close(ys[..., m:-m, m + r:-m + r], y[..., m:-m, m:-m], atol=1e-5, rtol=0)


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    net = Restorer(4, 3, mode="tzsr").double()
    randomize_tail(net)
    nn.init.normal_(net.encoder.mlp[-1].weight, std=0.2)
    x = inputs(c=4, dtype=torch.float64)
    params = [p for p in net.parameters()]
    for p in params:
        p.grad = None
    net(**x).pow(2).mean().backward()
    g = torch.Generator().manual_seed(3)
    dirs = [torch.randn(p.shape, generator=g, dtype=torch.float64) for p in params]
    analytic = sum((p.grad * d).sum() for p, d in zip(params, dirs)).item()
    eps = 1e-6

    def at(sign):
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(sign * eps * d)
            v = net(**x).pow(2).mean().item()
            for p, d in zip(params, dirs):
                p.sub_(sign * eps * d)
        return v

    numeric = (at(1) - at(-1)) / (2 * eps)
    assert abs(numeric - analytic) <= 1e-3 * abs(analytic)


def test_constructor_rejects_bad_options():
    with pytest.raises(ValueError):
        Restorer(8, 4, mode="bogus")
    with pytest.raises(ValueError):
        Restorer(8, 4, fusion="bogus")
    with pytest.raises(ValueError):
        Restorer(8, 4, r_t=3)


def test_shape_mismatch_raises():
    net = Restorer(8, 2)
    x = inputs()
    x["ref_t_feat"] = x["ref_t_feat"][..., :6]
    with pytest.raises(RuntimeError):
        net(**x)


def test_sixteen_blocks_by_default():
    assert len(Restorer().blocks) == 16


def test_unshuffled_reference_channels():
    ref = torch.rand(1, 3, 32, 32)
    net = Restorer(8, 2)
    assert net.adapt_t[0].in_channels == pixel_unshuffle(ref, 4).shape[1]
