import numpy as np
import pytest
import torch

from kglnet.blocks import (
    ConvBlock,
    DescriptorHead,
    EfficientChannelAttention,
    FilterResponseNorm,
    MetricClassifier,
    ThresholdedLinearUnit,
    l2_normalize,
)
from kglnet.errors import ConfigError

torch.set_num_threads(1)


def test_frn_hand_computed():
    frn = FilterResponseNorm(1, eps=0.0)
    x = torch.tensor([[[[3.0, 4.0]]]])
    # nu^2 = (9 + 16) / 2 = 12.5; x / sqrt(12.5)
    out = frn(x)
    expect = torch.tensor([[[[3.0, 4.0]]]]) / 12.5**0.5
    assert torch.allclose(out, expect, atol=1e-7)
    assert abs(out[0, 0, 0, 0].item() - 0.8485281) < 1e-6
    assert abs(out[0, 0, 0, 1].item() - 1.1313708) < 1e-6


def test_frn_affine_and_eps():
    frn = FilterResponseNorm(2, eps=1e-6)
    with torch.no_grad():
        frn.gamma.fill_(2.0)
        frn.beta.fill_(-1.0)
    x = torch.zeros(1, 2, 4, 4)
    # zero input: normalized value is 0, so the output is just beta
    assert torch.allclose(frn(x), torch.full((1, 2, 4, 4), -1.0))
    assert frn.eps.item() == pytest.approx(1e-6)
    # eps is a buffer, not a parameter
    assert "eps" in dict(frn.named_buffers())
    assert all(n != "eps" for n, _ in frn.named_parameters())


def test_frn_per_channel_independence():
    frn = FilterResponseNorm(2, eps=0.0)
    x = torch.randn(3, 2, 5, 5, generator=torch.Generator().manual_seed(0))
    out = frn(x)
    for c in range(2):
        rms = x[:, c].pow(2).mean(dim=[1, 2], keepdim=True).sqrt()
        assert torch.allclose(out[:, c], x[:, c] / rms, atol=1e-6)


def test_tlu_zero_init_is_relu():
    tlu = ThresholdedLinearUnit(3)
    x = torch.randn(4, 3, 6, 6, generator=torch.Generator().manual_seed(1))
    assert torch.equal(tlu(x), torch.relu(x))


def test_tlu_learned_threshold_per_channel():
    tlu = ThresholdedLinearUnit(2)
    with torch.no_grad():
        tlu.tau.copy_(torch.tensor([1.0, -1.0]))
    x = torch.tensor([[[[0.5]], [[-2.0]]]])
    out = tlu(x)
    assert out[0, 0, 0, 0].item() == 1.0  # floored up to tau=1
    assert out[0, 1, 0, 0].item() == -1.0  # floored at tau=-1


def test_tlu_vector_input():
    tlu = ThresholdedLinearUnit(4)
    with torch.no_grad():
        tlu.tau.copy_(torch.tensor([0.0, 1.0, -1.0, 2.0]))
    x = torch.tensor([[5.0, 0.0, -3.0, 0.0]])
    assert torch.equal(tlu(x), torch.tensor([[5.0, 1.0, -1.0, 2.0]]))


def test_eca_hand_computed_gate():
    eca = EfficientChannelAttention(3, kernel_size=3)
    with torch.no_grad():
        eca.conv.weight.copy_(torch.tensor([[[0.0, 1.0, 0.0]]]))
    # identity kernel: gate_c = sigmoid(mean_c)
    x = torch.stack(
        [torch.full((4, 4), 1.0), torch.full((4, 4), -1.0), torch.full((4, 4), 0.0)]
    ).unsqueeze(0)
    out = eca(x)
    gates = torch.sigmoid(torch.tensor([1.0, -1.0, 0.0]))
    for c in range(3):
        assert torch.allclose(out[0, c], x[0, c] * gates[c], atol=1e-7)


def test_eca_neighbor_mixing():
    eca = EfficientChannelAttention(3, kernel_size=3)
    with torch.no_grad():
        eca.conv.weight.copy_(torch.tensor([[[1.0, 0.0, 0.0]]]))
    x = torch.zeros(1, 3, 2, 2)
    x[0, 0] = 4.0
    out = eca(x)
    # conv taps (prev, self, next) along channels with zero padding; weight
    # [1,0,0] makes gate_c = sigmoid(mean of channel c-1), so channel 0 sees
    # the zero pad and gets gate 0.5
    assert torch.allclose(out[0, 0], torch.full((2, 2), 4.0 * 0.5))
    assert torch.equal(out[0, 1], torch.zeros(2, 2))
    assert torch.equal(out[0, 2], torch.zeros(2, 2))


def test_eca_rejects_even_kernel():
    with pytest.raises(ConfigError):
        EfficientChannelAttention(8, kernel_size=2)
    with pytest.raises(ConfigError):
        EfficientChannelAttention(8, kernel_size=0)


def test_eca_preserves_shape_and_bounds():
    eca = EfficientChannelAttention(16)
    x = torch.randn(2, 16, 8, 8, generator=torch.Generator().manual_seed(3))
    out = eca(x)
    assert out.shape == x.shape
    # gate in (0, 1), so magnitudes can only shrink
    assert (out.abs() <= x.abs() + 1e-7).all()


def test_conv_block_shapes():
    blk = ConvBlock(1, 32, stride=1)
    assert blk(torch.zeros(2, 1, 64, 64)).shape == (2, 32, 64, 64)
    blk2 = ConvBlock(32, 64, stride=2)
    assert blk2(torch.zeros(2, 32, 64, 64)).shape == (2, 64, 32, 32)
    assert blk.conv.bias is None


def test_descriptor_head_unit_norm():
    for dim in (64, 128, 256):
        head = DescriptorHead(128, dim)
        x = torch.randn(5, 128, 8, 8, generator=torch.Generator().manual_seed(dim))
        d = head(x)
        assert d.shape == (5, dim)
        assert torch.allclose(d.norm(dim=1), torch.ones(5), atol=1e-5)


def test_descriptor_head_rejects_wrong_spatial():
    head = DescriptorHead(8, 64)
    with pytest.raises(ConfigError):
        head(torch.zeros(1, 8, 16, 16))


def test_descriptor_head_rejects_bad_dim():
    with pytest.raises(ConfigError):
        DescriptorHead(8, 0)


def test_metric_classifier_shapes_and_score_maps():
    clf = MetricClassifier(128 * 64)
    fa = torch.randn(3, 128, 8, 8, generator=torch.Generator().manual_seed(7))
    fb = torch.randn(3, 128, 8, 8, generator=torch.Generator().manual_seed(8))
    logits = clf.score_maps(fa, fb)
    assert logits.shape == (3,)
    direct = clf((fa - fb).abs().flatten(1))
    assert torch.equal(logits, direct)


def test_metric_classifier_symmetric_in_inputs():
    clf = MetricClassifier(4 * 64)
    fa = torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(9))
    fb = torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(10))
    assert torch.allclose(clf.score_maps(fa, fb), clf.score_maps(fb, fa), atol=1e-6)


def test_l2_normalize_zero_vector_is_safe():
    x = torch.zeros(2, 8)
    out = l2_normalize(x)
    assert torch.isfinite(out).all()
    assert torch.equal(out, torch.zeros(2, 8))


@pytest.mark.parametrize(
    "factory,shape",
    [
        (lambda: FilterResponseNorm(3), (2, 3, 5, 5)),
        (lambda: EfficientChannelAttention(6), (2, 6, 4, 4)),
        (lambda: DescriptorHead(4, 16), (2, 4, 8, 8)),
        (lambda: MetricClassifier(4 * 64), (2, 4 * 64)),
    ],
)
def test_gradcheck_double(factory, shape):
    mod = factory().double()
    x = torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(11))
    x.requires_grad_(True)
    assert torch.autograd.gradcheck(mod, (x,), eps=1e-6, atol=1e-4)


def test_gradcheck_tlu_away_from_kinks():
    tlu = ThresholdedLinearUnit(3).double()
    g = torch.Generator().manual_seed(12)
    x = torch.randn(4, 3, 2, 2, dtype=torch.float64, generator=g)
    # keep every element well clear of the max() kink at tau=0
    x = torch.where(x.abs() < 0.1, x + 0.5, x).requires_grad_(True)
    assert torch.autograd.gradcheck(tlu, (x,), eps=1e-6, atol=1e-4)
