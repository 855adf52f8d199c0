"""Low-level network building blocks.

Everything here is shape-agnostic over batch and spatial dims and works in
float64 as well as float32 so finite-difference checks can run the real
modules, not copies.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigError


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-wise unit normalization of [B, D] vectors."""
    return x / x.norm(p=2, dim=1, keepdim=True).clamp_min(eps)


class FilterResponseNorm(nn.Module):
    """Normalize each channel by the root mean square of its spatial
    activations, then apply a learned per-channel affine.

    No batch statistics are involved, so train/eval behavior is identical
    and batch size 1 works.
    """

    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(1, num_channels, 1, 1))
        self.beta = nn.Parameter(torch.zeros(1, num_channels, 1, 1))
        self.register_buffer("eps", torch.tensor(float(eps)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        nu2 = x.pow(2).mean(dim=[2, 3], keepdim=True)
        y = x * torch.rsqrt(nu2 + self.eps)
        return self.gamma * y + self.beta

    def extra_repr(self) -> str:
        return f"channels={self.gamma.shape[1]}, eps={self.eps.item():g}"


class ThresholdedLinearUnit(nn.Module):
    """Elementwise max against a learned per-channel threshold.

    With the threshold at its zero init this is ReLU; training can lower or
    raise the floor per channel. Works on [B, C] vectors and [B, C, H, W]
    maps alike.
    """

    def __init__(self, num_channels: int):
        super().__init__()
        self.tau = nn.Parameter(torch.zeros(num_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = (1, -1) + (1,) * (x.dim() - 2)
        return torch.max(x, self.tau.view(shape))


class EfficientChannelAttention(nn.Module):
    """Channel gate from a 1-D convolution over the channel axis of the
    globally pooled response. Cheap (k weights) and preserves shape.
    """

    def __init__(self, num_channels: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"attention kernel_size must be odd and >= 1, got {kernel_size}")
        self.conv = nn.Conv1d(1, 1, kernel_size, padding=kernel_size // 2, bias=False)
        self.num_channels = num_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=[2, 3])  # [B, C]
        gate = torch.sigmoid(self.conv(pooled.unsqueeze(1)).squeeze(1))
        return x * gate[:, :, None, None]

    def extra_repr(self) -> str:
        return f"channels={self.num_channels}"


class ConvBlock(nn.Module):
    """3x3 conv (no bias) -> spatial RMS norm -> learned-threshold activation."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.norm = FilterResponseNorm(out_channels)
        self.act = ThresholdedLinearUnit(out_channels)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class DescriptorHead(nn.Module):
    """Collapse an [B, C, 8, 8] feature map into a unit-length descriptor.

    A full-support valid conv (one weight per input cell per output dim)
    plays the role of a positional fully connected layer; the output is
    L2-normalized so descriptor distances live on the unit sphere.
    """

    def __init__(self, in_channels: int, descriptor_dim: int):
        super().__init__()
        if descriptor_dim < 1:
            raise ConfigError(f"descriptor_dim must be positive, got {descriptor_dim}")
        self.conv = nn.Conv2d(in_channels, descriptor_dim, 8, bias=False)
        self.descriptor_dim = descriptor_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (8, 8):
            raise ConfigError(
                f"descriptor head expects an 8x8 feature map, got {tuple(x.shape[-2:])}"
            )
        return l2_normalize(self.conv(x).flatten(1))

    def extra_repr(self) -> str:
        return f"dim={self.descriptor_dim}"


class MetricClassifier(nn.Module):
    """Match/no-match head over the absolute difference of two feature maps.

    Three fully connected layers narrowing to a single logit; call
    :meth:`forward` with the already-flattened |difference| vector.
    """

    def __init__(self, in_features: int, hidden: tuple[int, int] = (512, 256)):
        super().__init__()
        h1, h2 = hidden
        self.fc = nn.Sequential(
            nn.Linear(in_features, h1),
            ThresholdedLinearUnit(h1),
            nn.Linear(h1, h2),
            ThresholdedLinearUnit(h2),
            nn.Linear(h2, 1),
        )
        self.in_features = in_features

    def forward(self, diff: torch.Tensor) -> torch.Tensor:
        """diff: [B, in_features] -> logits [B]."""
        return self.fc(diff).squeeze(1)

    def score_maps(self, fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
        """Convenience: logits from two [B, C, H, W] feature maps."""
        return self.forward((fa - fb).abs().flatten(1))
