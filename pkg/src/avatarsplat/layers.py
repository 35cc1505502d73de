"""Style-modulated convolution building blocks shared by both generators."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ModulatedConv2d(nn.Module):
    """Convolution whose input channels are scaled per sample by a style vector.

    With ``demodulate=True`` each output filter is renormalised to unit norm
    after modulation, as in StyleGAN2.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, demodulate: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.demodulate = demodulate
        self.weight = nn.Parameter(
            torch.randn(out_channels, in_channels, kernel_size, kernel_size) / math.sqrt(in_channels * kernel_size**2)
        )
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        B, _, H, W = x.shape
        w = self.weight[None] * style[:, None, :, None, None]
        if self.demodulate:
            w = w * torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4), keepdim=True) + 1e-8)
        w = w.reshape(B * self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        out = F.conv2d(x.reshape(1, B * self.in_channels, H, W), w, padding=self.kernel_size // 2, groups=B)
        return out.reshape(B, self.out_channels, H, W) + self.bias[None, :, None, None]


class StyleAffine(nn.Linear):
    """Latent-to-style affine map; bias starts at one so styles start near identity."""

    def __init__(self, latent_dim: int, channels: int):
        super().__init__(latent_dim, channels)
        nn.init.normal_(self.weight, std=1.0 / math.sqrt(latent_dim))
        nn.init.ones_(self.bias)


def mlp(sizes: list[int], act=nn.LeakyReLU, final_act: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if final_act or i < len(sizes) - 2:
            layers.append(act(0.2) if act is nn.LeakyReLU else act())
    return nn.Sequential(*layers)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
