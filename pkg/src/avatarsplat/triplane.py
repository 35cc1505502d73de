"""Temporal triplane feature field.

A small style-modulated CNN turns a per-frame latent into three axis-aligned
feature planes; a Gaussian's feature is the concatenation of bilinear lookups
of its normalised position on the XY, XZ and YZ planes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteLatent
from .layers import ModulatedConv2d, StyleAffine, mlp, upsample2x

PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ


@dataclass
class TriplaneSet:
    """Three feature planes stacked as (3, F_p, R, R) plus the world-space box they cover."""

    planes: torch.Tensor
    bounds_min: torch.Tensor
    bounds_max: torch.Tensor

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3 or self.planes.shape[2] != self.planes.shape[3]:
            raise ValueError(f"planes must be (3, F_p, R, R), got {tuple(self.planes.shape)}")
        if self.planes.shape[2] < 2 or self.planes.shape[1] < 1:
            raise ValueError("need R >= 2 and F_p >= 1")
        if not bool(torch.all(self.bounds_min < self.bounds_max)):
            raise ValueError("bounds_min must be < bounds_max componentwise")

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    @property
    def resolution(self) -> int:
        return self.planes.shape[2]


def bounds_from_points(points: torch.Tensor, dilation: float = 0.1) -> tuple[torch.Tensor, torch.Tensor]:
    """Axis-aligned bounding box of ``points`` grown by ``dilation`` of its extent on each side."""
    lo = points.detach().min(dim=0).values
    hi = points.detach().max(dim=0).values
    pad = (hi - lo).clamp_min(1e-6) * dilation
    return lo - pad, hi + pad


def project(positions: torch.Tensor, bounds_min: torch.Tensor, bounds_max: torch.Tensor) -> torch.Tensor:
    """Normalised, clamped plane coordinates, shape (M, 3, 2) in XY, XZ, YZ order."""
    unit = ((positions - bounds_min) / (bounds_max - bounds_min)).clamp(0.0, 1.0)
    return torch.stack([unit[..., list(ax)] for ax in PLANE_AXES], dim=-2)


def bilinear(plane: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample a (F_p, R, R) plane at (M, 2) coordinates in [0, 1]^2; grid nodes sit at k/(R-1)."""
    _, R, _ = plane.shape
    g = uv * (R - 1)
    i0 = g[:, 0].detach().floor().clamp(0, R - 2).long()
    j0 = g[:, 1].detach().floor().clamp(0, R - 2).long()
    fu = (g[:, 0] - i0.to(g.dtype))[:, None]
    fv = (g[:, 1] - j0.to(g.dtype))[:, None]
    flat = plane.reshape(plane.shape[0], R * R)

    def at(i, j):
        return flat[:, i * R + j].T

    return (
        at(i0, j0) * (1 - fu) * (1 - fv)
        + at(i0 + 1, j0) * fu * (1 - fv)
        + at(i0, j0 + 1) * (1 - fu) * fv
        + at(i0 + 1, j0 + 1) * fu * fv
    )


def query(triplane: TriplaneSet, positions: torch.Tensor) -> torch.Tensor:
    """Triplane features for (M, 3) positions, shape (M, 3 * F_p), ordered XY || XZ || YZ."""
    coords = project(positions, triplane.bounds_min.to(positions.dtype), triplane.bounds_max.to(positions.dtype))
    return torch.cat([bilinear(triplane.planes[k], coords[:, k]) for k in range(3)], dim=-1)


class TriplaneGenerator(nn.Module):
    """Latent-to-triplane CNN: learned 4x4 constant, modulated conv + 2x upsampling up to ``resolution``.

    Args:
        latent_dim: size of the per-frame temporal latent.
        resolution: plane side length (power of two, >= 4).
        plane_channels: channels per plane; the output stack has ``3 * plane_channels``.
        const_channels: channels of the learned constant.
        hidden: width of the latent mapping MLP.
    """

    def __init__(self, latent_dim: int = 32, resolution: int = 128, plane_channels: int = 32,
                 const_channels: int = 256, hidden: int = 128, min_channels: int = 32):
        super().__init__()
        levels = int(round(math.log2(resolution / 4)))
        if 4 * 2**levels != resolution:
            raise ValueError("resolution must be 4 * 2^k")
        self.latent_dim = latent_dim
        self.resolution = resolution
        self.plane_channels = plane_channels
        self.mapping = mlp([latent_dim, hidden, hidden])
        self.const = nn.Parameter(torch.randn(1, const_channels, 4, 4))
        widths = [max(min_channels, const_channels >> i) for i in range(levels + 1)]
        self.convs = nn.ModuleList()
        self.affines = nn.ModuleList()
        cin = const_channels
        for cout in widths:
            self.convs.append(ModulatedConv2d(cin, cout, 3))
            self.affines.append(StyleAffine(hidden, cin))
            cin = cout
        self.to_planes = ModulatedConv2d(cin, 3 * plane_channels, 1, demodulate=False)
        self.to_planes_affine = StyleAffine(hidden, cin)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """Map (D_z,) or (B, D_z) latents to planes (3, F_p, R, R) or (B, 3, F_p, R, R)."""
        single = z.ndim == 1
        z = z.reshape(-1, self.latent_dim)
        h = self.mapping(z)
        x = self.const.expand(z.shape[0], -1, -1, -1)
        for i, (conv, affine) in enumerate(zip(self.convs, self.affines)):
            if i > 0:
                x = upsample2x(x)
            x = F.leaky_relu(conv(x, affine(h)), 0.2)
        planes = self.to_planes(x, self.to_planes_affine(h))
        planes = planes.reshape(-1, 3, self.plane_channels, self.resolution, self.resolution)
        return planes[0] if single else planes


def generate_planes(generator: TriplaneGenerator, z_tmp: torch.Tensor, bounds_min: torch.Tensor,
                    bounds_max: torch.Tensor) -> TriplaneSet:
    if not bool(torch.isfinite(z_tmp).all()):
        raise NonFiniteLatent("temporal latent contains non-finite entries")
    return TriplaneSet(generator(z_tmp), bounds_min, bounds_max)


class TemporalLatentTable(nn.Module):
    """Learned per-frame latents; unseen frames use the row mean."""

    def __init__(self, frames: int, dim: int = 32, init_std: float = 0.1):
        super().__init__()
        self.latents = nn.Parameter(torch.randn(frames, dim) * init_std)

    def __len__(self) -> int:
        return self.latents.shape[0]

    @property
    def mean_latent(self) -> torch.Tensor:
        return self.latents.mean(dim=0)

    def forward(self, frame_id: int | None) -> torch.Tensor:
        if frame_id is None or frame_id < 0 or frame_id >= len(self):
            return self.mean_latent
        return self.latents[frame_id]
