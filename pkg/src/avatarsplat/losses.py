"""Training objectives: RGB L1, landmark-region L1, perceptual distance, UV-conditioned adversarial loss."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateBox, NoExtractor, ShapeMismatch

ROI_SIZE = 32


@dataclass
class LossWeights:
    rgb: float = 1.0
    lpips: float = 0.1
    lmk: float = 0.5
    adv: float = 0.01


@dataclass
class LossReport:
    """Named loss terms, the weights applied, and their weighted total."""

    terms: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_terms(cls, terms: dict[str, torch.Tensor], weights: dict[str, float]) -> tuple["LossReport", torch.Tensor]:
        total = sum(weights[k] * v for k, v in terms.items())
        report = cls({k: float(v.detach()) for k, v in terms.items()}, dict(weights))
        report.terms["total"] = float(total.detach())
        return report, total

    def weighted_total(self) -> float:
        return sum(self.weights.get(k, 0.0) * v for k, v in self.terms.items() if k != "total")

    def to_dict(self) -> dict:
        return {**self.terms, "weights": self.weights}


def _rgb(x) -> torch.Tensor:
    feats = getattr(x, "features", x)
    return feats[..., :3]


def loss_rgb(render, gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between the render's colour channels and an (..., H, W, 3) target."""
    pred = _rgb(render)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"render {tuple(pred.shape)} vs target {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


@dataclass(frozen=True)
class RegionBox:
    kind: str
    box: tuple[float, float, float, float]

    def validate(self, height: int, width: int) -> None:
        x0, y0, x1, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise DegenerateBox(f"{self.kind} box {self.box} has non-positive area")
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
            raise DegenerateBox(f"{self.kind} box {self.box} leaves the {width}x{height} image")


def roi_align(image: torch.Tensor, box: Sequence[float], size: int = ROI_SIZE) -> torch.Tensor:
    """Bilinear RoI crop of an (H, W, C) image to (size, size, C).

    Samples sit at ``x0 + (j + 0.5) * (x1 - x0) / size - 0.5``, so a box of
    exactly ``size`` pixels on the integer grid reproduces the pixel crop.
    """
    H, W, _ = image.shape
    x0, y0, x1, y1 = (float(v) for v in box)
    dtype = image.dtype
    steps = (torch.arange(size, dtype=dtype) + 0.5) / size
    xs = x0 + steps * (x1 - x0) - 0.5
    ys = y0 + steps * (y1 - y0) - 0.5
    gx = (xs / (W - 1)) * 2 - 1 if W > 1 else torch.zeros_like(xs)
    gy = (ys / (H - 1)) * 2 - 1 if H > 1 else torch.zeros_like(ys)
    grid = torch.stack(torch.meshgrid(gx, gy, indexing="xy"), dim=-1)[None]
    sampled = F.grid_sample(image.permute(2, 0, 1)[None], grid, mode="bilinear",
                            padding_mode="border", align_corners=True)
    return sampled[0].permute(1, 2, 0)


def loss_landmark(render, gt: torch.Tensor, boxes: Sequence[RegionBox], size: int = ROI_SIZE) -> torch.Tensor:
    """Mean over boxes of the L1 between RoI-aligned crops of render and target."""
    pred = _rgb(render)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"render {tuple(pred.shape)} vs target {tuple(gt.shape)}")
    if not boxes:
        raise DegenerateBox("no landmark boxes given")
    H, W, _ = gt.shape
    losses = []
    for rb in boxes:
        rb.validate(H, W)
        losses.append((roi_align(pred, rb.box, size) - roi_align(gt, rb.box, size)).abs().mean())
    return torch.stack(losses).mean()


# -- perceptual distance ---------------------------------------------------------------------


class FeatureExtractor(Protocol):
    def __call__(self, x: torch.Tensor) -> list[torch.Tensor]: ...


class RandomConvExtractor(nn.Module):
    """Frozen conv stack with fixed-seed random weights; a deterministic stand-in for pretrained features."""

    def __init__(self, seed: int = 0, channels: Sequence[int] = (16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for i, cout in enumerate(channels):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.copy_(torch.randn(cout, generator=gen) * 0.1)
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x * 2.0 - 1.0
        for conv in self.layers:
            h = F.relu(conv(h.to(conv.weight.dtype)))
            feats.append(h)
        return feats


class VGGExtractor(nn.Module):
    """VGG16 relu1_2..relu5_3 features from a local torchvision state-dict file."""

    _CUTS = (4, 9, 16, 23, 30)

    def __init__(self, weights_path: str | Path):
        super().__init__()
        import torchvision

        vgg = torchvision.models.vgg16(weights=None)
        vgg.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.features = vgg.features[: self._CUTS[-1]].eval()
        self.requires_grad_(False)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = (x - self.mean) / self.std
        out = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i + 1 in self._CUTS:
                out.append(h)
        return out


_REGISTRY: dict[str, FeatureExtractor] = {}


def register_extractor(name: str, extractor: FeatureExtractor) -> None:
    _REGISTRY[name] = extractor


def get_extractor(name: str = "default") -> FeatureExtractor:
    """Look up a registered extractor.

    ``"default"`` resolves to VGG16 weights at ``$AVATAR_CACHE/vgg16.pth`` when
    that file exists, otherwise to a seed-0 :class:`RandomConvExtractor`.
    """
    if name in _REGISTRY:
        return _REGISTRY[name]
    if name == "default":
        cache = os.environ.get("AVATAR_CACHE")
        weights = Path(cache) / "vgg16.pth" if cache else None
        extractor = VGGExtractor(weights) if weights is not None and weights.exists() else RandomConvExtractor(0)
        _REGISTRY[name] = extractor
        return extractor
    if name == "random":
        extractor = RandomConvExtractor(0)
        _REGISTRY[name] = extractor
        return extractor
    raise NoExtractor(f"no perceptual extractor registered under {name!r}")


def _nchw(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 3:
        x = x[None]
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.permute(0, 3, 1, 2)
    return x


def _unit(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def loss_perceptual(pred: torch.Tensor, gt: torch.Tensor, extractor: FeatureExtractor | None) -> torch.Tensor:
    """LPIPS-style distance: channel-normalised feature differences, spatially and layer averaged.

    Accepts (H, W, 3), (B, H, W, 3) or (B, 3, H, W) images in [0, 1].
    """
    if extractor is None:
        raise NoExtractor("perceptual loss needs a feature extractor")
    a, b = _nchw(pred), _nchw(gt)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    fa, fb = extractor(a), extractor(b)
    per_layer = [(_unit(x) - _unit(y)).pow(2).sum(dim=1).mean() for x, y in zip(fa, fb)]
    return torch.stack(per_layer).mean()


# -- conditional adversarial loss ------------------------------------------------------------


class Discriminator(nn.Module):
    """Patch discriminator over channel-concatenated (image, uv) pairs; returns one logit per sample."""

    def __init__(self, in_channels: int = 6, width: int = 32, depth: int = 3):
        super().__init__()
        layers: list[nn.Module] = []
        cin = in_channels
        for i in range(depth):
            cout = width * 2**i
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.logit = nn.Conv2d(cin, 1, 3, padding=1)

    def forward(self, image: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
        x = torch.cat([_nchw(image), _nchw(uv)], dim=1)
        return self.logit(self.body(x)).mean(dim=(1, 2, 3))


class Augment:
    """Differentiable ADA-style augmentation (flip, integer translation, brightness), probability ``p`` each.

    The same random parameters are applied to both channels groups of the
    concatenated (image, uv) pair; brightness only touches the image.
    """

    def __init__(self, p: float = 0.5, max_shift: float = 0.125, brightness: float = 0.2):
        self.p = p
        self.max_shift = max_shift
        self.brightness = brightness

    def __call__(self, image: torch.Tensor, uv: torch.Tensor, generator: torch.Generator):
        image, uv = _nchw(image), _nchw(uv)
        draws = torch.rand(3, generator=generator)
        params = torch.rand(3, generator=generator)
        if draws[0] < self.p:
            image, uv = image.flip(-1), uv.flip(-1)
        if draws[1] < self.p:
            H, W = image.shape[-2:]
            dx = int(round((float(params[0]) * 2 - 1) * self.max_shift * W))
            dy = int(round((float(params[1]) * 2 - 1) * self.max_shift * H))
            image, uv = _shift(image, dx, dy), _shift(uv, dx, dy)
        if draws[2] < self.p:
            image = image + (float(params[2]) * 2 - 1) * self.brightness
        return image, uv


def _shift(x: torch.Tensor, dx: int, dy: int) -> torch.Tensor:
    H, W = x.shape[-2:]
    pad = (max(dx, 0), max(-dx, 0), max(dy, 0), max(-dy, 0))
    x = F.pad(x, pad)
    return x[..., max(-dy, 0) : max(-dy, 0) + H, max(-dx, 0) : max(-dx, 0) + W]


def loss_cgan(discriminator: nn.Module, pred: torch.Tensor, gt: torch.Tensor, uv: torch.Tensor,
              augment: Augment | None = None, generator: torch.Generator | None = None):
    """Non-saturating conditional GAN losses ``(g_loss, d_loss)``.

    ``d_loss`` averages the real and fake branches and sees ``pred`` detached;
    ``g_loss`` backpropagates into ``pred``. With augmentation enabled, real and
    fake pairs go through the same augmentation pipeline.
    """
    if augment is not None and generator is None:
        generator = torch.Generator().manual_seed(0)

    def prep(img):
        if augment is None:
            return _nchw(img), _nchw(uv)
        return augment(img, uv, generator)

    real = discriminator(*prep(gt))
    fake_d = discriminator(*prep(pred.detach()))
    d_loss = 0.5 * (F.softplus(-real).mean() + F.softplus(fake_d).mean())
    g_loss = F.softplus(-discriminator(*prep(pred))).mean()
    return g_loss, d_loss
