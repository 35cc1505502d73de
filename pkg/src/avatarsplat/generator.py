"""Block-structured style-based generator with volumetric prior injection.

Each synthesis block exposes four tap points where an encoded splat render can
be added:

* ``R1`` -- the style code entering the block (before its affine maps)
* ``R2`` -- the style vector after the conv layer's affine map
* ``R3`` -- the conv layer's output feature map
* ``R4`` -- the block's toRGB output

Projections from the prior pyramid into the taps are zero-initialised, so an
untrained injection never changes the generator's output.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensorstore
from .errors import ResolutionMismatch, SchemaMismatch
from .layers import ModulatedConv2d, StyleAffine, mlp, upsample2x

REGIONS = ("R1", "R2", "R3", "R4", "R3+R4")
DESK_WIDTHS = (256, 256, 128, 128, 64)


@dataclass
class InjectionConfig:
    region: str = "R3"
    active_blocks: tuple[int, ...] = (1, 2, 3, 4, 5)
    enabled: bool = True

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ValueError(f"region must be one of {REGIONS}, got {self.region!r}")
        self.active_blocks = tuple(sorted(int(b) for b in self.active_blocks))
        if self.enabled and not self.active_blocks:
            raise ValueError("active_blocks must be non-empty when injection is enabled")

    @property
    def taps(self) -> tuple[str, ...]:
        return ("R3", "R4") if self.region == "R3+R4" else (self.region,)

    def to_dict(self) -> dict:
        return {"region": self.region, "active_blocks": list(self.active_blocks), "enabled": self.enabled}


DISABLED = InjectionConfig(enabled=False, active_blocks=())


class StyleGenerator(nn.Module):
    """Skip-architecture style generator; block ``b`` runs at ``4 * 2**(b-1)`` pixels."""

    def __init__(self, widths: Sequence[int] = DESK_WIDTHS, w_dim: int = 512, z_dim: int = 512,
                 mapping_layers: int = 2):
        super().__init__()
        if len(widths) < 5:
            raise ValueError("need at least 5 blocks")
        self.config = {"widths": list(widths), "w_dim": w_dim, "z_dim": z_dim, "mapping_layers": mapping_layers}
        self.widths = tuple(widths)
        self.w_dim = w_dim
        self.z_dim = z_dim
        self.mapping = mlp([z_dim] + [w_dim] * mapping_layers)
        self.const = nn.Parameter(torch.randn(1, widths[0], 4, 4))
        self.convs = nn.ModuleList()
        self.conv_affines = nn.ModuleList()
        self.trgbs = nn.ModuleList()
        self.trgb_affines = nn.ModuleList()
        cin = widths[0]
        for cout in widths:
            self.convs.append(ModulatedConv2d(cin, cout, 3))
            self.conv_affines.append(StyleAffine(w_dim, cin))
            self.trgbs.append(ModulatedConv2d(cout, 3, 1, demodulate=False))
            self.trgb_affines.append(StyleAffine(w_dim, cout))
            cin = cout
        with torch.no_grad():
            self.register_buffer("w_avg", self.mapping(torch.randn(4096, z_dim)).mean(dim=0))

    @property
    def num_blocks(self) -> int:
        return len(self.widths)

    @property
    def resolution(self) -> int:
        return self.block_resolution(self.num_blocks)

    @staticmethod
    def block_resolution(block: int) -> int:
        return 4 * 2 ** (block - 1)

    def block_in_channels(self, block: int) -> int:
        return self.widths[max(block - 2, 0)]

    def forward(self, w: torch.Tensor, injections: dict | None = None, taps: dict | None = None) -> torch.Tensor:
        """Synthesize (B, 3, H, W) images from (B, w_dim) codes.

        ``injections`` maps block -> {tap: additive tensor}. When ``taps`` is a
        dict it is filled with block -> {tap: tensor} for inspection.
        """
        if w.ndim == 1:
            w = w[None]
        injections = injections or {}
        x = self.const.expand(w.shape[0], -1, -1, -1)
        rgb = None
        for i in range(self.num_blocks):
            b = i + 1
            inj = injections.get(b, {})
            wb = w + inj["R1"] if "R1" in inj else w
            style = self.conv_affines[i](wb)
            if "R2" in inj:
                style = style + inj["R2"]
            if i > 0:
                x = upsample2x(x)
            x = F.leaky_relu(self.convs[i](x, style), 0.2)
            if "R3" in inj:
                x = x + inj["R3"]
            y = self.trgbs[i](x, self.trgb_affines[i](wb))
            if "R4" in inj:
                y = y + inj["R4"]
            if taps is not None:
                taps[b] = {"R1": wb, "R2": style, "R3": x, "R4": y}
            rgb = y if rgb is None else upsample2x(rgb) + y
        return rgb + 0.5


class PriorEncoder(nn.Module):
    """Bias-free strided conv pyramid from a (B, C, H, W) render to per-block feature maps."""

    def __init__(self, in_channels: int = 32, input_resolution: int = 64,
                 block_channels: Sequence[int] = DESK_WIDTHS, width: int = 64):
        super().__init__()
        self.input_resolution = input_resolution
        self.block_channels = tuple(block_channels)
        self.stem = nn.Conv2d(in_channels, width, 3, padding=1, bias=False)
        self.downs = nn.ModuleList()
        res = input_resolution
        while res > 4:
            self.downs.append(nn.Conv2d(width, width, 3, stride=2, padding=1, bias=False))
            res //= 2
        self.adapters = nn.ModuleList(nn.Conv2d(width, c, 1, bias=False) for c in block_channels)

    def forward(self, render: torch.Tensor, cfg: InjectionConfig) -> dict[int, torch.Tensor]:
        if render.shape[-1] != self.input_resolution:
            raise ResolutionMismatch(f"encoder expects {self.input_resolution}px renders, got {render.shape[-1]}")
        wanted = {StyleGenerator.block_resolution(b): b for b in cfg.active_blocks}
        too_big = [b for r, b in wanted.items() if r > self.input_resolution]
        if too_big:
            raise ResolutionMismatch(f"blocks {too_big} exceed render resolution {self.input_resolution}")
        pyramid = {}
        x = F.leaky_relu(self.stem(render), 0.2)
        res = self.input_resolution
        if res in wanted:
            b = wanted[res]
            pyramid[b] = self.adapters[b - 1](x)
        for down in self.downs:
            x = F.leaky_relu(down(x), 0.2)
            res //= 2
            if res in wanted:
                b = wanted[res]
                pyramid[b] = self.adapters[b - 1](x)
        return dict(sorted(pyramid.items()))


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class InjectionProjections(nn.Module):
    """Zero-initialised maps from pyramid entries into every tap of every block."""

    def __init__(self, generator: StyleGenerator, prior_channels: Sequence[int] | None = None):
        super().__init__()
        prior_channels = tuple(prior_channels or generator.widths)
        self.r1 = nn.ModuleList(_zero(nn.Linear(c, generator.w_dim)) for c in prior_channels)
        self.r2 = nn.ModuleList(
            _zero(nn.Linear(c, generator.block_in_channels(b + 1))) for b, c in enumerate(prior_channels)
        )
        self.r3 = nn.ModuleList(
            _zero(nn.Conv2d(c, generator.widths[b], 1)) for b, c in enumerate(prior_channels)
        )
        self.r4 = nn.ModuleList(_zero(nn.Conv2d(c, 3, 1)) for c in prior_channels)

    def forward(self, pyramid: dict[int, torch.Tensor], cfg: InjectionConfig) -> dict[int, dict[str, torch.Tensor]]:
        out: dict[int, dict[str, torch.Tensor]] = {}
        for b in cfg.active_blocks:
            if b not in pyramid:
                continue
            p = pyramid[b]
            entry = {}
            for tap in cfg.taps:
                if tap == "R1":
                    entry["R1"] = self.r1[b - 1](p.mean(dim=(2, 3)))
                elif tap == "R2":
                    entry["R2"] = self.r2[b - 1](p.mean(dim=(2, 3)))
                elif tap == "R3":
                    entry["R3"] = self.r3[b - 1](p)
                else:
                    entry["R4"] = self.r4[b - 1](p)
            out[b] = entry
        return out


def synthesize(generator: StyleGenerator, w: torch.Tensor, pyramid: dict[int, torch.Tensor] | None = None,
               cfg: InjectionConfig = DISABLED, projections: InjectionProjections | None = None,
               taps: dict | None = None) -> torch.Tensor:
    """Generator output with the prior pyramid injected at ``cfg``'s taps and blocks."""
    injections = None
    if cfg.enabled and pyramid is not None:
        if projections is None:
            raise ValueError("injection enabled but no projections supplied")
        for b in cfg.active_blocks:
            if b in pyramid:
                res = generator.block_resolution(b)
                if tuple(pyramid[b].shape[-2:]) != (res, res):
                    raise ResolutionMismatch(
                        f"pyramid entry for block {b} is {tuple(pyramid[b].shape[-2:])}, block runs at {res}px"
                    )
        injections = projections(pyramid, cfg)
    return generator(w, injections, taps)


def encode_prior(encoder: PriorEncoder, render, cfg: InjectionConfig) -> dict[int, torch.Tensor]:
    """Pyramid from a :class:`FeatureImage` (H, W, C) or an NCHW tensor."""
    feats = getattr(render, "features", render)
    if feats.ndim == 3:
        feats = feats.permute(2, 0, 1)[None]
    return encoder(feats, cfg)


# -- multi-view pivotal tuning -------------------------------------------------------------


@dataclass
class PTIResult:
    w: torch.Tensor
    phase1_trace: list[float] = field(default_factory=list)
    phase2_trace: list[float] = field(default_factory=list)

    @property
    def trace(self) -> list[float]:
        return self.phase1_trace + self.phase2_trace


def _to_nchw(images: Sequence[torch.Tensor]) -> torch.Tensor:
    batch = torch.stack([torch.as_tensor(im) for im in images])
    if batch.shape[-1] == 3:
        batch = batch.permute(0, 3, 1, 2)
    return batch


def pti_invert(generator: StyleGenerator, targets: Sequence[torch.Tensor], steps1: int = 500, steps2: int = 300,
               perceptual: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None = None,
               perceptual_weight: float = 1.0, lr_w: float = 0.01, lr_g: float = 3e-4) -> PTIResult:
    """Two-phase inversion: fit one shared ``w`` to all targets, then tune the generator at that ``w``.

    ``targets`` are (H, W, 3) or (3, H, W) images at the generator's resolution.
    The generator is modified in place during phase 2.
    """
    if not 1 <= len(targets) <= 16:
        raise ValueError(f"need 1..16 target images, got {len(targets)}")
    target = _to_nchw(targets).to(generator.const.dtype)
    if target.shape[-1] != generator.resolution:
        raise ResolutionMismatch(f"targets are {target.shape[-1]}px, generator is {generator.resolution}px")

    def objective(image: torch.Tensor) -> torch.Tensor:
        loss = F.mse_loss(image.expand_as(target), target)
        if perceptual is not None and perceptual_weight:
            loss = loss + perceptual_weight * perceptual(image.expand_as(target), target)
        return loss

    result = PTIResult(w=generator.w_avg.detach().clone())
    flags = [p.requires_grad for p in generator.parameters()]

    generator.requires_grad_(False)
    w = result.w.clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=lr_w)
    for _ in range(steps1):
        opt.zero_grad(set_to_none=True)
        loss = objective(generator(w))
        loss.backward()
        opt.step()
        result.phase1_trace.append(float(loss.detach()))
    w = w.detach()

    generator.requires_grad_(True)
    generator.mapping.requires_grad_(False)
    opt = torch.optim.Adam([p for p in generator.parameters() if p.requires_grad], lr=lr_g)
    for _ in range(steps2):
        opt.zero_grad(set_to_none=True)
        loss = objective(generator(w))
        loss.backward()
        opt.step()
        result.phase2_trace.append(float(loss.detach()))

    for p, flag in zip(generator.parameters(), flags):
        p.requires_grad_(flag)
    result.w = w
    return result


# -- weights manifest ----------------------------------------------------------------------


def save_weights(generator: StyleGenerator, path: str | Path) -> Path:
    tensors = {f"generator/{k}": v for k, v in generator.state_dict().items()}
    return tensorstore.save(path, tensors, {"kind": "style_generator", "config": generator.config})


def load_pretrained(path: str | Path) -> StyleGenerator:
    """Rebuild a generator from a weights manifest; missing or mis-shaped tensors raise :class:`SchemaMismatch`."""
    tensors, meta = tensorstore.load(path)
    config = meta.get("config")
    if meta.get("kind") != "style_generator" or config is None:
        raise SchemaMismatch(f"{path} is not a style generator manifest")
    generator = StyleGenerator(**config)
    tensorstore.load_into_module(generator, tensors, prefix="generator/")
    return generator


def checksum(module_or_tensors) -> str:
    """SHA-256 over parameter bytes, in name order."""
    if isinstance(module_or_tensors, nn.Module):
        items = sorted(module_or_tensors.state_dict().items())
    elif isinstance(module_or_tensors, torch.Tensor):
        items = [("", module_or_tensors)]
    else:
        items = sorted(module_or_tensors.items())
    h = hashlib.sha256()
    for name, t in items:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
