"""Ablation studies over injection regions, block sets, model features and adversarial settings.

Every study starts from a completed stage-2 checkpoint and runs short,
seeded training jobs; each configuration yields one :class:`AblationRecord`.
Orderings between configurations are reported, never asserted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import AvatarDataset
from .generator import REGIONS, InjectionConfig
from .losses import get_extractor
from .metrics import lpips, psnr, ssim
from .trainer import (
    Checkpoint,
    ModelConfig,
    TrainConfig,
    desk_preset,
    initialise_generator,
    run_stage1,
    run_stage2,
    run_stage3,
)

log = logging.getLogger(__name__)

STUDIES = ("regions", "blocks", "prune", "features", "gan")
FEATURE_VARIANTS = {
    "full": {},
    "w/o triplane": {"use_triplane": False},
    "w/o cross-atten": {"use_attention": False},
    "w/o z_tmp": {"use_temporal": False},
    "w/o init": {"mesh_init": False},
}
GAN_VARIANTS = {
    "full": {},
    "w/o Discri": {"use_discriminator": False},
    "w/o ADA-aug": {"use_ada": False},
    "full-tune": {"full_tune": True},
}


@dataclass
class AblationRecord:
    study: str
    variant: str
    region: str
    blocks: list[int]
    psnr: float
    lpips: float
    ssim: float
    pruned: list[int] = field(default_factory=list)
    iterations: int = 0
    split: str = "test"

    def to_dict(self) -> dict:
        return asdict(self)


# -- checkpoint plumbing ---------------------------------------------------------------------

_GENERATOR_KEYS = ("model/generator.", "model/w", "model/generator_ready")


def graft_generator(stage2: Checkpoint, donor: Checkpoint) -> Checkpoint:
    """Stage-2 checkpoint carrying the (already initialised) style generator of ``donor``."""
    tensors = dict(stage2.tensors)
    for k, v in donor.tensors.items():
        if k.startswith(_GENERATOR_KEYS):
            tensors[k] = v
    return Checkpoint(tensors, dict(stage2.meta))


def load_base(path: str | Path) -> Checkpoint:
    """Resolve a run directory or checkpoint path to a completed stage-2 checkpoint.

    A sibling stage-3 checkpoint, when present, donates its initialised
    generator so studies skip inversion.
    """
    path = Path(path)
    if (path / "stage2").is_dir():
        s2 = Checkpoint.load(path / "stage2")
        s3_dir = path / "stage3"
    else:
        ck = Checkpoint.load(path)
        if ck.stage == 2:
            s2, s3_dir = ck, path.parent / "stage3"
        elif ck.stage == 3 and (path.parent / "stage2").is_dir():
            s2, s3_dir = Checkpoint.load(path.parent / "stage2"), path
        else:
            raise ValueError(f"{path} is a stage-{ck.stage} checkpoint without a sibling stage2 checkpoint")
    if s2.stage != 2 or not s2.complete:
        raise ValueError("ablations need a completed stage-2 checkpoint")
    if (s3_dir / "manifest.json").exists():
        s2 = graft_generator(s2, Checkpoint.load(s3_dir))
    return s2


def ensure_generator(base: Checkpoint, dataset: AvatarDataset, cfg: TrainConfig, extractor=None) -> Checkpoint:
    """Initialise the generator once so every stage-3 job shares it."""
    if int(base.tensors.get("model/generator_ready", torch.zeros(()))) == 1:
        return base
    model = base.restore_model(dataset)
    initialise_generator(model, dataset, cfg, extractor)
    tensors = dict(base.tensors)
    tensors.update({f"model/{k}": v for k, v in model.state_dict().items()})
    return Checkpoint(tensors, dict(base.meta))


# -- evaluation ------------------------------------------------------------------------------


def _eval_ids(dataset: AvatarDataset, split: str) -> list[int]:
    train, test = dataset.split()
    return test if split == "test" and test else train


@torch.no_grad()
def score(model, dataset: AvatarDataset, ids: Sequence[int], stage: int, injection: InjectionConfig | None,
          extractor) -> tuple[float, float, float]:
    p, lp, ss = [], [], []
    for i in ids:
        pred = model.predict(dataset[i].conditioning, stage, injection).clamp(0, 1).numpy()
        gt = dataset[i].image
        p.append(psnr(pred, gt))
        lp.append(lpips(pred, gt, extractor))
        ss.append(ssim(pred, gt))
    return float(np.mean(p)), float(np.mean(lp)), float(np.mean(ss))


# -- studies ---------------------------------------------------------------------------------


@dataclass
class StudyContext:
    base: Checkpoint
    dataset: AvatarDataset
    stage3: TrainConfig
    iterations: int
    extractor: object
    split: str = "test"
    stage12_iterations: int = 300

    @property
    def blocks(self) -> tuple[int, ...]:
        return tuple(range(1, len(self.base.meta["model_config"]["generator_widths"]) + 1))

    def train3(self, **overrides) -> Checkpoint:
        cfg = replace(self.stage3, stage=3, iterations=self.iterations, generator_init="none", **overrides)
        return run_stage3(self.dataset, cfg, self.base, extractor=self.extractor)

    def record(self, study, variant, ckpt, injection, stage=3, pruned=(), iterations=None) -> AblationRecord:
        model = ckpt.restore_model(self.dataset)
        ids = _eval_ids(self.dataset, self.split)
        p, lp, ss = score(model, self.dataset, ids, stage, injection, self.extractor)
        rec = AblationRecord(study, variant, injection.region if injection else "-",
                             list(injection.active_blocks) if injection else [], p, lp, ss, list(pruned),
                             iterations if iterations is not None else self.iterations, self.split)
        log.info("%s %s: psnr %.2f lpips %.4f", study, variant, p, lp)
        return rec


def study_regions(ctx: StudyContext) -> list[AblationRecord]:
    out = []
    for region in REGIONS:
        ck = ctx.train3(injection_region=region, injection_blocks=ctx.blocks)
        out.append(ctx.record("regions", region, ck, InjectionConfig(region, ctx.blocks)))
    return out


def study_blocks(ctx: StudyContext) -> list[AblationRecord]:
    out = []
    for blocks in [(b,) for b in ctx.blocks] + [ctx.blocks]:
        ck = ctx.train3(injection_region="R3", injection_blocks=blocks)
        name = "blocks " + ",".join(map(str, blocks))
        out.append(ctx.record("blocks", name, ck, InjectionConfig("R3", blocks)))
    return out


def study_prune(ctx: StudyContext) -> list[AblationRecord]:
    """Train once with every block injected, then drop trailing blocks at inference."""
    ck = ctx.train3(injection_region="R3", injection_blocks=ctx.blocks)
    out = []
    for k in range(len(ctx.blocks), 0, -1):
        kept, pruned = ctx.blocks[:k], ctx.blocks[k:]
        name = "keep 1.." + str(k)
        out.append(ctx.record("prune", name, ck, InjectionConfig("R3", kept), pruned=pruned))
    return out


def study_gan(ctx: StudyContext) -> list[AblationRecord]:
    out = []
    for name, overrides in GAN_VARIANTS.items():
        ck = ctx.train3(injection_region="R3", injection_blocks=ctx.blocks, **overrides)
        out.append(ctx.record("gan", name, ck, InjectionConfig("R3", ctx.blocks)))
    return out


def study_features(ctx: StudyContext) -> list[AblationRecord]:
    """Retrain stages 1-2 per representation variant and score the deformed splat render."""
    model_cfg = ModelConfig(**ctx.base.meta["model_config"])
    preset = desk_preset(ctx.stage3.seed)
    out = []
    for name, overrides in FEATURE_VARIANTS.items():
        mcfg = replace(model_cfg, **overrides)
        c1 = replace(preset[1], iterations=ctx.stage12_iterations)
        c2 = replace(preset[2], iterations=ctx.stage12_iterations)
        ck = run_stage1(ctx.dataset, c1, mcfg, extractor=ctx.extractor)
        ck = run_stage2(ctx.dataset, c2, ck, extractor=ctx.extractor)
        out.append(ctx.record("features", name, ck, None, stage=2, iterations=2 * ctx.stage12_iterations))
    return out


_RUNNERS = {"regions": study_regions, "blocks": study_blocks, "prune": study_prune, "features": study_features,
            "gan": study_gan}


def run_study(study: str, base: Checkpoint, dataset: AvatarDataset, epochs: int = 10,
              stage3: TrainConfig | None = None, extractor=None, split: str = "test",
              stage12_iterations: int = 300, out: str | Path | None = None) -> list[AblationRecord]:
    """Run one study; ``epochs`` passes over the training frames per stage-3 job."""
    if study not in _RUNNERS:
        raise ValueError(f"unknown study {study!r}; choose from {STUDIES}")
    extractor = extractor or get_extractor()
    stage3 = stage3 or desk_preset()[3]
    if study != "features":
        base = ensure_generator(base, dataset, stage3, extractor)
    iterations = max(1, epochs * len(base.meta["train_ids"]))
    ctx = StudyContext(base, dataset, stage3, iterations, extractor, split, stage12_iterations)
    records = _RUNNERS[study](ctx)
    if out is not None:
        write_records(records, out)
    return records


def write_records(records: Sequence[AblationRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.to_dict() for r in records], indent=1))
    return path


def format_records(records: Sequence[AblationRecord]) -> str:
    lines = ["| Study | Variant | Region | Blocks | Pruned | PSNR↑ | LPIPS↓ | SSIM↑ |", "|---" * 8 + "|"]
    for r in records:
        blocks = ",".join(map(str, r.blocks)) or "-"
        pruned = ",".join(map(str, r.pruned)) or "-"
        lines.append(f"| {r.study} | {r.variant} | {r.region} | {blocks} | {pruned} | {r.psnr:.2f} | "
                     f"{r.lpips:.4f} | {r.ssim:.3f} |")
    return "\n".join(lines) + "\n"
