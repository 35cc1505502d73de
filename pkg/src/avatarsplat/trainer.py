"""Three-stage training: canonical Gaussians, deformation, generator-based synthesis.

Every stage owns a trainable-set manifest (:data:`STAGE_GROUPS`); parameters
outside it have ``requires_grad`` switched off. Frame sampling for iteration
``it`` is drawn from ``default_rng([seed, stage, it])`` so a resumed run sees
exactly the frames an uninterrupted run would.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import tensorstore
from .data import AvatarDataset
from .deformer import DeformationOutput, Deformer, FrameConditioning, apply_deformation
from .errors import GeneratorNotInitialized, MissingLandmarks, ResolutionMismatch, SchemaMismatch
from .gaussians import FEATURE_DIM, GaussianCloud, init_from_mesh, init_random
from .generator import (
    DESK_WIDTHS,
    InjectionConfig,
    InjectionProjections,
    PriorEncoder,
    StyleGenerator,
    checksum,
    encode_prior,
    pti_invert,
    synthesize,
)
from .losses import (
    Augment,
    Discriminator,
    LossReport,
    LossWeights,
    RegionBox,
    get_extractor,
    loss_cgan,
    loss_landmark,
    loss_perceptual,
    loss_rgb,
    roi_align,
)
from .splatting import FeatureImage, rasterize
from .triplane import TemporalLatentTable, TriplaneGenerator, bounds_from_points, query

log = logging.getLogger(__name__)

CLOUD_FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "features")
STAGE_GROUPS = {
    1: ("cloud", "triplane"),
    2: ("triplane", "latents", "deformer"),
    3: ("triplane", "latents", "deformer", "encoder", "projections"),
}


@dataclass
class ModelConfig:
    n_gaussians: int = 2000
    feature_dim: int = FEATURE_DIM
    latent_dim: int = 32
    triplane_resolution: int = 64
    plane_channels: int = 32
    triplane_const_channels: int = 256
    model_dim: int = 128
    heads: int = 4
    generator_widths: tuple[int, ...] = DESK_WIDTHS
    w_dim: int = 512
    z_dim: int = 512
    encoder_width: int = 64
    use_triplane: bool = True
    use_attention: bool = True
    use_temporal: bool = True
    mesh_init: bool = True
    seed: int = 0

    def __post_init__(self):
        self.generator_widths = tuple(self.generator_widths)


@dataclass
class TrainConfig:
    stage: int = 1
    iterations: int = 1000
    batch_size: int = 1
    learning_rate: float = 1e-3
    cloud_lr: dict[str, float] = field(default_factory=lambda: {
        "positions": 2e-4, "rotations": 1e-3, "log_scales": 5e-3, "opacity_logits": 5e-2, "features": 1e-2,
    })
    discriminator_lr: float = 2e-4
    lr_decay: float = 0.1  # lr multiplier reached at the last iteration (exponential schedule)
    grad_clip: float = 1.0  # global gradient-norm clip; 0 disables
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    resolution: int = 64
    injection_region: str = "R3"
    injection_blocks: tuple[int, ...] = (1, 2, 3, 4, 5)
    use_discriminator: bool = True
    use_ada: bool = True
    full_tune: bool = False
    generator_init: str = "pti"  # "pti", "random", "none" or a weights path
    pti_steps1: int = 500
    pti_steps2: int = 300
    pti_views: tuple[int, ...] | None = None
    debug: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.injection_blocks = tuple(self.injection_blocks)
        if self.pti_views is not None:
            self.pti_views = tuple(self.pti_views)

    @property
    def injection(self) -> InjectionConfig:
        return InjectionConfig(self.injection_region, self.injection_blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["injection_blocks"] = list(self.injection_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def desk_preset(seed: int = 0) -> dict[int, TrainConfig]:
    """Single-core scale: 1k / 2k / 1.5k iterations at batch 1 (about 20 minutes on a 64² clip)."""
    return {
        1: TrainConfig(stage=1, iterations=1000, seed=seed),
        2: TrainConfig(stage=2, iterations=2000, learning_rate=3e-3, seed=seed),
        3: TrainConfig(stage=3, iterations=1500, learning_rate=3e-3, seed=seed),
    }


def paper_preset(seed: int = 0) -> dict[int, TrainConfig]:
    """Full schedule: 10k joint iterations for stages 1+2, then 50k, batch 4, lr 1e-4."""
    lr = 1e-4
    cloud = {k: lr for k in CLOUD_FIELDS}
    return {
        1: TrainConfig(stage=1, iterations=5000, batch_size=4, learning_rate=lr, cloud_lr=cloud, seed=seed),
        2: TrainConfig(stage=2, iterations=5000, batch_size=4, learning_rate=lr, cloud_lr=cloud, seed=seed),
        3: TrainConfig(stage=3, iterations=50000, batch_size=4, learning_rate=lr, cloud_lr=cloud,
                       discriminator_lr=lr, seed=seed),
    }


def iteration_plan(preset: dict[int, TrainConfig]) -> str:
    s12 = preset[1].iterations + preset[2].iterations
    s3 = preset[3].iterations
    return (f"stages 1+2: {s12} iterations ({preset[1].iterations} + {preset[2].iterations}), "
            f"stage 3: {s3} iterations, batch {preset[3].batch_size}, lr {preset[3].learning_rate:g}")


# -- model -----------------------------------------------------------------------------------


class CloudParams(nn.Module):
    def __init__(self, cloud: GaussianCloud):
        super().__init__()
        for name in CLOUD_FIELDS:
            setattr(self, name, nn.Parameter(getattr(cloud, name).detach().clone()))

    def cloud(self) -> GaussianCloud:
        return GaussianCloud(**{name: getattr(self, name) for name in CLOUD_FIELDS})


def _pose(cond: FrameConditioning, dtype=torch.float32):
    return (torch.as_tensor(cond.expression, dtype=dtype), torch.as_tensor(cond.pose_quat, dtype=dtype),
            torch.as_tensor(cond.pose_trans, dtype=dtype))


class AvatarModel(nn.Module):
    """All learnable state of the pipeline.

    The canonical appearance is the per-Gaussian feature plus a zero-initialised
    linear read-out of the triplane generated from the mean temporal latent; the
    deformer sees the triplane generated from the frame's own latent.
    """

    def __init__(self, cfg: ModelConfig, mesh, expression_dim: int, train_ids: Sequence[int], resolution: int = 64):
        super().__init__()
        self.cfg = cfg
        self.expression_dim = expression_dim
        self.train_ids = [int(i) for i in train_ids]
        self._rows = {fid: row for row, fid in enumerate(self.train_ids)}
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            if cfg.mesh_init:
                cloud = init_from_mesh(mesh, cfg.n_gaussians, cfg.seed, cfg.feature_dim)
            else:
                lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
                cloud = init_random(lo, hi, cfg.n_gaussians, cfg.seed, cfg.feature_dim)
            self.cloud = CloudParams(cloud)
            bmin, bmax = bounds_from_points(cloud.positions, 0.1)
            self.register_buffer("bounds_min", bmin)
            self.register_buffer("bounds_max", bmax)
            tp_dim = 3 * cfg.plane_channels
            self.triplane = TriplaneGenerator(cfg.latent_dim, cfg.triplane_resolution, cfg.plane_channels,
                                              cfg.triplane_const_channels)
            self.appearance = nn.Linear(tp_dim, cfg.feature_dim)
            nn.init.zeros_(self.appearance.weight)
            nn.init.zeros_(self.appearance.bias)
            self.latents = TemporalLatentTable(max(len(self.train_ids), 1), cfg.latent_dim)
            self.deformer = Deformer(tp_dim, expression_dim, cfg.model_dim, cfg.heads, cfg.feature_dim,
                                     use_attention=cfg.use_attention,
                                     embed_count=None if cfg.use_triplane else cfg.n_gaussians)
            self.generator = StyleGenerator(cfg.generator_widths, cfg.w_dim, cfg.z_dim)
            self.encoder = PriorEncoder(cfg.feature_dim, resolution, cfg.generator_widths, cfg.encoder_width)
            self.projections = InjectionProjections(self.generator)
            self.discriminator = Discriminator(6)
        self.register_buffer("w", self.generator.w_avg.detach().clone())
        self.register_buffer("generator_ready", torch.zeros((), dtype=torch.int64))

    def groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "cloud": list(self.cloud.parameters()),
            "triplane": list(self.triplane.parameters()) + list(self.appearance.parameters()),
            "latents": list(self.latents.parameters()),
            "deformer": list(self.deformer.parameters()),
            "encoder": list(self.encoder.parameters()),
            "projections": list(self.projections.parameters()),
            "generator": list(self.generator.parameters()),
            "discriminator": list(self.discriminator.parameters()),
        }

    def latent_for(self, frame_id: int | None) -> torch.Tensor:
        if not self.cfg.use_temporal or frame_id not in self._rows:
            return self.latents.mean_latent
        return self.latents(self._rows[frame_id])

    def posed_cloud(self, cond: FrameConditioning, deform: bool = True, exp_scale: float = 1.0) -> GaussianCloud:
        base = self.cloud.cloud()
        expr, quat, trans = _pose(cond, base.positions.dtype)
        expr = expr * exp_scale
        if self.cfg.use_triplane:
            latents = torch.stack([self.latents.mean_latent, self.latent_for(cond.frame_id)])
            planes = self.triplane(latents)
            static = query(_set(planes[0], self), base.positions)
            features = base.features + self.appearance(static)
            base = replace(base, features=features)
        if deform:
            tp = query(_set(planes[1], self), base.positions) if self.cfg.use_triplane else base.positions.new_zeros(
                len(base), 3 * self.cfg.plane_channels)
            d = self.deformer(tp, expr, quat, trans)
        else:
            d = DeformationOutput.zeros(len(base), base.features.shape[1], base.positions.dtype)
        return apply_deformation(base, d, quat, trans)

    def render(self, cond: FrameConditioning, deform: bool = True, camera=None, exp_scale: float = 1.0) -> FeatureImage:
        return rasterize(self.posed_cloud(cond, deform, exp_scale), camera or cond.camera)

    def synthesize(self, render: FeatureImage, cfg: InjectionConfig) -> torch.Tensor:
        """Generator output (H, W, 3) with the render injected."""
        pyramid = encode_prior(self.encoder, render, cfg)
        out = synthesize(self.generator, self.w, pyramid, cfg, self.projections)
        return out[0].permute(1, 2, 0)

    def base_output(self) -> torch.Tensor:
        return self.generator(self.w)[0].permute(1, 2, 0)

    def predict(self, cond: FrameConditioning, stage: int, injection: InjectionConfig | None = None,
                camera=None, exp_scale: float = 1.0) -> torch.Tensor:
        """Final RGB image for a frame at the given stage of training."""
        render = self.render(cond, deform=stage >= 2, camera=camera, exp_scale=exp_scale)
        if stage < 3:
            return render.rgb
        return self.synthesize(render, injection or InjectionConfig())


def _set(planes: torch.Tensor, model: AvatarModel):
    from .triplane import TriplaneSet

    return TriplaneSet(planes, model.bounds_min.to(planes.dtype), model.bounds_max.to(planes.dtype))


def build_model(dataset: AvatarDataset, cfg: ModelConfig | None = None) -> AvatarModel:
    cfg = cfg or ModelConfig()
    train_ids, _ = dataset.split()
    H, W = dataset.resolution
    if H != W:
        raise ResolutionMismatch(f"frames must be square, got {H}x{W}")
    return AvatarModel(cfg, dataset.mesh, dataset.expression_dim, train_ids, resolution=H)


# -- checkpoints -----------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Model and optimizer state plus the stage/iteration it was taken at."""

    tensors: dict[str, torch.Tensor]
    meta: dict

    @property
    def stage(self) -> int:
        return int(self.meta["stage"])

    @property
    def iteration(self) -> int:
        return int(self.meta["iteration"])

    @property
    def complete(self) -> bool:
        return bool(self.meta.get("complete", False))

    def save(self, path: str | Path) -> Path:
        return tensorstore.save(path, self.tensors, self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        tensors, meta = tensorstore.load(path)
        if "stage" not in meta or "model_config" not in meta:
            raise SchemaMismatch(f"{path} is not a training checkpoint")
        return cls(tensors, meta)

    def restore_model(self, dataset: AvatarDataset) -> AvatarModel:
        cfg = ModelConfig(**self.meta["model_config"])
        H = dataset.resolution[0]
        model = AvatarModel(cfg, dataset.mesh, int(self.meta["expression_dim"]), self.meta["train_ids"], H)
        tensorstore.load_into_module(model, self.tensors, prefix="model/")
        return model


def _optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, torch.Tensor], list]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, value in st.items():
            tensors[f"{prefix}/{idx}/{key}"] = torch.as_tensor(value)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, groups


def _load_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], prefix: str, groups: list) -> None:
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        idx, key = name[len(prefix) + 1 :].split("/")
        state.setdefault(int(idx), {})[key] = value.clone()
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


# -- optimisation ----------------------------------------------------------------------------


def make_optimizer(param_groups, lr: float = 1e-4) -> torch.optim.Adam:
    """Adam with betas (0.9, 0.999) and eps 1e-8."""
    return torch.optim.Adam(param_groups, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def optimizer_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], cfg: TrainConfig | float,
                   optimizer: torch.optim.Optimizer | None = None) -> torch.optim.Optimizer:
    """Apply one Adam update of ``grads`` to ``params`` in place; returns the optimizer for reuse."""
    lr = cfg.learning_rate if isinstance(cfg, TrainConfig) else float(cfg)
    if optimizer is None:
        optimizer = make_optimizer(list(params), lr)
    for p, g in zip(params, grads):
        p.grad = g.detach().clone()
    optimizer.step()
    return optimizer


def trainable_groups(cfg: TrainConfig) -> tuple[str, ...]:
    groups = STAGE_GROUPS[cfg.stage]
    if cfg.stage == 3 and cfg.full_tune:
        groups = groups + ("generator",)
    return groups


def extreme_pose_views(dataset: AvatarDataset, ids: Sequence[int], count: int = 4) -> list[int]:
    """Frames with the largest and smallest head yaw and pitch."""
    def angles(fid):
        w, x, y, z = dataset[fid].conditioning.pose_quat
        forward = np.array([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)])
        return math.atan2(forward[0], forward[2]), math.asin(np.clip(forward[1], -1, 1))

    yaw = {fid: angles(fid)[0] for fid in ids}
    pitch = {fid: angles(fid)[1] for fid in ids}
    order = [max(yaw, key=yaw.get), min(yaw, key=yaw.get), max(pitch, key=pitch.get), min(pitch, key=pitch.get)]
    chosen: list[int] = []
    for fid in order + list(ids):
        if fid not in chosen:
            chosen.append(fid)
        if len(chosen) == min(count, len(ids)):
            break
    return chosen


class StageTrainer:
    """Runs one stage; resumable from a :class:`Checkpoint` taken mid-stage."""

    def __init__(self, model: AvatarModel, dataset: AvatarDataset, cfg: TrainConfig, iteration: int = 0,
                 extractor=None):
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.iteration = iteration
        self.extractor = extractor or get_extractor()
        self.trace: list[dict] = []
        self.groups = trainable_groups(cfg)
        self._images = {}
        all_groups = model.groups()
        for name, params in all_groups.items():
            for p in params:
                p.requires_grad_(name in self.groups)
        param_groups = []
        for name in self.groups:
            if name == "cloud":
                for fname in CLOUD_FIELDS:
                    param_groups.append({"params": [getattr(model.cloud, fname)], "lr": cfg.cloud_lr[fname]})
            else:
                param_groups.append({"params": all_groups[name], "lr": cfg.learning_rate})
        self.optimizer = make_optimizer(param_groups, cfg.learning_rate)
        self._base_lrs = [g["lr"] for g in self.optimizer.param_groups]
        self.disc_optimizer = None
        if cfg.stage == 3:
            if int(model.generator_ready) == 0:
                raise GeneratorNotInitialized("stage 3 needs an initialised generator (PTI, random or weights)")
            if model.generator.resolution != dataset.resolution[0]:
                raise ResolutionMismatch(
                    f"generator outputs {model.generator.resolution}px, frames are {dataset.resolution[0]}px")
            if cfg.use_discriminator:
                for p in model.discriminator.parameters():
                    p.requires_grad_(True)
                self.disc_optimizer = make_optimizer(model.discriminator.parameters(), cfg.discriminator_lr)
        self.augment = Augment() if cfg.use_ada else None
        self.train_ids = model.train_ids
        if cfg.stage >= 2:
            for fid in self.train_ids:
                boxes = dataset[fid].conditioning.boxes
                if not boxes or not {"eyes", "mouth"} <= set(boxes):
                    raise MissingLandmarks(f"frame {fid} lacks eyes/mouth boxes")

    def _target(self, fid: int) -> torch.Tensor:
        if fid not in self._images:
            self._images[fid] = torch.as_tensor(self.dataset[fid].image, dtype=torch.float32)
        return self._images[fid]

    def sample(self, it: int) -> list[int]:
        rng = np.random.default_rng([self.cfg.seed, self.cfg.stage, it])
        replace_ = self.cfg.batch_size > len(self.train_ids)
        return [int(i) for i in rng.choice(self.train_ids, self.cfg.batch_size, replace=replace_)]

    def frame_losses(self, fid: int, it: int) -> tuple[dict[str, torch.Tensor], torch.Tensor | None]:
        cfg, model = self.cfg, self.model
        cond = self.dataset[fid].conditioning
        gt = self._target(fid)
        render = model.render(cond, deform=cfg.stage >= 2)
        pred = render.rgb if cfg.stage < 3 else model.synthesize(render, cfg.injection)
        terms = {"rgb": loss_rgb(pred, gt)}
        if cfg.weights.lpips:
            terms["lpips"] = loss_perceptual(pred, gt, self.extractor)
        if cfg.stage >= 2 and cfg.weights.lmk:
            boxes = [RegionBox(k, tuple(cond.boxes[k])) for k in ("eyes", "mouth")]
            terms["lmk"] = loss_landmark(pred, gt, boxes)
        d_loss = None
        if cfg.stage == 3 and cfg.use_discriminator:
            uv = torch.as_tensor(cond.uv_map if cond.uv_map is not None else np.zeros_like(self.dataset[fid].image),
                                 dtype=torch.float32)
            gen = torch.Generator().manual_seed(int(np.random.default_rng([cfg.seed, 99, it]).integers(2**31)))
            g_loss, d_loss = loss_cgan(model.discriminator, pred, gt, uv, self.augment, gen)
            terms["adv_g"] = g_loss
        return terms, d_loss

    def step(self) -> LossReport:
        cfg = self.cfg
        it = self.iteration
        ids = self.sample(it)
        weights = {"rgb": cfg.weights.rgb, "lpips": cfg.weights.lpips, "lmk": cfg.weights.lmk,
                   "adv_g": cfg.weights.adv}
        self.optimizer.zero_grad(set_to_none=True)
        if self.disc_optimizer is not None:
            self.disc_optimizer.zero_grad(set_to_none=True)
        sums: dict[str, torch.Tensor] = {}
        d_total = None
        for fid in ids:
            terms, d_loss = self.frame_losses(fid, it)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v / len(ids)
            if d_loss is not None:
                d_total = (d_total if d_total is not None else 0.0) + d_loss / len(ids)
        report, total = LossReport.from_terms(sums, {k: weights[k] for k in sums})
        # discriminator parameters only receive gradient from d_loss
        if self.disc_optimizer is not None:
            self.model.discriminator.requires_grad_(False)
        total.backward()
        if self.cfg.debug:
            self._assert_frozen()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_([p for g in self.optimizer.param_groups for p in g["params"]],
                                           cfg.grad_clip)
        factor = cfg.lr_decay ** (it / max(cfg.iterations - 1, 1))
        for group, base in zip(self.optimizer.param_groups, self._base_lrs):
            group["lr"] = base * factor
        self.optimizer.step()
        if d_total is not None:
            self.model.discriminator.requires_grad_(True)
            d_total.backward()
            self.disc_optimizer.step()
            report.terms["adv_d"] = float(d_total.detach())
        self.iteration += 1
        self.trace.append({"stage": cfg.stage, "iter": it, **report.terms})
        return report

    def _assert_frozen(self) -> None:
        for name, params in self.model.groups().items():
            if name in self.groups or name == "discriminator":
                continue
            for p in params:
                if p.grad is not None and bool(p.grad.abs().sum() > 0):
                    raise AssertionError(f"gradient reached frozen group '{name}' in stage {self.cfg.stage}")

    def run(self, until: int | None = None, trace_path: str | Path | None = None, log_every: int = 0) -> list[dict]:
        until = self.cfg.iterations if until is None else until
        fh = open(trace_path, "a") if trace_path else None
        try:
            while self.iteration < until:
                report = self.step()
                if fh is not None:
                    fh.write(json.dumps(self.trace[-1]) + "\n")
                if log_every and self.iteration % log_every == 0:
                    log.info("stage %d iter %d total %.5f", self.cfg.stage, self.iteration, report.terms["total"])
        finally:
            if fh is not None:
                fh.close()
        return self.trace

    def checkpoint(self) -> Checkpoint:
        tensors = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        opt_t, opt_groups = _optimizer_tensors(self.optimizer, "optim/main")
        tensors.update(opt_t)
        meta = {
            "stage": self.cfg.stage,
            "iteration": self.iteration,
            "complete": self.iteration >= self.cfg.iterations,
            "train_config": self.cfg.to_dict(),
            "model_config": asdict(self.model.cfg),
            "expression_dim": self.model.expression_dim,
            "train_ids": self.model.train_ids,
            "optimizer_groups": opt_groups,
            "trainable": list(self.groups),
        }
        if self.disc_optimizer is not None:
            d_t, d_groups = _optimizer_tensors(self.disc_optimizer, "optim/disc")
            tensors.update(d_t)
            meta["disc_optimizer_groups"] = d_groups
        return Checkpoint(tensors, meta)

    @classmethod
    def resume(cls, ckpt: Checkpoint, dataset: AvatarDataset, extractor=None) -> "StageTrainer":
        model = ckpt.restore_model(dataset)
        cfg = TrainConfig.from_dict(ckpt.meta["train_config"])
        trainer = cls(model, dataset, cfg, iteration=ckpt.iteration, extractor=extractor)
        _load_optimizer(trainer.optimizer, ckpt.tensors, "optim/main", ckpt.meta["optimizer_groups"])
        if trainer.disc_optimizer is not None and "disc_optimizer_groups" in ckpt.meta:
            _load_optimizer(trainer.disc_optimizer, ckpt.tensors, "optim/disc", ckpt.meta["disc_optimizer_groups"])
        return trainer


# -- stage entry points ----------------------------------------------------------------------


def _start(ckpt: Checkpoint | None, dataset: AvatarDataset, cfg: TrainConfig, expected_prev: int,
           extractor=None) -> StageTrainer:
    if ckpt is not None and ckpt.stage == cfg.stage and not ckpt.complete:
        return StageTrainer.resume(ckpt, dataset, extractor)
    if ckpt is None or ckpt.stage != expected_prev or not ckpt.complete:
        raise ValueError(f"stage {cfg.stage} needs a completed stage-{expected_prev} checkpoint")
    return StageTrainer(ckpt.restore_model(dataset), dataset, cfg, extractor=extractor)


def run_stage1(dataset: AvatarDataset, cfg: TrainConfig | None = None, model_cfg: ModelConfig | None = None,
               trace_path=None, extractor=None, ckpt: Checkpoint | None = None) -> Checkpoint:
    """Canonical cloud + triplane generator on the RGB (+ perceptual) loss."""
    cfg = cfg or TrainConfig(stage=1)
    if ckpt is not None:
        trainer = StageTrainer.resume(ckpt, dataset, extractor)
    else:
        trainer = StageTrainer(build_model(dataset, model_cfg), dataset, cfg, extractor=extractor)
    trainer.run(trace_path=trace_path)
    return trainer.checkpoint()


def run_stage2(dataset: AvatarDataset, cfg: TrainConfig | None, ckpt: Checkpoint, trace_path=None,
               extractor=None) -> Checkpoint:
    """Deformation stage: cloud frozen; adds the landmark-region loss."""
    cfg = cfg or TrainConfig(stage=2)
    trainer = _start(ckpt, dataset, cfg, 1, extractor)
    trainer.run(trace_path=trace_path)
    return trainer.checkpoint()


def initialise_generator(model: AvatarModel, dataset: AvatarDataset, cfg: TrainConfig, extractor=None):
    """Prepare the style generator for stage 3 according to ``cfg.generator_init``.

    Returns the PTI result when inversion ran, else ``None``.
    """
    mode = cfg.generator_init
    if mode == "none":
        raise GeneratorNotInitialized("generator_init='none' and the checkpoint holds no initialised generator")
    result = None
    if mode == "pti":
        views = list(cfg.pti_views) if cfg.pti_views else extreme_pose_views(dataset, model.train_ids)
        targets = [torch.as_tensor(dataset[v].image, dtype=torch.float32) for v in views]
        extractor = extractor or get_extractor()
        result = pti_invert(model.generator, targets, cfg.pti_steps1, cfg.pti_steps2,
                            perceptual=lambda a, b: loss_perceptual(a, b, extractor), perceptual_weight=0.1)
        model.w.copy_(result.w)
    elif mode == "random":
        model.w.copy_(model.generator.w_avg)
    else:
        from .generator import load_pretrained

        loaded = load_pretrained(mode)
        if loaded.config != model.generator.config:
            raise SchemaMismatch(f"generator config {loaded.config} differs from model {model.generator.config}")
        model.generator.load_state_dict(loaded.state_dict())
        model.w.copy_(model.generator.w_avg)
    model.generator_ready.fill_(1)
    return result


def run_stage3(dataset: AvatarDataset, cfg: TrainConfig | None, ckpt: Checkpoint, trace_path=None,
               extractor=None, pti_trace_path=None) -> Checkpoint:
    """Generator-based synthesis; the style generator stays frozen unless ``full_tune``."""
    cfg = cfg or TrainConfig(stage=3)
    if ckpt.stage == 3 and not ckpt.complete:
        trainer = StageTrainer.resume(ckpt, dataset, extractor)
    else:
        if ckpt.stage != 2 or not ckpt.complete:
            raise ValueError("stage 3 needs a completed stage-2 checkpoint")
        model = ckpt.restore_model(dataset)
        if int(model.generator_ready) == 0:
            result = initialise_generator(model, dataset, cfg, extractor)
            if result is not None and pti_trace_path is not None:
                write_trace(pti_trace_path, [{"phase": 1 if i < len(result.phase1_trace) else 2, "iter": i,
                                              "loss": v} for i, v in enumerate(result.trace)])
        trainer = StageTrainer(model, dataset, cfg, extractor=extractor)
    trainer.run(trace_path=trace_path)
    return trainer.checkpoint()


def write_trace(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_trace(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def train_all(dataset: AvatarDataset, preset: dict[int, TrainConfig], out_dir: str | Path | None = None,
              model_cfg: ModelConfig | None = None, stages: Sequence[int] = (1, 2, 3), ckpt: Checkpoint | None = None,
              extractor=None) -> dict[int, Checkpoint]:
    """Run the requested stages in order, saving ``out_dir/stage{n}`` checkpoints and JSONL traces."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results: dict[int, Checkpoint] = {}

    def trace(stage):
        if out is None:
            return None
        p = out / f"stage{stage}_trace.jsonl"
        p.unlink(missing_ok=True)
        return p

    for stage in stages:
        cfg = preset[stage]
        if stage == 1:
            ckpt = run_stage1(dataset, cfg, model_cfg, trace(1), extractor)
        elif stage == 2:
            ckpt = run_stage2(dataset, cfg, ckpt, trace(2), extractor)
        else:
            pti = out / "pti_trace.jsonl" if out is not None else None
            ckpt = run_stage3(dataset, cfg, ckpt, trace(3), extractor, pti)
        results[stage] = ckpt
        if out is not None:
            ckpt.save(out / f"stage{stage}")
    return results


# -- evaluation helpers ----------------------------------------------------------------------


@torch.no_grad()
def predict_frames(model: AvatarModel, dataset: AvatarDataset, ids: Sequence[int], stage: int,
                   injection: InjectionConfig | None = None) -> list[np.ndarray]:
    return [model.predict(dataset[i].conditioning, stage, injection).clamp(0, 1).numpy() for i in ids]


@torch.no_grad()
def region_l1(model: AvatarModel, dataset: AvatarDataset, ids: Sequence[int], region: str = "mouth",
              deform: bool = True) -> float:
    """Mean RoI-aligned L1 inside a landmark box of the splat render."""
    vals = []
    for i in ids:
        cond = dataset[i].conditioning
        pred = model.render(cond, deform=deform).rgb
        gt = torch.as_tensor(dataset[i].image, dtype=torch.float32)
        box = cond.boxes[region]
        vals.append(float((roi_align(pred, box) - roi_align(gt, box)).abs().mean()))
    return float(np.mean(vals))


def frozen_checksums(model: AvatarModel, groups: Iterable[str]) -> dict[str, str]:
    modules = {"cloud": model.cloud, "generator": model.generator, "triplane": model.triplane,
               "deformer": model.deformer, "encoder": model.encoder, "projections": model.projections,
               "latents": model.latents}
    return {g: checksum(modules[g]) for g in groups}
