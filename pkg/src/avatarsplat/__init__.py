"""Deformable triplane-Gaussian head avatars rendered through a style generator."""

from .data import AvatarDataset, SynthSpec, ingest, split, synth_generate, write_dataset
from .deformer import Deformer, FrameConditioning, apply_deformation
from .gaussians import GaussianCloud, TriangleMesh, init_from_mesh, read_obj
from .generator import InjectionConfig, PriorEncoder, StyleGenerator, pti_invert, synthesize
from .metrics import evaluate, format_table, psnr, ssim
from .splatting import Camera, FeatureImage, rasterize
from .trainer import ModelConfig, TrainConfig, desk_preset, paper_preset, run_stage1, run_stage2, run_stage3
from .triplane import TriplaneGenerator, TriplaneSet, query

__version__ = "0.1.0"

__all__ = [
    "AvatarDataset", "Camera", "Deformer", "FeatureImage", "FrameConditioning", "GaussianCloud",
    "InjectionConfig", "ModelConfig", "PriorEncoder", "StyleGenerator", "SynthSpec", "TrainConfig",
    "TriangleMesh", "TriplaneGenerator", "TriplaneSet", "apply_deformation", "desk_preset", "evaluate",
    "format_table", "ingest", "init_from_mesh", "paper_preset", "psnr", "pti_invert", "query", "rasterize",
    "read_obj", "run_stage1", "run_stage2", "run_stage3", "split", "ssim", "synth_generate", "synthesize",
    "write_dataset",
]
