"""Attention-conditioned deformation of canonical Gaussians.

Per-Gaussian triplane features attend over per-frame condition tokens
(one per expression coefficient plus one head-pose token), pass through a
residual MLP, and a zero-initialised multi-head MLP predicts offsets for
position, rotation, log-scale and feature channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch
from .gaussians import GaussianCloud, normalize_quaternions, quaternion_multiply, quaternion_to_matrix

if TYPE_CHECKING:
    from .splatting import Camera


@dataclass
class FrameConditioning:
    """Tracking data for one frame.

    ``pose_quat`` is ``(w, x, y, z)``; boxes are ``(x0, y0, x1, y1)`` in pixels.
    """

    expression: np.ndarray
    pose_quat: np.ndarray
    pose_trans: np.ndarray
    camera: Camera
    frame_id: int
    uv_map: np.ndarray | None = None
    boxes: dict[str, tuple[float, float, float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.expression = np.asarray(self.expression, dtype=np.float64).reshape(-1)
        self.pose_quat = np.asarray(self.pose_quat, dtype=np.float64).reshape(4)
        self.pose_trans = np.asarray(self.pose_trans, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.expression)):
            raise ValueError("expression must be finite")
        if abs(np.linalg.norm(self.pose_quat) - 1.0) > 1e-6:
            raise ValueError("pose quaternion must be unit norm")


@dataclass
class DeformationOutput:
    d_position: torch.Tensor
    d_rotation: torch.Tensor
    d_log_scale: torch.Tensor
    d_feature: torch.Tensor

    @classmethod
    def zeros(cls, n: int, feature_dim: int, dtype=torch.float32) -> "DeformationOutput":
        return cls(torch.zeros(n, 3, dtype=dtype), torch.zeros(n, 4, dtype=dtype),
                   torch.zeros(n, 3, dtype=dtype), torch.zeros(n, feature_dim, dtype=dtype))


class ConditionTokens(nn.Module):
    """Expression coefficient k -> ``coeff_k * embedding_k``; pose -> linear(quat || trans)."""

    def __init__(self, expression_dim: int, model_dim: int = 128):
        super().__init__()
        self.expression_embedding = nn.Parameter(torch.randn(expression_dim, model_dim) / model_dim**0.5)
        self.pose = nn.Linear(7, model_dim)

    def forward(self, expression: torch.Tensor, pose_quat: torch.Tensor, pose_trans: torch.Tensor) -> torch.Tensor:
        expr_tokens = expression[:, None] * self.expression_embedding
        pose_token = self.pose(torch.cat([pose_quat, pose_trans]))[None]
        return torch.cat([expr_tokens, pose_token], dim=0)


class CrossAttention(nn.Module):
    """Multi-head attention, queries from Gaussians, keys/values from condition tokens, with skip."""

    def __init__(self, model_dim: int = 128, heads: int = 4):
        super().__init__()
        if model_dim % heads:
            raise ValueError("model_dim must be divisible by heads")
        self.heads = heads
        self.q = nn.Linear(model_dim, model_dim)
        self.k = nn.Linear(model_dim, model_dim)
        self.v = nn.Linear(model_dim, model_dim)
        self.out = nn.Linear(model_dim, model_dim)

    def forward(self, feats: torch.Tensor, tokens: torch.Tensor, return_weights: bool = False):
        M, D = feats.shape
        K = tokens.shape[0]
        dh = D // self.heads
        q = self.q(feats).reshape(M, self.heads, dh).transpose(0, 1)
        k = self.k(tokens).reshape(K, self.heads, dh).transpose(0, 1)
        v = self.v(tokens).reshape(K, self.heads, dh).transpose(0, 1)
        weights = torch.softmax(q @ k.transpose(-1, -2) / dh**0.5, dim=-1)  # (heads, M, K)
        attended = (weights @ v).transpose(0, 1).reshape(M, D)
        result = self.out(attended) + feats
        return (result, weights) if return_weights else result


class FeedForward(nn.Module):
    def __init__(self, model_dim: int = 128, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * model_dim
        self.fc1 = nn.Linear(model_dim, hidden)
        self.fc2 = nn.Linear(hidden, model_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x))) + x


class DeformHead(nn.Module):
    """Shared trunk with four zero-initialised output heads."""

    def __init__(self, model_dim: int = 128, feature_dim: int = 32, hidden: int = 128):
        super().__init__()
        self.trunk = nn.Sequential(nn.Linear(model_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU())
        self.position = nn.Linear(hidden, 3)
        self.rotation = nn.Linear(hidden, 4)
        self.log_scale = nn.Linear(hidden, 3)
        self.feature = nn.Linear(hidden, feature_dim)
        for head in (self.position, self.rotation, self.log_scale, self.feature):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, z: torch.Tensor) -> DeformationOutput:
        h = self.trunk(z)
        return DeformationOutput(self.position(h), self.rotation(h), self.log_scale(h), self.feature(h))


class ConcatConditioner(nn.Module):
    """Attention-free baseline: MLP over per-Gaussian feature concatenated with the flattened condition."""

    def __init__(self, model_dim: int, expression_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(model_dim + expression_dim + 7, model_dim), nn.GELU(),
                                 nn.Linear(model_dim, model_dim))

    def forward(self, feats, expression, pose_quat, pose_trans):
        cond = torch.cat([expression, pose_quat, pose_trans]).expand(feats.shape[0], -1)
        return self.net(torch.cat([feats, cond], dim=-1)) + feats


class Deformer(nn.Module):
    """Triplane features -> (tokens, cross-attention, FFN) -> deformation offsets.

    ``use_attention=False`` swaps cross-attention for :class:`ConcatConditioner`.
    ``input_dim`` is the triplane feature width (3 * F_p); when ``embed_count`` is
    given the deformer ignores its input features and uses a learned per-Gaussian
    embedding instead (no-triplane ablation).
    """

    def __init__(self, input_dim: int, expression_dim: int, model_dim: int = 128, heads: int = 4,
                 feature_dim: int = 32, use_attention: bool = True, embed_count: int | None = None):
        super().__init__()
        self.use_attention = use_attention
        self.embed = nn.Linear(input_dim, model_dim)
        self.gaussian_embedding = (
            nn.Parameter(torch.randn(embed_count, model_dim) * 0.1) if embed_count is not None else None
        )
        self.tokens = ConditionTokens(expression_dim, model_dim)
        if use_attention:
            self.attention = CrossAttention(model_dim, heads)
        else:
            self.concat = ConcatConditioner(model_dim, expression_dim)
        self.ffn = FeedForward(model_dim)
        self.head = DeformHead(model_dim, feature_dim)

    def forward(self, triplane_features: torch.Tensor, expression: torch.Tensor, pose_quat: torch.Tensor,
                pose_trans: torch.Tensor) -> DeformationOutput:
        if self.gaussian_embedding is not None:
            f = self.gaussian_embedding
        else:
            f = self.embed(triplane_features)
        if self.use_attention:
            f = self.attention(f, self.tokens(expression, pose_quat, pose_trans))
        else:
            f = self.concat(f, expression, pose_quat, pose_trans)
        return self.head(self.ffn(f))


def apply_deformation(cloud: GaussianCloud, d: DeformationOutput, pose_quat: torch.Tensor,
                      pose_trans: torch.Tensor) -> GaussianCloud:
    """Offsets in canonical space, then the rigid head pose.

    ``mu' = R (mu + dmu) + t``; ``r' = q_pose * normalize(r + dr)``;
    ``log_s' = log_s + ds``; ``f' = f + dc``; opacity unchanged.
    """
    n = len(cloud)
    shapes = {
        "d_position": (n, 3), "d_rotation": (n, 4), "d_log_scale": (n, 3),
        "d_feature": (n, cloud.features.shape[1]),
    }
    for name, shape in shapes.items():
        if tuple(getattr(d, name).shape) != shape:
            raise ShapeMismatch(f"{name}: {tuple(getattr(d, name).shape)} != {shape}")
    dtype = cloud.positions.dtype
    q = pose_quat.to(dtype)
    R = quaternion_to_matrix(q)
    positions = (cloud.positions + d.d_position) @ R.T + pose_trans.to(dtype)
    rotations = quaternion_multiply(q.expand(n, 4), normalize_quaternions(cloud.rotations + d.d_rotation))
    return GaussianCloud(
        positions=positions,
        rotations=rotations,
        log_scales=cloud.log_scales + d.d_log_scale,
        opacity_logits=cloud.opacity_logits,
        features=cloud.features + d.d_feature,
    )
