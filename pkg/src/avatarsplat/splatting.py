"""Differentiable multi-channel Gaussian splatting.

Projection (3D covariance to screen-space conic) runs in torch autograd; the
per-pixel compositing runs in numba kernels wrapped by a custom autograd
function whose backward is analytic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import _composite
from .errors import BehindCamera
from .gaussians import GaussianCloud, covariances

NEAR = 0.01
COV2D_BLUR = 0.3
TILE = 16


@dataclass
class Camera:
    """Pinhole camera (OpenCV axes: x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be >= 1")
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("world_to_camera rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def with_pose(self, world_to_camera: np.ndarray) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, world_to_camera)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "w": self.width, "h": self.height, "w2c": self.world_to_camera.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["w"]), int(d["h"]), np.asarray(d["w2c"], dtype=np.float64))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target`` (y of image points down)."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ eye
    return M


@dataclass
class FeatureImage:
    """Rendered (H, W, C) feature map plus (H, W) accumulated opacity."""

    features: torch.Tensor
    alpha: torch.Tensor

    @property
    def rgb(self) -> torch.Tensor:
        return self.features[..., :3]

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.alpha.shape)


def project_gaussians(camera: Camera, means: torch.Tensor, covs: torch.Tensor):
    """Perspective projection with the local affine (EWA) approximation.

    Returns ``(mean2d (N,2), cov2d (N,2,2), depth (N,))``. ``cov2d`` already
    includes the ``0.3 px^2`` low-pass term. Points with depth <= NEAR are
    returned as-is; callers must cull them.
    """
    R = torch.as_tensor(camera.rotation, dtype=means.dtype)
    t = torch.as_tensor(camera.translation, dtype=means.dtype)
    p = means @ R.T + t
    x, y, z = p.unbind(-1)
    z_safe = torch.where(z > NEAR, z, torch.full_like(z, 1.0))
    mean2d = torch.stack([camera.fx * x / z_safe + camera.cx, camera.fy * y / z_safe + camera.cy], dim=-1)
    zeros = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([camera.fx / z_safe, zeros, -camera.fx * x / z_safe**2], dim=-1),
            torch.stack([zeros, camera.fy / z_safe, -camera.fy * y / z_safe**2], dim=-1),
        ],
        dim=-2,
    )
    T = J @ R
    cov2d = T @ covs @ T.transpose(-1, -2)
    cov2d = cov2d + COV2D_BLUR * torch.eye(2, dtype=means.dtype)
    return mean2d, cov2d, z


def project_gaussian(camera: Camera, mean: torch.Tensor, cov: torch.Tensor):
    """Single-Gaussian projection; raises :class:`BehindCamera` inside the near plane."""
    mean2d, cov2d, depth = project_gaussians(camera, mean.reshape(1, 3), cov.reshape(1, 3, 3))
    if not float(depth[0]) > NEAR:
        raise BehindCamera(f"depth {float(depth[0]):.4g} <= near plane {NEAR}")
    return mean2d[0], cov2d[0], depth[0]


@dataclass
class _Plan:
    entries: np.ndarray
    tile_start: np.ndarray
    tiles_x: int
    tile_w: int
    tile_h: int
    width: int
    height: int


def _screen_radius(cov2d: np.ndarray, opacity: np.ndarray) -> np.ndarray:
    """Radius beyond which ``opacity * G < 1/255``; NaN where the Gaussian never reaches the floor."""
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(255.0 * opacity)
    r = np.sqrt(2.0 * lam_max * np.maximum(log_ratio, 0.0))
    r[~(opacity >= _composite.ALPHA_FLOOR)] = np.nan
    return r


def build_plan(mean2d: np.ndarray, cov2d: np.ndarray, opacity: np.ndarray, depth: np.ndarray,
               width: int, height: int, tile_size: int | None = TILE) -> _Plan:
    """Depth-sort Gaussians (ties on index) and bin them into tiles.

    ``tile_size=None`` builds the reference plan: one tile spanning the image
    that lists every Gaussian, with no screen-space culling.
    """
    n = len(depth)
    order = np.lexsort((np.arange(n), depth)).astype(np.int64)
    if tile_size is None:
        return _Plan(order, np.array([0, n], dtype=np.int64), 1, width, height, width, height)

    r = _screen_radius(cov2d[order].astype(np.float64), opacity[order].astype(np.float64))
    m = mean2d[order].astype(np.float64)
    keep = np.isfinite(r)
    xmin = np.floor(m[:, 0] - r) - 1
    xmax = np.ceil(m[:, 0] + r) + 1
    ymin = np.floor(m[:, 1] - r) - 1
    ymax = np.ceil(m[:, 1] + r) + 1
    keep &= (xmax >= 0) & (ymax >= 0) & (xmin <= width - 1) & (ymin <= height - 1)
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    idx = np.flatnonzero(keep)
    tx0 = (np.clip(xmin[idx], 0, width - 1) // tile_size).astype(np.int64)
    tx1 = (np.clip(xmax[idx], 0, width - 1) // tile_size).astype(np.int64)
    ty0 = (np.clip(ymin[idx], 0, height - 1) // tile_size).astype(np.int64)
    ty1 = (np.clip(ymax[idx], 0, height - 1) // tile_size).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = tx0[owner] + local % nx[owner]
    tile_y = ty0[owner] + local // nx[owner]
    tile_id = tile_y * tiles_x + tile_x
    perm = np.argsort(tile_id, kind="stable")
    entries = order[idx[owner[perm]]]
    tile_start = np.searchsorted(tile_id[perm], np.arange(tiles_x * tiles_y + 1)).astype(np.int64)
    return _Plan(entries.astype(np.int64), tile_start, tiles_x, tile_size, tile_size, width, height)


class _CompositeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, opacity, features, plan: _Plan):
        args = [t.detach().contiguous().numpy() for t in (mean2d, conic, opacity, features)]
        out, trans = _composite.composite_forward(
            *args, plan.entries, plan.tile_start, plan.tiles_x, plan.tile_w, plan.tile_h, plan.width, plan.height
        )
        ctx.plan = plan
        ctx.arrays = args
        ctx.out = out
        ctx.trans = trans
        return torch.from_numpy(out), torch.from_numpy(1.0 - trans)

    @staticmethod
    def backward(ctx, grad_out, grad_alpha):
        plan = ctx.plan
        args = ctx.arrays
        dtype = args[3].dtype
        go = np.zeros_like(ctx.out) if grad_out is None else grad_out.contiguous().numpy().astype(dtype)
        ga = np.zeros_like(ctx.trans) if grad_alpha is None else grad_alpha.contiguous().numpy().astype(dtype)
        per_entry = _composite.composite_backward(
            *args, plan.entries, plan.tile_start, plan.tiles_x, plan.tile_w, plan.tile_h,
            plan.width, plan.height, ctx.out, ctx.trans, go, ga,
        )
        m, k, o, f = _composite.reduce_entries(plan.entries, args[0].shape[0], *per_entry)
        return torch.from_numpy(m), torch.from_numpy(k), torch.from_numpy(o), torch.from_numpy(f), None


def composite(mean2d, conic, opacity, features, plan: _Plan):
    """Differentiable compositing of already-projected Gaussians; returns ``(features, alpha)``."""
    return _CompositeFn.apply(mean2d, conic, opacity, features, plan)


def conic_from_cov2d(cov2d: torch.Tensor) -> torch.Tensor:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=-1)


def rasterize(cloud: GaussianCloud, camera: Camera, tile_size: int | None = TILE) -> FeatureImage:
    """Render ``cloud`` into an (H, W, C) feature image.

    Gaussians are composited front to back in ascending depth with ascending
    index as tie-break. ``tile_size=None`` renders with the all-pixels,
    all-Gaussians reference plan.
    """
    H, W = camera.height, camera.width
    C = cloud.features.shape[1]
    dtype = cloud.positions.dtype
    covs = covariances(cloud.rotations, cloud.log_scales)
    mean2d, cov2d, depth = project_gaussians(camera, cloud.positions, covs)
    valid = torch.nonzero(depth.detach() > NEAR).flatten()
    if valid.numel() == 0:
        # keep the graph connected so callers can always backpropagate
        zero = cloud.features.sum() * 0.0
        return FeatureImage(torch.zeros(H, W, C, dtype=dtype) + zero, torch.zeros(H, W, dtype=dtype) + zero)
    mean2d = mean2d.index_select(0, valid)
    cov2d = cov2d.index_select(0, valid)
    conic = conic_from_cov2d(cov2d)
    opacity = torch.sigmoid(cloud.opacity_logits[:, 0]).index_select(0, valid)
    features = cloud.features.index_select(0, valid)
    plan = build_plan(mean2d.detach().numpy(), cov2d.detach().numpy(), opacity.detach().numpy(),
                      depth.detach().index_select(0, valid).numpy(), W, H, tile_size)
    feats, alpha = composite(mean2d, conic, opacity, features, plan)
    return FeatureImage(feats, alpha)


def to_uint8(rgb) -> np.ndarray:
    arr = rgb.detach().cpu().numpy() if isinstance(rgb, torch.Tensor) else np.asarray(rgb)
    return (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(rgb, path: str | Path) -> None:
    """Write an (H, W, 3) image in [0, 1] as 8-bit PNG."""
    from PIL import Image

    Image.fromarray(to_uint8(rgb)[..., :3]).save(path)


def dump_raw(image: FeatureImage, path: str | Path) -> None:
    """Raw tensor dump (``features``, ``alpha``) as little-endian float32 NPZ."""
    np.savez(
        path,
        features=image.features.detach().numpy().astype("<f4"),
        alpha=image.alpha.detach().numpy().astype("<f4"),
    )


def orbit_camera(camera: Camera, yaw_degrees: float, center=(0.0, 0.0, 0.0)) -> Camera:
    """Rotate the camera about the vertical axis through ``center`` by ``yaw_degrees``."""
    theta = math.radians(yaw_degrees)
    c, s = math.cos(theta), math.sin(theta)
    Ry = np.array([[c, 0, s, 0], [0, 1, 0, 0], [-s, 0, c, 0], [0, 0, 0, 1]], dtype=np.float64)
    T = np.eye(4)
    T[:3, 3] = np.asarray(center, dtype=np.float64)
    Tinv = np.eye(4)
    Tinv[:3, 3] = -np.asarray(center, dtype=np.float64)
    # camera-to-world of the orbited camera = T Ry T^-1 c2w
    c2w = np.linalg.inv(camera.world_to_camera)
    return camera.with_pose(np.linalg.inv(T @ Ry @ Tinv @ c2w))
