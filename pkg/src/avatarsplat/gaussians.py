"""Canonical Gaussian cloud: container, mesh-surface initialisation, covariance."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import tensorstore
from .errors import AllFacesDegenerate, ShapeMismatch

FEATURE_DIM = 32
RGB = slice(0, 3)


@dataclass
class TriangleMesh:
    """Indexed triangle mesh; ``uvs`` holds per-corner texture coords (F, 3, 2) when present."""

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        f = self.faces
        repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if repeated.any():
            raise ValueError(f"face {int(np.flatnonzero(repeated)[0])} references fewer than 3 distinct vertices")
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(len(self.faces), 3, 2)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def read_obj(path: str | Path) -> TriangleMesh:
    """Parse a Wavefront OBJ (``v``, ``vt``, ``f``); polygons are fan-triangulated."""
    verts, tex, faces, face_uv = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            tex.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            corners = []
            for token in parts[1:]:
                idx = token.split("/")
                vi = int(idx[0])
                ti = int(idx[1]) if len(idx) > 1 and idx[1] else None
                vi = vi - 1 if vi > 0 else len(verts) + vi
                if ti is not None:
                    ti = ti - 1 if ti > 0 else len(tex) + ti
                corners.append((vi, ti))
            for k in range(1, len(corners) - 1):
                tri = [corners[0], corners[k], corners[k + 1]]
                faces.append([c[0] for c in tri])
                face_uv.append([c[1] for c in tri])
    uvs = None
    if tex and all(t is not None for tri in face_uv for t in tri):
        tex_arr = np.asarray(tex)
        uvs = tex_arr[np.asarray(face_uv)]
    return TriangleMesh(np.asarray(verts), np.asarray(faces), uvs)


def write_obj(mesh: TriangleMesh, path: str | Path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if mesh.uvs is not None:
        lines += [f"vt {u:.9g} {v:.9g}" for u, v in mesh.uvs.reshape(-1, 2)]
        for i, (a, b, c) in enumerate(mesh.faces):
            t = 3 * i + 1
            lines.append(f"f {a + 1}/{t} {b + 1}/{t + 1} {c + 1}/{t + 2}")
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class GaussianCloud:
    """Per-point Gaussian parameters, all sharing leading dimension N.

    Attributes:
        positions: (N, 3) centres in world units.
        rotations: (N, 4) quaternions ``(w, x, y, z)``.
        log_scales: (N, 3) log of per-axis standard deviation.
        opacity_logits: (N, 1) pre-sigmoid opacity.
        features: (N, C) feature vectors; the first three channels are colour.
    """

    positions: torch.Tensor
    rotations: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    features: torch.Tensor

    def __post_init__(self):
        n = self.positions.shape[0]
        if n < 1:
            raise ShapeMismatch("cloud must hold at least one Gaussian")
        expected = {"positions": 3, "rotations": 4, "log_scales": 3, "opacity_logits": 1}
        for name, width in expected.items():
            t = getattr(self, name)
            if t.ndim != 2 or t.shape != (n, width):
                raise ShapeMismatch(f"{name} has shape {tuple(t.shape)}, expected ({n}, {width})")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ShapeMismatch(f"features has shape {tuple(self.features.shape)}, expected ({n}, C)")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def colors(self) -> torch.Tensor:
        return self.features[:, RGB]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return GaussianCloud(**{k: v.to(dtype) for k, v in self.tensors().items()})

    def detach(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.detach() for k, v in self.tensors().items()})

    def save(self, path: str | Path) -> None:
        tensorstore.save(path, {f"cloud/{k}": v for k, v in self.tensors().items()}, {"kind": "gaussian_cloud"})

    @classmethod
    def load(cls, path: str | Path) -> "GaussianCloud":
        tensors, _ = tensorstore.load(path)
        return cls(**{f.name: tensors[f"cloud/{f.name}"] for f in fields(cls)})


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4) in ``(w, x, y, z)`` order."""
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product ``a * b`` (rotation ``b`` applied first)."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def normalize_quaternions(q: torch.Tensor) -> torch.Tensor:
    norm = q.norm(dim=-1, keepdim=True)
    identity = torch.zeros_like(q)
    identity[..., 0] = 1.0
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    return torch.where(norm > 0, q / safe, identity)


def normalize_rotations(cloud: GaussianCloud) -> GaussianCloud:
    """Unit-normalise every quaternion; zero quaternions become the identity."""
    return replace(cloud, rotations=normalize_quaternions(cloud.rotations))


def covariances(rotations: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
    """Batched ``R diag(s^2) R^T`` for (N, 4) quaternions and (N, 3) log-scales."""
    R = quaternion_to_matrix(normalize_quaternions(rotations))
    M = R * torch.exp(log_scales)[..., None, :]
    return M @ M.transpose(-1, -2)


def covariance(cloud: GaussianCloud, index: int) -> torch.Tensor:
    return covariances(cloud.rotations[index : index + 1], cloud.log_scales[index : index + 1])[0]


def init_from_mesh(
    mesh: TriangleMesh,
    n: int,
    seed: int = 0,
    feature_dim: int = FEATURE_DIM,
    dtype: torch.dtype = torch.float32,
) -> GaussianCloud:
    """Sample ``n`` Gaussians area-proportionally on the mesh surface.

    Zero-area faces are never sampled. Rotations start at identity, opacity at 0.5,
    colour channels at 0.5 grey with the remaining feature channels zero, and every
    axis scale at half the mean nearest-neighbour spacing of the samples.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise AllFacesDegenerate("total mesh area is zero")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    corners = mesh.vertices[mesh.faces[face_idx]]  # (n, 3, 3)
    points = np.einsum("nk,nkd->nd", bary, corners)

    if n > 1:
        dist, _ = cKDTree(points).query(points, k=2)
        spacing = float(np.mean(dist[:, 1]))
    else:
        spacing = float(np.sqrt(total))
    spacing = max(spacing, 1e-6)

    features = torch.zeros(n, feature_dim, dtype=dtype)
    features[:, RGB] = 0.5
    rotations = torch.zeros(n, 4, dtype=dtype)
    rotations[:, 0] = 1.0
    return GaussianCloud(
        positions=torch.as_tensor(points, dtype=dtype),
        rotations=rotations,
        log_scales=torch.full((n, 3), float(np.log(0.5 * spacing)), dtype=dtype),
        opacity_logits=torch.zeros(n, 1, dtype=dtype),
        features=features,
    )


def init_random(bounds_min, bounds_max, n: int, seed: int = 0, feature_dim: int = FEATURE_DIM,
                dtype: torch.dtype = torch.float32) -> GaussianCloud:
    """Uniform-in-box initialisation, used by the no-mesh-init ablation."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(bounds_min, dtype=np.float64), np.asarray(bounds_max, dtype=np.float64)
    points = lo + (hi - lo) * rng.random((n, 3))
    spacing = float(np.prod(hi - lo) / n) ** (1.0 / 3.0)
    features = torch.zeros(n, feature_dim, dtype=dtype)
    features[:, RGB] = 0.5
    rotations = torch.zeros(n, 4, dtype=dtype)
    rotations[:, 0] = 1.0
    return GaussianCloud(
        positions=torch.as_tensor(points, dtype=dtype),
        rotations=rotations,
        log_scales=torch.full((n, 3), float(np.log(0.5 * spacing)), dtype=dtype),
        opacity_logits=torch.zeros(n, 1, dtype=dtype),
        features=features,
    )
