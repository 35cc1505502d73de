"""Dataset ingestion, train/test splitting and the procedural synthetic head.

On-disk layout::

    root/frames/000000.png ...   RGB frames
    root/uv/000000.png ...       optional UV maps
    root/tracking.json           per-frame tracking records
    root/mesh.obj                canonical mesh
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .deformer import FrameConditioning
from .errors import BadBox, FrameCountMismatch, MissingTracking
from .gaussians import TriangleMesh, read_obj, write_obj
from .splatting import Camera, look_at

TRAIN_FRACTION = 0.8


@dataclass
class Frame:
    image: np.ndarray
    conditioning: FrameConditioning
    landmarks: np.ndarray | None = None

    @property
    def uv(self) -> np.ndarray | None:
        return self.conditioning.uv_map


@dataclass
class AvatarDataset:
    frames: list[Frame]
    mesh: TriangleMesh
    seed: int = 0
    train_fraction: float = TRAIN_FRACTION
    root: Path | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> Frame:
        return self.frames[i]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames[0].image.shape[:2]

    @property
    def expression_dim(self) -> int:
        return len(self.frames[0].conditioning.expression)

    def split(self) -> tuple[list[int], list[int]]:
        return split(self, self.train_fraction, self.seed)


def split(dataset: AvatarDataset, fraction: float = TRAIN_FRACTION, seed: int = 0,
          mode: str = "tail") -> tuple[list[int], list[int]]:
    """Frame indices for (train, test).

    ``mode="tail"`` holds out the last frames of the video; ``mode="random"``
    draws a seeded permutation instead.
    """
    n = len(dataset)
    n_train = int(round(fraction * n))
    if mode == "tail":
        ids = list(range(n))
    elif mode == "random":
        ids = [int(i) for i in np.random.default_rng(seed).permutation(n)]
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return sorted(ids[:n_train]), sorted(ids[n_train:])


# -- serialisation ---------------------------------------------------------------------------


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _write_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray((np.clip(arr, 0, 1) * 255.0 + 0.5).astype(np.uint8)).save(path)


def _check_box(name: str, box, frame: int, width: int, height: int) -> tuple[float, float, float, float]:
    if box is None or len(box) != 4:
        raise BadBox(f"frame {frame}: {name} box must have 4 numbers, got {box!r}")
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x1 > x0 and y1 > y0):
        raise BadBox(f"frame {frame}: {name} box {box} has non-positive area")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise BadBox(f"frame {frame}: {name} box {box} lies outside the {width}x{height} image")
    return (x0, y0, x1, y1)


def ingest(root: str | Path) -> AvatarDataset:
    """Load and validate a dataset directory."""
    root = Path(root)
    tracking_path = root / "tracking.json"
    if not tracking_path.exists():
        raise MissingTracking(f"{tracking_path} not found")
    records = json.loads(tracking_path.read_text())
    if isinstance(records, dict):
        meta = {k: v for k, v in records.items() if k != "frames"}
        records = records["frames"]
    else:
        meta = {}
    frame_files = sorted((root / "frames").glob("*.png"))
    if len(records) != len(frame_files):
        raise FrameCountMismatch(f"{len(records)} tracking records for {len(frame_files)} frames")
    records = sorted(records, key=lambda r: int(r["frame"]))
    ids = [int(r["frame"]) for r in records]
    if ids != list(range(len(ids))):
        raise FrameCountMismatch(f"frame ids are not contiguous from 0: {ids[:5]}...")
    mesh = read_obj(root / "mesh.obj")
    frames = []
    for rec, path in zip(records, frame_files):
        fid = int(rec["frame"])
        image = _read_png(path)
        H, W = image.shape[:2]
        uv_path = root / "uv" / path.name
        uv = _read_png(uv_path) if uv_path.exists() else None
        if uv is not None and uv.shape[:2] != (H, W):
            raise FrameCountMismatch(f"frame {fid}: uv map {uv.shape[:2]} does not match image {(H, W)}")
        cam = rec["camera"]
        camera = Camera(float(cam["fx"]), float(cam["fy"]), float(cam["cx"]), float(cam["cy"]), W, H,
                        np.asarray(cam["w2c"], dtype=np.float64))
        boxes = {k: _check_box(k, v, fid, W, H) for k, v in rec.get("boxes", {}).items()}
        cond = FrameConditioning(
            expression=rec["expression"],
            pose_quat=rec["pose"]["quat"],
            pose_trans=rec["pose"]["trans"],
            camera=camera,
            frame_id=fid,
            uv_map=uv,
            boxes=boxes,
        )
        lm = np.asarray(rec["landmarks"], dtype=np.float64) if "landmarks" in rec else None
        frames.append(Frame(image, cond, lm))
    return AvatarDataset(frames, mesh, seed=int(meta.get("seed", 0)), root=root, meta=meta)


def write_dataset(dataset: AvatarDataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    records = []
    for frame in dataset.frames:
        c = frame.conditioning
        name = f"{c.frame_id:06d}.png"
        _write_png(frame.image, root / "frames" / name)
        if c.uv_map is not None:
            (root / "uv").mkdir(exist_ok=True)
            _write_png(c.uv_map, root / "uv" / name)
        rec = {
            "frame": c.frame_id,
            "expression": c.expression.tolist(),
            "pose": {"quat": c.pose_quat.tolist(), "trans": c.pose_trans.tolist()},
            "camera": {"fx": c.camera.fx, "fy": c.camera.fy, "cx": c.camera.cx, "cy": c.camera.cy,
                       "w2c": c.camera.world_to_camera.reshape(-1).tolist()},
            "boxes": {k: list(v) for k, v in c.boxes.items()},
        }
        if frame.landmarks is not None:
            rec["landmarks"] = np.asarray(frame.landmarks).tolist()
        records.append(rec)
    (root / "tracking.json").write_text(json.dumps(records, indent=1))
    write_obj(dataset.mesh, root / "mesh.obj")
    return root


def datasets_equal(a: AvatarDataset, b: AvatarDataset) -> bool:
    if len(a) != len(b) or not np.array_equal(a.mesh.faces, b.mesh.faces):
        return False
    if not np.allclose(a.mesh.vertices, b.mesh.vertices, rtol=0, atol=1e-8):
        return False
    for fa, fb in zip(a.frames, b.frames):
        ca, cb = fa.conditioning, fb.conditioning
        if not np.array_equal(fa.image, fb.image):
            return False
        if (ca.uv_map is None) != (cb.uv_map is None) or (ca.uv_map is not None and not np.array_equal(ca.uv_map, cb.uv_map)):
            return False
        same = (
            np.array_equal(ca.expression, cb.expression) and np.array_equal(ca.pose_quat, cb.pose_quat)
            and np.array_equal(ca.pose_trans, cb.pose_trans) and ca.frame_id == cb.frame_id
            and ca.boxes == cb.boxes
            and np.array_equal(ca.camera.world_to_camera, cb.camera.world_to_camera)
        )
        if not same:
            return False
    return True


# -- synthetic head --------------------------------------------------------------------------

HEAD_AXES = np.array([0.75, 0.95, 0.8])
CAMERA_DISTANCE = 4.0
SKIN = np.array([0.85, 0.64, 0.52])
CAP = np.array([0.30, 0.55, 0.80])
EYE = np.array([0.08, 0.08, 0.12])
NOSE = np.array([0.80, 0.42, 0.38])
MOUTH = np.array([0.35, 0.05, 0.08])
EYE_CENTERS = ((-0.28, 0.2), (0.28, 0.2))
EYE_RADII = (0.13, 0.10)
MOUTH_Y = -0.38
MOUTH_HALF_WIDTH = 0.3
CAP_Y = 0.62


def mouth_height(e0: float) -> float:
    """Mouth-bar height (canonical units) as a function of expression coefficient 0."""
    return 0.03 + 0.22 * float(np.clip(e0, 0.0, 1.0))


def eye_height(e1: float) -> float:
    """Eye vertical radius; coefficient 1 closes the eyes."""
    return EYE_RADII[1] * (1.0 - 0.8 * float(np.clip(e1, 0.0, 1.0)))


LABELS = {"background": 0, "skin": 1, "cap": 2, "eye": 3, "nose": 4, "mouth": 5}


def _texture(p: np.ndarray, expression: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Colour and region label of canonical surface points (M, 3)."""
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    n = p / HEAD_AXES**2
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    shade = 0.6 + 0.4 * np.clip(n[:, 2] * 0.8 + n[:, 1] * 0.2, 0.0, 1.0)
    color = np.tile(SKIN, (len(p), 1))
    label = np.full(len(p), LABELS["skin"])
    front = z > 0
    cap = y > CAP_Y
    color[cap], label[cap] = CAP, LABELS["cap"]
    nose = front & (x**2 + y**2 < 0.07**2)
    color[nose], label[nose] = NOSE, LABELS["nose"]
    ry = eye_height(expression[1] if len(expression) > 1 else 0.0)
    for ex, ey in EYE_CENTERS:
        eye = front & (((x - ex) / EYE_RADII[0]) ** 2 + ((y - ey) / ry) ** 2 < 1.0)
        color[eye], label[eye] = EYE, LABELS["eye"]
    h = mouth_height(expression[0])
    mouth = front & (np.abs(x) < MOUTH_HALF_WIDTH) & (np.abs(y - MOUTH_Y) < h / 2)
    color[mouth], label[mouth] = MOUTH, LABELS["mouth"]
    return color * shade[:, None], label


def _quat_from_euler(yaw: float, pitch: float) -> np.ndarray:
    qy = np.array([math.cos(yaw / 2), 0.0, math.sin(yaw / 2), 0.0])
    qx = np.array([math.cos(pitch / 2), math.sin(pitch / 2), 0.0, 0.0])
    w1, x1, y1, z1 = qy
    w2, x2, y2, z2 = qx
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def _quat_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def default_camera(resolution: int) -> Camera:
    f = 1.6 * resolution
    c = (resolution - 1) / 2.0
    return Camera(f, f, c, c, resolution, resolution, look_at((0.0, 0.0, CAMERA_DISTANCE)))


def surface_point(x: float, y: float) -> np.ndarray:
    """Front-surface canonical point above (x, y)."""
    a, b, c = HEAD_AXES
    return np.array([x, y, c * math.sqrt(max(0.0, 1.0 - (x / a) ** 2 - (y / b) ** 2))])


def project_points(points: np.ndarray, pose_quat: np.ndarray, pose_trans: np.ndarray, camera: Camera) -> np.ndarray:
    world = points @ _quat_matrix(pose_quat).T + pose_trans
    cam = world @ camera.rotation.T + camera.translation
    return np.stack([camera.fx * cam[:, 0] / cam[:, 2] + camera.cx, camera.fy * cam[:, 1] / cam[:, 2] + camera.cy], 1)


def render_head(expression, pose_quat, pose_trans, camera: Camera, supersample: int = 3):
    """Ray-cast the synthetic head. Returns ``(rgb, uv, labels)``; labels/uv sampled at pixel centres."""
    H, W = camera.height, camera.width
    R = _quat_matrix(np.asarray(pose_quat))
    t = np.asarray(pose_trans, dtype=np.float64)
    Rc, tc = camera.rotation, camera.translation
    origin_w = -Rc.T @ tc
    origin = R.T @ (origin_w - t)

    def cast(us, vs):
        d_cam = np.stack([(us - camera.cx) / camera.fx, (vs - camera.cy) / camera.fy, np.ones_like(us)], -1)
        d = (d_cam @ Rc) @ R  # camera -> world -> canonical
        o_s = origin / HEAD_AXES
        d_s = d / HEAD_AXES
        qa = (d_s**2).sum(-1)
        qb = 2 * (d_s @ o_s)
        qc = o_s @ o_s - 1.0
        disc = qb * qb - 4 * qa * qc
        hit = disc > 0
        s = (-qb - np.sqrt(np.where(hit, disc, 0.0))) / (2 * qa)
        hit &= s > 0
        return origin + s[:, None] * d, hit

    S = supersample
    offsets = (np.arange(S) + 0.5) / S - 0.5
    gy, gx = np.mgrid[0:H, 0:W].astype(np.float64)
    rgb = np.zeros((H, W, 3))
    for oy in offsets:
        for ox in offsets:
            p, hit = cast((gx + ox).ravel(), (gy + oy).ravel())
            col = np.zeros((H * W, 3))
            if hit.any():
                col[hit] = _texture(p[hit], np.asarray(expression))[0]
            rgb += col.reshape(H, W, 3)
    rgb /= S * S

    p, hit = cast(gx.ravel(), gy.ravel())
    labels = np.zeros(H * W, dtype=np.int64)
    uv = np.zeros((H * W, 3))
    if hit.any():
        labels[hit] = _texture(p[hit], np.asarray(expression))[1]
        ph = p[hit]
        uv[hit, 0] = 0.5 + np.arctan2(ph[:, 0], ph[:, 2]) / (2 * np.pi)
        uv[hit, 1] = 0.5 + np.arcsin(np.clip(ph[:, 1] / HEAD_AXES[1], -1, 1)) / np.pi
        uv[hit, 2] = 1.0
    return rgb, uv.reshape(H, W, 3), labels.reshape(H, W)


def _box_around(points: np.ndarray, pad: float, W: int, H: int) -> tuple[float, float, float, float]:
    x0, y0 = np.floor(points.min(0) - pad)
    x1, y1 = np.ceil(points.max(0) + pad)
    return (float(max(x0, 0)), float(max(y0, 0)), float(min(x1, W)), float(min(y1, H)))


def landmark_points(expression) -> np.ndarray:
    """Canonical 3D landmarks: eye centres, nose tip, mouth corners, mouth top/bottom."""
    h = mouth_height(expression[0])
    pts = [surface_point(*c) for c in EYE_CENTERS]
    pts.append(surface_point(0.0, 0.0))
    pts += [surface_point(-MOUTH_HALF_WIDTH, MOUTH_Y), surface_point(MOUTH_HALF_WIDTH, MOUTH_Y)]
    pts += [surface_point(0.0, MOUTH_Y + h / 2), surface_point(0.0, MOUTH_Y - h / 2)]
    return np.asarray(pts)


def region_boxes(pose_quat, pose_trans, camera: Camera, pad: float = 2.0) -> dict[str, tuple]:
    """Pixel boxes enclosing both eyes (fully open) and the mouth (fully open)."""
    th = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    eye_pts = np.asarray([
        surface_point(ex + EYE_RADII[0] * math.cos(a), ey + EYE_RADII[1] * math.sin(a))
        for ex, ey in EYE_CENTERS for a in th
    ])
    hmax = mouth_height(1.0)
    mouth_pts = np.asarray([
        surface_point(sx * MOUTH_HALF_WIDTH, MOUTH_Y + sy * hmax / 2) for sx in (-1, 0, 1) for sy in (-1, 1)
    ])
    W, H = camera.width, camera.height
    return {
        "eyes": _box_around(project_points(eye_pts, pose_quat, pose_trans, camera), pad, W, H),
        "mouth": _box_around(project_points(mouth_pts, pose_quat, pose_trans, camera), pad, W, H),
    }


def ellipsoid_mesh(lat: int = 24, lon: int = 48) -> TriangleMesh:
    a, b, c = HEAD_AXES
    verts, uvs_v = [], []
    for i in range(lat + 1):
        theta = np.pi * i / lat  # from +y pole
        for j in range(lon + 1):
            phi = 2 * np.pi * j / lon
            verts.append([a * math.sin(theta) * math.sin(phi), b * math.cos(theta), c * math.sin(theta) * math.cos(phi)])
            uvs_v.append([j / lon, 1.0 - i / lat])
    faces = []
    for i in range(lat):
        for j in range(lon):
            v00 = i * (lon + 1) + j
            v01, v10, v11 = v00 + 1, v00 + lon + 1, v00 + lon + 2
            if i > 0:
                faces.append([v00, v10, v01])
            if i < lat - 1:
                faces.append([v01, v10, v11])
    verts = np.asarray(verts)
    faces = np.asarray(faces)
    uvs = np.asarray(uvs_v)[faces]
    return TriangleMesh(verts, faces, uvs)


@dataclass
class SynthSpec:
    frames: int = 20
    resolution: int = 64
    expression_dim: int = 5
    seed: int = 0
    supersample: int = 3
    yaw_degrees: float = 20.0
    pitch_degrees: float = 5.0


def synth_generate(spec: SynthSpec | dict | None = None, **overrides) -> AvatarDataset:
    """Procedural clip of a textured ellipsoid head.

    Expression coefficient 0 opens the mouth bar, coefficient 1 closes the eyes,
    the remaining coefficients are distractors with no visual effect. Head yaw
    orbits within ``+-yaw_degrees``. Frames and UV maps are quantised to 8 bits so
    a write/ingest round trip is lossless.
    """
    if spec is None:
        spec = SynthSpec(**overrides)
    elif isinstance(spec, dict):
        spec = SynthSpec(**{**spec, **overrides})
    if spec.frames < 2:
        raise ValueError("need at least 2 frames")
    if spec.expression_dim < 2:
        raise ValueError("expression_dim must be >= 2")
    rng = np.random.default_rng(spec.seed)
    phase = rng.uniform(0, 2 * np.pi, size=4)
    camera = default_camera(spec.resolution)
    frames = []
    for k in range(spec.frames):
        expr = np.zeros(spec.expression_dim)
        expr[0] = float(np.clip(0.5 + 0.75 * math.sin(2 * np.pi * k / 7.0 + phase[0]), 0.0, 1.0))
        expr[1] = max(0.0, math.cos(2 * np.pi * k / 9.0 + phase[1])) ** 4
        expr[2:] = rng.normal(0.0, 0.3, size=spec.expression_dim - 2)
        yaw = math.radians(spec.yaw_degrees) * math.sin(2 * np.pi * k / spec.frames + phase[2])
        pitch = math.radians(spec.pitch_degrees) * math.sin(4 * np.pi * k / spec.frames + phase[3])
        quat = _quat_from_euler(yaw, pitch)
        quat /= np.linalg.norm(quat)
        trans = np.zeros(3)
        rgb, uv, _ = render_head(expr, quat, trans, camera, spec.supersample)
        rgb = np.round(rgb * 255.0).astype(np.float32) / 255.0
        uv = np.round(uv * 255.0).astype(np.float32) / 255.0
        cond = FrameConditioning(expr, quat, trans, camera, k, uv, region_boxes(quat, trans, camera))
        lms = project_points(landmark_points(expr), quat, trans, camera)
        frames.append(Frame(rgb, cond, lms))
    return AvatarDataset(frames, ellipsoid_mesh(), seed=spec.seed, meta={"synthetic": spec.__dict__})
