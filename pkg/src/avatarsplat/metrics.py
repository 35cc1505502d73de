"""Image and landmark metrics plus Table-style reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
from scipy import ndimage

from .losses import FeatureExtractor, get_extractor, loss_perceptual

PSNR_CAP = 99.0


def _f64(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _f64(a), _f64(b)
    mse = float(np.mean((a - b) ** 2))
    if not np.isfinite(mse):
        return float("nan")
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range**2 / mse))


def ssim(a, b, data_range: float = 1.0, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-window SSIM (11 taps, sigma 1.5), averaged over channels and the border-cropped interior."""
    a, b = _f64(a), _f64(b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    truncate = 5.0 / sigma  # radius 5 -> 11 taps
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]

        def blur(img):
            return ndimage.gaussian_filter(img, sigma, truncate=truncate, mode="reflect")

        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        pad = 5 if min(s.shape) > 10 else 0
        scores.append(s[pad : s.shape[0] - pad, pad : s.shape[1] - pad].mean())
    return float(np.mean(scores))


def lpips(a, b, extractor: FeatureExtractor | None = None) -> float:
    extractor = extractor or get_extractor()
    ta = torch.as_tensor(_f64(a), dtype=torch.float32)
    tb = torch.as_tensor(_f64(b), dtype=torch.float32)
    with torch.no_grad():
        return float(loss_perceptual(ta, tb, extractor))


def f_lmd(pred_landmarks, gt_landmarks) -> float:
    """Mean Euclidean distance between corresponding (L, 2) landmark sets, in pixels."""
    p, g = _f64(pred_landmarks), _f64(gt_landmarks)
    if p.shape != g.shape:
        raise ValueError(f"landmark counts differ: {p.shape} vs {g.shape}")
    return float(np.mean(np.linalg.norm(p - g, axis=-1)))


def gradient_magnitude(img) -> np.ndarray:
    """``|dx| + |dy|`` from forward differences on the common (H-1, W-1) grid, per channel."""
    img = _f64(img)
    dx = np.abs(np.diff(img, axis=1))[:-1]
    dy = np.abs(np.diff(img, axis=0))[:, :-1]
    return dx + dy


def sharpness_difference(a, b) -> float:
    """Mean absolute difference between the gradient-magnitude maps of two images (lower is better)."""
    a, b = _f64(a), _f64(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(gradient_magnitude(a) - gradient_magnitude(b))))


class LandmarkProvider(Protocol):
    def __call__(self, image: np.ndarray) -> np.ndarray: ...


class DarkBlobLandmarks:
    """Landmarks for synthetic heads: centroids of dark pixels in the left-eye, right-eye and mouth regions.

    The head is located from the non-background mask; its bounding box is split
    into upper-left, upper-right and lower-centre search windows.
    """

    def __init__(self, background_threshold: float = 0.05, dark_threshold: float = 0.2):
        self.background_threshold = background_threshold
        self.dark_threshold = dark_threshold

    def __call__(self, image) -> np.ndarray:
        img = _f64(image)
        lum = img[..., :3].mean(axis=-1)
        fg = lum > self.background_threshold
        H, W = lum.shape
        if not fg.any():
            return np.full((3, 2), [W / 2, H / 2])
        ys, xs = np.nonzero(fg)
        x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
        filled = ndimage.binary_fill_holes(fg)
        dark = filled & (lum < self.dark_threshold)
        xm, ym = (x0 + x1) / 2, (y0 + y1) / 2
        windows = [
            (x0, xm, y0, ym + 0.1 * (y1 - y0)),
            (xm, x1, y0, ym + 0.1 * (y1 - y0)),
            (x0 + 0.2 * (x1 - x0), x1 - 0.2 * (x1 - x0), ym + 0.1 * (y1 - y0), y1),
        ]
        out = []
        gy, gx = np.mgrid[0:H, 0:W]
        for wx0, wx1, wy0, wy1 in windows:
            m = dark & (gx >= wx0) & (gx < wx1) & (gy >= wy0) & (gy < wy1)
            if m.any():
                out.append([gx[m].mean(), gy[m].mean()])
            else:
                out.append([(wx0 + wx1) / 2, (wy0 + wy1) / 2])
        return np.asarray(out)


@dataclass
class MetricReport:
    method: str = "Ours"
    dataset: str = "synthetic"
    flmd: float = float("nan")
    sd: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")
    lpips: float = float("nan")
    per_frame: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "dataset": self.dataset, "flmd": self.flmd, "sd": self.sd,
            "psnr": self.psnr, "ssim": self.ssim, "lpips": self.lpips,
            "sd_x0.1": self.sd * 0.1, "lpips_x100": self.lpips * 100.0, "per_frame": self.per_frame,
        }


def evaluate(preds: Sequence, gts: Sequence, metrics: Sequence[str] = ("psnr", "ssim", "lpips", "flmd", "sd"),
             extractor: FeatureExtractor | None = None, landmarks: LandmarkProvider | None = None,
             method: str = "Ours", dataset: str = "synthetic") -> MetricReport:
    if len(preds) != len(gts):
        raise ValueError(f"frame counts differ: {len(preds)} predictions vs {len(gts)} references")
    landmarks = landmarks or DarkBlobLandmarks()
    fns = {
        "psnr": psnr,
        "ssim": ssim,
        "lpips": lambda a, b: lpips(a, b, extractor),
        "sd": sharpness_difference,
        "flmd": lambda a, b: f_lmd(landmarks(a), landmarks(b)),
    }
    report = MetricReport(method=method, dataset=dataset)
    for name in metrics:
        if name not in fns:
            raise ValueError(f"unknown metric {name!r}")
        values = [fns[name](p, g) for p, g in zip(preds, gts)]
        report.per_frame[name] = values
        setattr(report, name, float(np.mean(values)) if values else float("nan"))
    return report


TABLE_COLUMNS = ("F-LMD↓", "SD↓", "PSNR↑", "LPIPS↓")


def format_table(reports: Sequence[MetricReport], scaled: bool = True) -> str:
    """Markdown table with F-LMD, SD, PSNR, LPIPS columns.

    ``scaled=True`` multiplies SD by 1e-1 and LPIPS by 1e2, the convention used
    for published comparisons.
    """
    lines = ["| Method | " + " | ".join(TABLE_COLUMNS) + " | SSIM↑ |", "|---" * (len(TABLE_COLUMNS) + 2) + "|"]
    for r in reports:
        sd = r.sd * 0.1 if scaled else r.sd
        lp = r.lpips * 100.0 if scaled else r.lpips
        lines.append(f"| {r.method} | {r.flmd:.2f} | {sd:.2f} | {r.psnr:.2f} | {lp:.2f} | {r.ssim:.3f} |")
    return "\n".join(lines) + "\n"


def write_report(reports: Sequence[MetricReport], json_path, md_path=None) -> None:
    with open(json_path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=1)
    if md_path is not None:
        with open(md_path, "w") as fh:
            fh.write(format_table(reports))
