import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from avatarsplat.losses import get_extractor
from avatarsplat.metrics import (
    DarkBlobLandmarks,
    MetricReport,
    evaluate,
    f_lmd,
    format_table,
    lpips,
    psnr,
    sharpness_difference,
    ssim,
    write_report,
)


def test_psnr_examples(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert psnr(a, a) == 99.0
    b = np.full((10, 10), 0.5)
    assert abs(psnr(b, b + 0.1) - 20.0) < 1e-9
    assert np.isnan(psnr(a, np.full_like(a, np.nan)))


def test_ssim_examples(rng):
    a = rng.uniform(size=(32, 32, 3))
    assert abs(ssim(a, a) - 1.0) < 1e-12
    b = rng.uniform(size=(32, 32, 3))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    checker = (np.indices((32, 32)).sum(0) % 2).astype(float)
    assert ssim(checker, 1 - checker) < 0.05


def test_ssim_matches_skimage(rng):
    for _ in range(5):
        a = rng.uniform(size=(40, 48, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, channel_axis=-1)
        assert abs(ssim(a, b) - ref) < 1e-10


def test_lpips_identity_and_noise_monotone():
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    img = np.stack([xx, yy, xx * yy], -1)
    noise = np.random.default_rng(0).uniform(-1, 1, size=img.shape)
    ext = get_extractor("random")
    assert lpips(img, img, ext) == 0.0
    d = [lpips(img + s * noise, img, ext) for s in (0.05, 0.1, 0.2)]
    assert d[0] < d[1] < d[2]


def test_flmd_examples(rng):
    pts = rng.uniform(0, 64, size=(7, 2))
    assert f_lmd(pts, pts) == 0.0
    assert abs(f_lmd(pts + [3.0, 4.0], pts) - 5.0) < 1e-12
    other = rng.uniform(0, 64, size=(7, 2))
    ref = sum(((pts[i, 0] - other[i, 0]) ** 2 + (pts[i, 1] - other[i, 1]) ** 2) ** 0.5 for i in range(7)) / 7
    assert abs(f_lmd(pts, other) - ref) < 1e-10
    with pytest.raises(ValueError):
        f_lmd(pts, pts[:3])


def test_sharpness_difference_examples(rng):
    from scipy.ndimage import uniform_filter

    edge = np.zeros((32, 32))
    edge[:, 16:] = 1.0
    blurred = uniform_filter(edge, 5, mode="nearest")
    assert sharpness_difference(edge, edge) == 0.0
    assert sharpness_difference(edge, blurred) > 0
    assert sharpness_difference(np.full((8, 8), 0.2), np.full((8, 8), 0.9)) == 0.0
    a, b = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    ga = np.abs(a[:-1, 1:] - a[:-1, :-1]) + np.abs(a[1:, :-1] - a[:-1, :-1])
    gb = np.abs(b[:-1, 1:] - b[:-1, :-1]) + np.abs(b[1:, :-1] - b[:-1, :-1])
    assert abs(sharpness_difference(a, b) - np.abs(ga - gb).mean()) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    for fn in (psnr, ssim, sharpness_difference):
        assert abs(fn(a, b) - fn(b, a)) < 1e-9
    p, q = rng.uniform(size=(5, 2)), rng.uniform(size=(5, 2))
    assert abs(f_lmd(p, q) - f_lmd(q, p)) < 1e-9


def test_dark_blob_landmarks_track_synthetic_features(small_dataset):
    provider = DarkBlobLandmarks()
    for frame in small_dataset.frames:
        pts = provider(frame.image)
        assert pts.shape == (3, 2)
        eyes, mouth = frame.conditioning.boxes["eyes"], frame.conditioning.boxes["mouth"]
        assert eyes[0] <= pts[0, 0] <= eyes[2] and eyes[1] - 4 <= pts[0, 1] <= eyes[3] + 4
        assert mouth[0] <= pts[2, 0] <= mouth[2] and mouth[1] - 4 <= pts[2, 1] <= mouth[3] + 4


def test_evaluate_self_and_report(tmp_path, small_dataset):
    imgs = [f.image for f in small_dataset.frames[:3]]
    report = evaluate(imgs, imgs, extractor=get_extractor("random"))
    assert report.psnr == 99.0 and abs(report.ssim - 1) < 1e-12
    assert report.lpips == 0.0 and report.sd == 0.0 and report.flmd == 0.0
    assert len(report.per_frame["psnr"]) == 3
    with pytest.raises(ValueError):
        evaluate(imgs, imgs[:2])
    with pytest.raises(ValueError):
        evaluate(imgs, imgs, metrics=("fid",))
    write_report([report], tmp_path / "r.json", tmp_path / "r.md")
    assert json.loads((tmp_path / "r.json").read_text())[0]["psnr"] == 99.0


def test_table_formatting():
    row = MetricReport(method="Ours", dataset="A", flmd=2.42, sd=3.38, psnr=34.43, ssim=0.9, lpips=0.1314)
    table = format_table([row])
    lines = table.strip().splitlines()
    assert lines[0].startswith("| Method | F-LMD↓ | SD↓ | PSNR↑ | LPIPS↓")
    assert lines[2] == "| Ours | 2.42 | 0.34 | 34.43 | 13.14 | 0.900 |"
    assert "| 3.38 |" in format_table([row], scaled=False)
