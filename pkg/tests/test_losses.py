import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarsplat.errors import DegenerateBox, NoExtractor, ShapeMismatch
from avatarsplat.losses import (
    Augment,
    Discriminator,
    LossReport,
    RandomConvExtractor,
    RegionBox,
    get_extractor,
    loss_cgan,
    loss_landmark,
    loss_perceptual,
    loss_rgb,
    roi_align,
)

from conftest import finite_difference, rel_err


def test_rgb_examples(rng):
    a = torch.as_tensor(rng.uniform(size=(8, 8, 3)))
    assert float(loss_rgb(a, a)) == 0.0
    assert float(loss_rgb(torch.zeros(4, 4, 3), torch.ones(4, 4, 3))) == 1.0
    b = torch.as_tensor(rng.uniform(size=(8, 8, 3)))
    total = 0.0
    for y in range(8):
        for x in range(8):
            for c in range(3):
                total += abs(float(a[y, x, c]) - float(b[y, x, c]))
    assert abs(float(loss_rgb(a, b)) - total / 192) < 1e-10
    with pytest.raises(ShapeMismatch):
        loss_rgb(a, b[:4])


def test_rgb_uses_first_three_feature_channels(rng):
    feats = torch.as_tensor(rng.uniform(size=(8, 8, 32)))
    assert float(loss_rgb(feats, feats[..., :3])) == 0.0


def test_roi_align_integer_box_is_pixel_crop(rng):
    img = torch.as_tensor(rng.uniform(size=(64, 64, 3)))
    crop = roi_align(img, (10, 20, 42, 52), 32)
    assert float((crop - img[20:52, 10:42]).abs().max()) < 1e-6


def test_landmark_examples(rng):
    img = torch.as_tensor(rng.uniform(size=(64, 64, 3)))
    boxes = [RegionBox("eyes", (4, 4, 30, 20)), RegionBox("mouth", (20, 40, 44, 56))]
    assert float(loss_landmark(img, img, boxes)) == 0.0
    shifted = img.clone()
    shifted[40:56, 20:44] = torch.roll(img[40:56, 20:44], 3, dims=1)
    assert float(loss_landmark(shifted, img, [boxes[1]])) > 0
    assert float(loss_landmark(shifted, img, [boxes[0]])) == 0.0


def test_landmark_box_validation(rng):
    img = torch.zeros(16, 16, 3)
    with pytest.raises(DegenerateBox):
        loss_landmark(img, img, [RegionBox("mouth", (4, 4, 4, 8))])
    with pytest.raises(DegenerateBox):
        loss_landmark(img, img, [RegionBox("mouth", (4, 4, 20, 8))])
    with pytest.raises(DegenerateBox):
        loss_landmark(img, img, [])


def test_rgb_and_landmark_gradients(rng):
    gt = torch.as_tensor(rng.uniform(size=(8, 8, 3)))
    pred = torch.as_tensor(rng.uniform(size=(8, 8, 3)))
    boxes = [RegionBox("mouth", (1.3, 2.1, 6.7, 7.2))]
    for fn in (lambda p: loss_rgb(p, gt), lambda p: loss_landmark(p, gt, boxes, size=4)):
        x = pred.clone().requires_grad_(True)
        fn(x).backward()
        assert rel_err(x.grad, finite_difference(fn, pred.clone())) < 1e-4


@pytest.fixture(scope="module")
def extractor():
    return RandomConvExtractor(0).double()


def test_perceptual_identity_symmetry_monotone(extractor, rng):
    a = torch.as_tensor(rng.uniform(size=(32, 32, 3)))
    b = torch.as_tensor(rng.uniform(size=(32, 32, 3)))
    assert float(loss_perceptual(a, a, extractor)) == 0.0
    assert abs(float(loss_perceptual(a, b, extractor)) - float(loss_perceptual(b, a, extractor))) < 1e-9
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    fixture = torch.as_tensor(np.stack([xx, yy, 0.5 * (xx + yy)], -1))
    noise = torch.as_tensor(np.random.default_rng(7).uniform(-1, 1, size=(32, 32, 3)))
    d = [float(loss_perceptual(fixture + s * noise, fixture, extractor)) for s in (0.05, 0.1, 0.2)]
    assert d[0] < d[1] < d[2]


def test_perceptual_needs_extractor():
    with pytest.raises(NoExtractor):
        loss_perceptual(torch.zeros(8, 8, 3), torch.zeros(8, 8, 3), None)
    with pytest.raises(NoExtractor):
        get_extractor("no-such-net")


class _ConstantD(nn.Module):
    def forward(self, image, uv):
        return torch.zeros(image.shape[0])


def test_cgan_constant_logit_is_ln2(rng):
    pred, gt, uv = (torch.as_tensor(rng.uniform(size=(16, 16, 3))) for _ in range(3))
    g, d = loss_cgan(_ConstantD(), pred, gt, uv)
    assert abs(float(g) - math.log(2)) < 1e-6 and abs(float(d) - math.log(2)) < 1e-6


def test_cgan_discriminator_learns_trivial_fixture():
    torch.manual_seed(0)
    disc = Discriminator(width=8)
    opt = torch.optim.Adam(disc.parameters(), lr=1e-3)
    black, white, uv = torch.zeros(16, 16, 3), torch.ones(16, 16, 3), torch.full((16, 16, 3), 0.5)
    losses = []
    for _ in range(200):
        _, d = loss_cgan(disc, black, white, uv)
        opt.zero_grad()
        d.backward()
        opt.step()
        losses.append(d.item())
    assert losses[-1] < 0.5 * losses[0]


def test_cgan_generator_gradient_flows_only_through_g_loss():
    torch.manual_seed(0)
    disc = Discriminator(width=8)
    pred = torch.rand(16, 16, 3, requires_grad=True)
    g, d = loss_cgan(disc, pred, torch.rand(16, 16, 3), torch.rand(16, 16, 3))
    (d_grad,) = torch.autograd.grad(d, pred, allow_unused=True)
    assert d_grad is None
    g.backward()
    assert pred.grad is not None and float(pred.grad.abs().sum()) > 0


def test_cgan_deterministic(rng):
    torch.manual_seed(0)
    disc = Discriminator(width=8)
    pred, gt, uv = (torch.as_tensor(rng.uniform(size=(16, 16, 3)), dtype=torch.float32) for _ in range(3))
    assert torch.equal(loss_cgan(disc, pred, gt, uv)[1], loss_cgan(disc, pred, gt, uv)[1])
    aug = Augment(p=1.0)
    a = loss_cgan(disc, pred, gt, uv, aug, torch.Generator().manual_seed(3))[1]
    b = loss_cgan(disc, pred, gt, uv, aug, torch.Generator().manual_seed(3))[1]
    assert torch.equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_non_negative_and_zero_on_identity(seed):
    rng = np.random.default_rng(seed)
    a = torch.as_tensor(rng.uniform(size=(16, 16, 3)))
    b = torch.as_tensor(rng.uniform(size=(16, 16, 3)))
    box = [RegionBox("mouth", (2, 3, 12, 14))]
    ext = get_extractor("random")
    for fn in (loss_rgb, lambda p, q: loss_landmark(p, q, box), lambda p, q: loss_perceptual(p.float(), q.float(), ext)):
        assert float(fn(a, b)) >= 0
        assert float(fn(a, a)) == 0.0


def test_loss_report_weighted_total():
    report, total = LossReport.from_terms({"rgb": torch.tensor(0.5), "lmk": torch.tensor(2.0)}, {"rgb": 1.0, "lmk": 0.5})
    assert float(total) == 1.5
    assert report.weighted_total() == 1.5 and report.terms["total"] == 1.5
