import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarsplat.errors import NonFiniteLatent
from avatarsplat.triplane import (
    TemporalLatentTable,
    TriplaneGenerator,
    TriplaneSet,
    bounds_from_points,
    generate_planes,
    project,
    query,
)

from conftest import finite_difference, rel_err

LO = torch.tensor([-1.0, -2.0, 0.5], dtype=torch.float64)
HI = torch.tensor([1.0, 2.0, 1.5], dtype=torch.float64)


def _set(rng, channels=4, res=8):
    return TriplaneSet(torch.as_tensor(rng.normal(size=(3, channels, res, res))), LO, HI)


def scalar_bilinear(plane, u, v):
    R = plane.shape[-1]
    gu, gv = u * (R - 1), v * (R - 1)
    i, j = min(int(np.floor(gu)), R - 2), min(int(np.floor(gv)), R - 2)
    a, b = gu - i, gv - j
    w00, w10, w01, w11 = plane[:, i, j], plane[:, i + 1, j], plane[:, i, j + 1], plane[:, i + 1, j + 1]
    return w00 * (1 - a) * (1 - b) + w10 * a * (1 - b) + w01 * (1 - a) * b + w11 * a * b


def test_query_matches_scalar_formula(rng):
    ts = _set(rng)
    pts = torch.as_tensor(rng.uniform(-0.2, 1.2, size=(200, 3))) * (HI - LO) + LO
    got = query(ts, pts).numpy()
    planes = ts.planes.numpy()
    for m, p in enumerate(pts.numpy()):
        unit = np.clip((p - LO.numpy()) / (HI - LO).numpy(), 0, 1)
        ref = np.concatenate([scalar_bilinear(planes[k], unit[a], unit[b])
                              for k, (a, b) in enumerate(((0, 1), (0, 2), (1, 2)))])
        assert np.abs(got[m] - ref).max() < 1e-10


def test_project_examples():
    coords = project(torch.stack([LO, (LO + HI) / 2, HI + torch.tensor([5.0, 0, 0], dtype=torch.float64)]), LO, HI)
    assert torch.equal(coords[0], torch.zeros(3, 2, dtype=torch.float64))
    assert torch.allclose(coords[1], torch.full((3, 2), 0.5, dtype=torch.float64))
    assert coords[2, 0, 0] == 1.0 and coords[2, 1, 0] == 1.0


def test_grid_node_and_cell_centre(rng):
    ts = _set(rng, res=5)
    i, j, k = 1, 3, 2
    unit = torch.tensor([i / 4, j / 4, k / 4], dtype=torch.float64)
    f = query(ts, (LO + unit * (HI - LO))[None])[0].reshape(3, -1)
    assert torch.equal(f[0], ts.planes[0, :, i, j])
    assert torch.equal(f[1], ts.planes[1, :, i, k])
    assert torch.equal(f[2], ts.planes[2, :, j, k])
    unit = torch.tensor([1.5 / 4, 2.5 / 4, 0.5 / 4], dtype=torch.float64)
    f = query(ts, (LO + unit * (HI - LO))[None])[0].reshape(3, -1)
    assert torch.allclose(f[0], ts.planes[0, :, 1:3, 2:4].mean(dim=(1, 2)), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_query_linear_in_planes(a, b, seed):
    rng = np.random.default_rng(seed)
    p1, p2 = _set(rng), _set(rng)
    pts = torch.as_tensor(rng.uniform(-1, 2, size=(16, 3)))
    mix = TriplaneSet(a * p1.planes + b * p2.planes, LO, HI)
    assert torch.allclose(query(mix, pts), a * query(p1, pts) + b * query(p2, pts), atol=1e-8)


def test_position_gradient_matches_finite_differences(rng):
    ts = _set(rng)
    # stay away from cell boundaries (cells are 1/7 wide)
    cells = rng.integers(0, 7, size=(6, 3))
    unit = (cells + rng.uniform(0.2, 0.8, size=(6, 3))) / 7
    pts = torch.as_tensor(unit) * (HI - LO) + LO
    w = torch.as_tensor(rng.normal(size=(6, 12)))

    def f(x):
        return (query(ts, x) * w).sum()

    x = pts.clone().requires_grad_(True)
    f(x).backward()
    assert rel_err(x.grad, finite_difference(f, pts.clone())) < 1e-4


def test_clamped_coordinate_has_zero_gradient(rng):
    ts = _set(rng)
    x = torch.tensor([[5.0, 0.3, 1.0]], dtype=torch.float64, requires_grad=True)
    query(ts, x).sum().backward()
    assert x.grad[0, 0] == 0 and x.grad[0, 1] != 0


def test_triplane_set_validation():
    with pytest.raises(ValueError):
        TriplaneSet(torch.zeros(3, 2, 1, 1), LO, HI)
    with pytest.raises(ValueError):
        TriplaneSet(torch.zeros(2, 2, 4, 4), LO, HI)
    with pytest.raises(ValueError):
        TriplaneSet(torch.zeros(3, 2, 4, 4), HI, LO)


def test_bounds_dilation():
    pts = torch.tensor([[0.0, 0, 0], [1.0, 2.0, 4.0]])
    lo, hi = bounds_from_points(pts)
    assert torch.allclose(lo, torch.tensor([-0.1, -0.2, -0.4]))
    assert torch.allclose(hi, torch.tensor([1.1, 2.2, 4.4]))


@pytest.fixture(scope="module")
def generator():
    torch.manual_seed(0)
    return TriplaneGenerator(latent_dim=8, resolution=16, plane_channels=4, const_channels=32, hidden=16,
                             min_channels=8).double()


def test_generate_planes_deterministic_and_nondegenerate(generator):
    z1, z2 = torch.randn(8, dtype=torch.float64), torch.randn(8, dtype=torch.float64)
    a, b = generate_planes(generator, z1, LO, HI), generate_planes(generator, z1, LO, HI)
    assert torch.equal(a.planes, b.planes) and a.planes.shape == (3, 4, 16, 16)
    assert not torch.equal(a.planes, generate_planes(generator, z2, LO, HI).planes)
    batch = generator(torch.stack([z1, z2]))
    assert torch.allclose(batch[0], a.planes, atol=1e-12)


def test_generator_latent_gradient(generator):
    z = torch.randn(8, dtype=torch.float64)
    w = torch.randn(3, 4, 16, 16, dtype=torch.float64)

    def f(x):
        return (generator(x) * w).sum()

    x = z.clone().requires_grad_(True)
    f(x).backward()
    assert rel_err(x.grad, finite_difference(f, z.clone())) < 1e-4


def test_non_finite_latent_rejected(generator):
    with pytest.raises(NonFiniteLatent):
        generate_planes(generator, torch.tensor([float("nan")] * 8, dtype=torch.float64), LO, HI)


def test_generator_resolution_must_be_power_of_two_multiple():
    with pytest.raises(ValueError):
        TriplaneGenerator(resolution=48)


def test_latent_table():
    torch.manual_seed(0)
    table = TemporalLatentTable(5, 4)
    assert torch.allclose(table.mean_latent, table.latents.mean(0))
    assert torch.equal(table(2), table.latents[2])
    assert torch.equal(table(None), table.mean_latent) and torch.equal(table(99), table.mean_latent)
