import warnings

import numpy as np
import pytest
import torch

warnings.filterwarnings("ignore", message=".*TBB.*")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central differences of scalar ``fn`` w.r.t. every entry of the float64 tensor ``x``."""
    x = x.detach()
    grad = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        with torch.no_grad():
            hi = float(fn(x))
            flat[i] = orig - eps
            lo = float(fn(x))
        flat[i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.detach().reshape(-1), b.detach().reshape(-1)
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-12))


@pytest.fixture(scope="session")
def small_dataset():
    from avatarsplat.data import synth_generate

    return synth_generate(frames=6, resolution=64, seed=3, supersample=1)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE, None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        terminalreporter.write_line(log[n])
