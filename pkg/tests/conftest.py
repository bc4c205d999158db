import numpy as np
import pytest
import torch

from mfgflow.core import BoundaryCode, CodeLayout, build_crowd_motion
from mfgflow.flow import DensityFlow


def perturb(module, scale=0.3, seed=0):
    """Overwrite every parameter with seeded noise so maps are far from identity."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


@pytest.fixture
def random_flow_2d():
    flow = DensityFlow(2, 4, (0.5, -0.5), 0.8, box=((-6.0, -6.0), (6.0, 6.0)))
    return perturb(flow, 0.3, 1)


@pytest.fixture(scope="session")
def lq_problem():
    """The 1D linear-quadratic benchmark: start N(-1, 0.5^2), target +1, sigma 1."""
    lay = CodeLayout(dim=1, max_obstacles=0)
    code = BoundaryCode((-1.0,), 0.5, (1.0,), 1.0, layout=lay)
    return build_crowd_motion(code, N=20, T=1.0, box=((-5.0,), (5.0,)))


def lq_benchmark(N):
    lay = CodeLayout(dim=1, max_obstacles=0)
    code = BoundaryCode((-1.0,), 0.5, (1.0,), 1.0, layout=lay)
    return build_crowd_motion(code, N=N, T=1.0, box=((-5.0,), (5.0,)))


ACCEPTANCE_LINES = []


def report(name, ok, detail):
    """One acceptance line; printed live with -s and repeated in the summary."""
    line = f"[ACCEPTANCE] criterion {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


np.set_printoptions(precision=4, suppress=True)
