import math

import numpy as np
import pytest
import torch
from torch import nn

from conftest import lq_benchmark, perturb
from mfgflow.core import (BoundaryCode, CodeLayout, MFGProblem, ZeroHamiltonian, build_crowd_motion)
from mfgflow.fbsde import (PathBatch, TrainConfig, ValuePath, hjb_terms, load_solution, loss_hjb,
                           loss_mkv, loss_terminal, rounds_to_reach, save_solution, simulate_paths,
                           train_fixed)
from mfgflow.flow import DensityFlow

T64 = torch.float64
LAY1 = CodeLayout(dim=1, max_obstacles=0)


def _problem_1d(f_in=0.0, sigma=1.0, N=10):
    code = BoundaryCode((0.0,), 0.5, (1.0,), sigma, layout=LAY1)
    return build_crowd_motion(code, N=N, f_in=f_in, box=((-5.0,), (5.0,)))


def _zero_vp(problem):
    vp = ValuePath.for_problem(problem)
    with torch.no_grad():
        for p in vp.parameters():
            p.zero_()
    return vp


def test_frozen_dynamics():
    prob = _problem_1d(sigma=1e-12)
    flow, vp = DensityFlow.for_problem(prob), _zero_vp(prob)
    b = simulate_paths(prob, flow, vp, 64, seed=0, create_graph=False)
    assert float((b.X - b.X[:, :1]).abs().max()) < 1e-10
    assert float((b.Y - b.Y[:, :1]).abs().max()) == 0.0


def test_constant_running_cost():
    c = 0.7
    prob = _problem_1d(f_in=c)
    flow, vp = DensityFlow.for_problem(prob), _zero_vp(prob)
    b = simulate_paths(prob, flow, vp, 64, seed=0, create_graph=False)
    assert torch.allclose(b.Y[:, -1], b.Y[:, 0] - c * prob.T, atol=1e-12)


def test_martingale_increments_mean_zero():
    prob = _problem_1d()
    flow = DensityFlow.for_problem(prob)
    vp = perturb(ValuePath.for_problem(prob), 0.5, 3)
    b = simulate_paths(prob, flow, vp, 4000, seed=1, create_graph=False)
    total = b.ZdW.sum(1)
    assert abs(float(total.mean())) <= 3 * float(total.std()) / math.sqrt(len(total))


def test_shapes_and_mismatch_rejected():
    prob = _problem_1d(N=10)
    b = simulate_paths(prob, DensityFlow.for_problem(prob), ValuePath.for_problem(prob), 32, 0)
    assert b.X.shape == (32, 11, 1) and b.Y.shape == (32, 11) and b.dW.shape == (32, 10, 1)
    with pytest.raises(ValueError):
        simulate_paths(prob, DensityFlow(1, 5, (0.0,), 0.5), ValuePath.for_problem(prob), 8, 0)


def _batch_with_terminal(prob, offset):
    X = torch.randn(50, prob.N + 1, prob.d, dtype=T64)
    Y = torch.zeros(50, prob.N + 1, dtype=T64)
    Y[:, -1] = prob.terminal_cost(X[:, -1]) + offset
    return PathBatch(X=X, Y=Y, dW=torch.zeros(50, prob.N, prob.d, dtype=T64), seed=0)


def test_loss_mkv_zero_cases():
    prob = _problem_1d()
    assert abs(float(loss_mkv(_batch_with_terminal(prob, 0.0), None, prob))) <= 1e-10
    assert abs(float(loss_mkv(_batch_with_terminal(prob, 1.0), None, prob)) - 1.0) <= 1e-10


def test_loss_mkv_matches_straight_line_formula():
    prob = build_crowd_motion(BoundaryCode((-2.0, 1.0), 0.5, (2.0, 0.0), 0.8), N=8)
    flow = DensityFlow.for_problem(prob)
    vp = perturb(ValuePath.for_problem(prob), 0.3, 5)
    b = simulate_paths(prob, flow, vp, 100, seed=2, create_graph=False)
    X, Y = b.X.numpy(), b.Y.numpy()
    g = ((X[:, -1] - np.array([2.0, 0.0])) ** 2).sum(-1)
    ref = sum((gi - yi) ** 2 for gi, yi in zip(g, Y[:, -1])) / len(g)
    assert float(loss_mkv(b, flow, prob)) == pytest.approx(ref, rel=1e-12)


class _AnalyticHeads(nn.Module):
    """u(x, t_n) = |x|^2 + 2 nu d (T - t_n), an exact heat-equation solution."""

    def __init__(self, nu, d, T, N):
        super().__init__()
        self.nu, self.d, self.T, self.N = nu, d, T, N

    def _u(self, x, levels):
        t = levels.to(T64) * self.T / self.N
        return (x ** 2).sum(-1) + 2 * self.nu * self.d * (self.T - t)[:, None]

    def forward(self, x, levels):
        return self._u(x, torch.as_tensor(levels))

    def value_and_grad(self, x, levels):
        return self._u(x, torch.as_tensor(levels)), 2 * x


class _OracleValuePath(nn.Module):
    def __init__(self, heads, d):
        super().__init__()
        self.heads = heads
        self.register_buffer("center", torch.zeros(d, dtype=T64))
        self.register_buffer("halfwidth", torch.ones(d, dtype=T64))
        self.register_buffer("value_scale", torch.tensor(1.0, dtype=T64))

    def values(self, x, levels):
        return self.value_scale * self.heads(x, torch.as_tensor(levels))


def _heat_problem(d=1, N=10, sigma=1.0):
    return MFGProblem(d=d, T=1.0, N=N, sigma=sigma,
                      running_cost=lambda x, t=0.0, density=None: torch.zeros(x.shape[:-1], dtype=x.dtype),
                      terminal_cost=lambda x: (x ** 2).sum(-1), mu0_mean=(0.0,) * d, mu0_std=1.0,
                      hamiltonian=ZeroHamiltonian(), box=((-5.0,) * d, (5.0,) * d))


def test_hjb_heat_equation_residual():
    prob = _heat_problem()
    vp = _OracleValuePath(_AnalyticHeads(prob.viscosity, 1, prob.T, prob.N), 1)
    flow = DensityFlow.for_problem(prob)
    assert float(loss_hjb(vp, flow, prob, M=200).detach()) <= 1e-3


def _constant_problem(c, d=1, N=6):
    return MFGProblem(d=d, T=1.0, N=N, sigma=1.0,
                      running_cost=lambda x, t=0.0, density=None: torch.full(x.shape[:-1], float(c),
                                                                             dtype=x.dtype),
                      terminal_cost=lambda x: torch.zeros(x.shape[:-1], dtype=x.dtype),
                      mu0_mean=(0.0,) * d, mu0_std=1.0, box=((-3.0,) * d, (3.0,) * d))


@pytest.mark.parametrize("c", [0.0, 1.5])
def test_hjb_zero_value_function(c):
    prob = _constant_problem(c)
    vp, flow = _zero_vp(prob), DensityFlow.for_problem(prob)
    assert abs(float(loss_hjb(vp, flow, prob, M=64).detach()) - c ** 2) <= 1e-10


def test_hjb_derivatives_match_finite_differences():
    prob = build_crowd_motion(BoundaryCode((-1.0, 0.5), 0.6, (1.0, 0.0), 0.9), N=6)
    vp = perturb(ValuePath.for_problem(prob), 0.4, 7)
    xs = torch.as_tensor(np.random.default_rng(0).uniform(-2, 2, (prob.N, 20, 2)))
    terms = hjb_terms(vp, prob, xs)
    h = 1e-4
    for n in range(1, prob.N):
        x = xs[n - 1].detach()
        with torch.no_grad():
            lap = sum((vp.value(x + e, n) - 2 * vp.value(x, n) + vp.value(x - e, n)) / h ** 2
                      for e in torch.eye(2, dtype=T64) * h)
            nxt = vp.value(x, n + 1) if n + 1 < prob.N else prob.terminal_cost(x)
            dtu = (nxt - vp.value(x, n)) / prob.dt
        got_lap = terms["lap"][n - 1].detach()
        assert float(((got_lap - lap).abs() / lap.abs().clamp_min(1e-3)).max()) <= 1e-2
        assert torch.allclose(terms["dt_u"][n - 1].detach(), dtu, rtol=1e-10, atol=1e-10)


def test_loss_terminal_cases():
    code = BoundaryCode((1.0, -2.0), 1e-9, (1.0, -2.0), 1.0)
    prob = build_crowd_motion(code, N=4, box=((-5, -5), (5, 5)))
    point = DensityFlow(2, 4, (1.0, -2.0), 1e-9, box=((-5, -5), (5, 5)))
    with torch.no_grad():
        assert float(loss_terminal(point, prob, 1000)) <= 1e-10
    s = 0.7
    gauss = DensityFlow(2, 4, (1.0, -2.0), s, box=((-5, -5), (5, 5)))
    with torch.no_grad():
        xT = gauss.push_samples(4, 40000, 0)
        vals = prob.terminal_cost(xT)
        est = float(loss_terminal(gauss, prob, 40000, 0))
    se = float(vals.std()) / math.sqrt(len(vals))
    assert abs(est - 2 * s ** 2) <= 3 * se
    ses = []
    for M in (2000, 8000):
        with torch.no_grad():
            v = prob.terminal_cost(gauss.push_samples(4, M, 1))
        ses.append(float(v.std()) / math.sqrt(M))
    assert ses[0] / ses[1] == pytest.approx(2.0, rel=0.1)


def test_value_path_control_and_clip():
    prob = build_crowd_motion(BoundaryCode((-1.0, 0.5), 0.6, (1.0, 0.0), 0.9), N=4)
    vp = perturb(ValuePath.for_problem(prob, z_clip=0.5), 1.0, 2)
    x = torch.as_tensor(np.random.default_rng(0).uniform(-4, 4, (30, 2)))
    assert torch.allclose(vp.control(x, 2), -vp.z(x, 2) / prob.sigma)
    b = simulate_paths(prob, DensityFlow.for_problem(prob), vp, 64, 0, create_graph=False)
    steps = (b.X[:, 1:] - b.X[:, :-1] - prob.sigma * b.dW) / prob.dt
    assert float(steps.abs().max()) <= 0.5 / prob.sigma + 1e-9


def test_train_fixed_trivial_problem():
    code = BoundaryCode((0.5,), 0.5, (0.5,), 0.5, layout=LAY1)
    prob = build_crowd_motion(code, N=10, box=((-4.0,), (5.0,)))
    cfg = TrainConfig(M=256, max_rounds=15, lr_theta=1e-2, lr_phi=1e-2, tol=0.0)
    res = train_fixed(prob, cfg)
    with torch.no_grad():
        xT = res.flow.push_samples(prob.N, 4000, 3)
    assert abs(float(xT.mean()) - 0.5) <= 0.1
    for key in ("l_mkv", "l_hjb", "l_t", "l_fit", "l_nf", "total"):
        assert np.all(np.isfinite(res.column(key)))
    best = res.column("best")
    assert np.all(np.diff(best) <= 0)


def test_train_fixed_reproducible(tmp_path):
    prob = lq_benchmark(10)
    cfg = TrainConfig(M=128, max_rounds=5, lr_theta=1e-2, lr_phi=1e-2, seed=3)
    a = train_fixed(prob, cfg, log_path=tmp_path / "a.csv")
    b = train_fixed(prob, cfg)
    for key in ("l_mkv", "l_hjb", "l_t", "l_fit", "l_nf", "total"):
        assert np.allclose(a.column(key), b.column(key), rtol=0, atol=1e-6)
    assert (tmp_path / "a.csv").read_text().count("\n") == 6
    save_solution(tmp_path / "s.npz", a)
    flow, vp = load_solution(tmp_path / "s.npz")
    x = torch.linspace(-2, 2, 9, dtype=T64)[:, None]
    with torch.no_grad():
        assert torch.equal(flow.log_density(x, 4), a.flow.log_density(x, 4))
        assert torch.equal(vp.value(x, 3), a.vp.value(x, 3))


def test_rounds_to_reach():
    trace = [{"v": v} for v in (3.0, 2.0, 1.0, 0.5)]
    assert rounds_to_reach(trace, "v", 1.0) == 3
    assert rounds_to_reach(trace, "v", 0.1) is None
