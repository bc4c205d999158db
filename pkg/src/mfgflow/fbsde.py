"""Fixed-coefficient solver: value networks, MKV-FBSDE paths and the alternating loop.

``theta`` (value networks) is trained on the terminal mismatch ``l_MKV``
plus a weighted HJB residual; ``phi`` (flow) is trained on the likelihood of
the simulated forward paths plus weighted ``l_HJB`` and ``l_T`` terms, and
optionally a warm-start penalty toward reference densities.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import _io
from .core import MFGProblem
from .flow import DTYPE, DensityFlow

log = logging.getLogger(__name__)


class NonFiniteStateError(FloatingPointError):
    pass


class TimeTrunkHeads(nn.Module):
    """Scalar heads ``u_n(x) = w_n . h(x, t_n) + b_n`` over a trunk shared across steps.

    Each step keeps its own output parameters; the trunk lets neighbouring
    steps share what they learn about the shape of the value function.
    """

    def __init__(self, K: int, d: int, hidden: int = 32, depth: int = 2):
        super().__init__()
        layers, width = [], d + 1
        for _ in range(depth):
            layers += [nn.Linear(width, hidden), nn.Tanh()]
            width = hidden
        self.K = int(K)
        self.trunk = nn.Sequential(*layers).to(DTYPE)
        self.weight = nn.Parameter(torch.zeros(K, hidden, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(K, dtype=DTYPE))

    def _inputs(self, x, levels):
        t = (levels.to(DTYPE) / self.K).view(-1, 1, 1).expand(*x.shape[:-1], 1)
        return torch.cat([x, t], dim=-1)

    def forward(self, x, levels):
        """x: (L, M, d), levels: (L,) head indices -> (L, M)."""
        h = self.trunk(self._inputs(x, levels))
        return (h * self.weight[levels].unsqueeze(1)).sum(-1) + self.bias[levels].unsqueeze(1)

    def value_and_grad(self, x, levels):
        """Head values and their x-gradients, with the gradient written out
        layer by layer so that training needs only first-order autograd."""
        h = self._inputs(x, levels)
        linears = [m for m in self.trunk if isinstance(m, nn.Linear)]
        acts = []
        for lin in linears:
            h = torch.tanh(lin(h))
            acts.append(h)
        w = self.weight[levels].unsqueeze(1)
        u = (h * w).sum(-1) + self.bias[levels].unsqueeze(1)
        g = w.expand_as(h)
        for lin, a in zip(reversed(linears), reversed(acts)):
            g = (g * (1 - a * a)) @ lin.weight
        return u, g[..., : x.shape[-1]]


class ValuePath(nn.Module):
    """Per-step value heads ``u(., t_n)`` for n = 0..N-1.

    Head 0 is the initial value ``u(0, x)``; the volatility process is
    ``Z_n = sigma * grad u(., t_n)``, so the feedback control is
    ``-Z_n / sigma`` under the quadratic Hamiltonian.  ``z_clip`` bounds
    each component of Z during simulation.
    """

    def __init__(self, d: int, N: int, sigma: float, box, value_scale: float = 1.0,
                 hidden: int = 32, depth: int = 2, z_clip: Optional[float] = None):
        super().__init__()
        lo, hi = (np.asarray(b, dtype=float) for b in box)
        self.d, self.N, self.sigma = int(d), int(N), float(sigma)
        self.z_clip = None if z_clip is None else float(z_clip)
        self.structure = dict(hidden=int(hidden), depth=int(depth), z_clip=self.z_clip)
        self.box = (tuple(lo.tolist()), tuple(hi.tolist()))
        self.register_buffer("center", torch.as_tensor((lo + hi) / 2, dtype=DTYPE))
        self.register_buffer("halfwidth", torch.as_tensor((hi - lo) / 2, dtype=DTYPE))
        self.register_buffer("value_scale", torch.tensor(float(value_scale), dtype=DTYPE))
        self.heads = TimeTrunkHeads(N, d, hidden, depth)

    @classmethod
    def for_problem(cls, problem: MFGProblem, **kw) -> "ValuePath":
        g0 = float(problem.terminal_cost(torch.tensor(problem.mu0_mean, dtype=DTYPE)))
        kw.setdefault("value_scale", max(1.0, g0))
        return cls(problem.d, problem.N, problem.sigma, problem.box, **kw)

    def values(self, x, levels):
        """u(x[k], t_{levels[k]}) for stacked inputs x: (L, M, d)."""
        levels = torch.as_tensor(levels, dtype=torch.long)
        return self.value_scale * self.heads((x - self.center) / self.halfwidth, levels)

    def value(self, x, n: int):
        if not 0 <= n < self.N:
            raise IndexError(f"value head {n} outside 0..{self.N - 1}")
        return self.values(x.unsqueeze(0), [n])[0]

    def value_and_grad(self, x, n: int):
        if not 0 <= n < self.N:
            raise IndexError(f"value head {n} outside 0..{self.N - 1}")
        u, g = self.heads.value_and_grad((x - self.center).unsqueeze(0) / self.halfwidth,
                                         torch.as_tensor([n]))
        return self.value_scale * u[0], self.value_scale * g[0] / self.halfwidth

    def grad(self, x, n: int, create_graph: bool = True):
        g = self.value_and_grad(x, n)[1]
        return g if create_graph else g.detach()

    def z(self, x, n: int, create_graph: bool = False):
        return self.sigma * self.grad(x, n, create_graph)

    def control(self, x, n: int):
        """Feedback control -grad u = -Z / sigma (quadratic Hamiltonian)."""
        return -self.z(x, n) / self.sigma

    @torch.no_grad()
    def calibrate(self, batch: "PathBatch", terminal=None) -> None:
        """Set the constants of heads 1..N-1 so that mean u_n(X_n) = mean Y_n.

        The terminal mismatch only fixes u_0 and the gradients of later heads;
        their additive constants are pinned here, which l_HJB needs.  Given
        the terminal costs g(X_N) of the batch, the constant of head 0 is
        also moved to the value that minimizes the mean squared mismatch
        (a shift of u_0 shifts every Y_n by the same amount).
        """
        Y = batch.Y.detach()
        if terminal is not None:
            shift = (terminal.detach() - Y[:, -1]).mean()
            self.heads.bias[0] += shift / self.value_scale
            Y = Y + shift
        if self.N < 2:
            return
        X = batch.X.detach().transpose(0, 1)[1:self.N]
        levels = torch.arange(1, self.N)
        gap = (Y.transpose(0, 1)[1:self.N] - self.values(X, levels)).mean(dim=1)
        self.heads.bias[1:] += gap / self.value_scale

    def descriptor(self) -> dict:
        return dict(kind="ValuePath", d=self.d, N=self.N, sigma=self.sigma,
                    box=[list(self.box[0]), list(self.box[1])], structure=self.structure)

    @classmethod
    def from_arrays(cls, header, arrays) -> "ValuePath":
        vp = cls(header["d"], header["N"], header["sigma"], header["box"],
                 float(arrays["value_scale"]), **header["structure"])
        vp.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
        return vp


@dataclass
class PathBatch:
    X: torch.Tensor    # (M, N+1, d)
    Y: torch.Tensor    # (M, N+1)
    dW: torch.Tensor   # (M, N, d)
    seed: int
    ZdW: Optional[torch.Tensor] = None  # (M, N) martingale increments


def _param_norms(module) -> dict:
    return {name: float(p.detach().norm()) for name, p in module.named_parameters()}


def simulate_paths(problem: MFGProblem, flow: DensityFlow, vp: ValuePath, M: int, seed: int,
                   stream: int = 0, create_graph: bool = True) -> PathBatch:
    """Euler-Maruyama for the forward state and the backward value process."""
    N, d, dt, sigma = problem.N, problem.d, problem.dt, problem.sigma
    if vp.N != N or flow.N != N or vp.d != d or flow.d != d:
        raise ValueError("flow/value path dimensions do not match the problem")
    x = flow.base_samples(M, seed, stream)
    dW = math.sqrt(dt) * _io.normal(seed, (M, N, d), stream, 1)
    times = problem.time_grid()
    ctx = torch.enable_grad() if create_graph else torch.no_grad()
    with ctx:
        y = vp.value(x, 0)
        xs, ys, zdws = [x], [y], []
        for n in range(N):
            p = vp.grad(x, n)
            if vp.z_clip is not None:
                p = p.clamp(-vp.z_clip / sigma, vp.z_clip / sigma)
            alpha = problem.control(x, p)
            density = _detached_density(flow, n) if problem.congestion else None
            f = problem.running_cost(x, times[n], density) + problem.lagrangian(x, p)
            zdw = sigma * (p * dW[:, n]).sum(-1)
            x = x + alpha * dt + sigma * dW[:, n]
            y = y - f * dt + zdw
            xs.append(x)
            ys.append(y)
            zdws.append(zdw)
    X, Y = torch.stack(xs, 1), torch.stack(ys, 1)
    ok = torch.isfinite(X).all(dim=(0, 2)) & torch.isfinite(Y).all(dim=0)
    if not bool(ok.all()):
        step = int(torch.nonzero(~ok)[0])
        raise NonFiniteStateError(
            f"non-finite state at step {step}; value-net parameter norms: {_param_norms(vp)}")
    return PathBatch(X=X, Y=Y, dW=dW, seed=seed, ZdW=torch.stack(zdws, 1))


def _detached_density(flow, n):
    def density(x):
        with torch.no_grad():
            return flow.density(x.detach(), n)
    return density


def loss_mkv(batch: PathBatch, flow: Optional[DensityFlow], problem: MFGProblem):
    """Mean squared terminal mismatch (1/M) sum |g(X_T) - Y_T|^2."""
    g = problem.terminal_cost(batch.X[:, -1])
    return ((g - batch.Y[:, -1]) ** 2).mean()


def _laplacian(grad, x):
    """Trace of the Jacobian of ``grad`` w.r.t. ``x``; rows of ``grad`` must
    depend only on the matching rows of ``x`` (x may carry extra leading rows)."""
    lap = 0
    if not grad.requires_grad:
        return torch.zeros(x.shape[:-1], dtype=x.dtype)
    for i in range(grad.shape[-1]):
        (h,) = torch.autograd.grad(grad[..., i].sum(), x, create_graph=True, allow_unused=True)
        if h is not None:
            lap = lap + h[..., i]
    if isinstance(lap, int):
        lap = torch.zeros(x.shape[:-1], dtype=x.dtype)
    return lap


def _values_and_grads(vp, x, levels):
    """Heads ``levels`` at stacked points x: (L, M, d) -> values (L, M), grads (L, M, d)."""
    u, g = vp.heads.value_and_grad((x - vp.center) / vp.halfwidth, levels)
    return vp.value_scale * u, vp.value_scale * g / vp.halfwidth


def hjb_terms(vp, problem: MFGProblem, xs, density=None) -> dict:
    """HJB residual pieces at levels n = 1..N for points xs: (N, M, d).

    ``u(., t_N)`` is the terminal cost; the time derivative is the forward
    difference across heads (backward difference at the last level).
    Returns dict with keys dt_u, grad, lap, residual, each indexed by level.
    """
    N, dt = problem.N, problem.dt
    nu = problem.viscosity
    times = torch.as_tensor(problem.time_grid()[1:], dtype=DTYPE)
    with torch.enable_grad():
        xs = xs if xs.requires_grad else xs.detach().requires_grad_(True)
        xa, xb = xs[: N - 1], xs[N - 1]
        if N > 1:
            u, ga = _values_and_grads(vp, xa, torch.arange(1, N))
            lapa = _laplacian(ga, xs)[: N - 1]
            nxt = [problem.terminal_cost(xa[N - 2]).unsqueeze(0)]
            if N > 2:
                nxt.insert(0, vp.values(xa[: N - 2], torch.arange(2, N)))
            dta = (torch.cat(nxt) - u) / dt
        ug = problem.terminal_cost(xb)
        if ug.requires_grad:
            (gb,) = torch.autograd.grad(ug.sum(), xb, create_graph=True)
        else:
            # terminal cost independent of x
            gb = torch.zeros_like(xb)
        lapb = _laplacian(gb, xs)[N - 1]
        dtb = (ug - vp.values(xb.unsqueeze(0), [N - 1])[0]) / dt
        if N > 1:
            dt_u = torch.cat([dta, dtb.unsqueeze(0)])
            grad = torch.cat([ga, gb.unsqueeze(0)])
            lap = torch.cat([lapa, lapb.unsqueeze(0)])
        else:
            dt_u, grad, lap = dtb.unsqueeze(0), gb.unsqueeze(0), lapb.unsqueeze(0)
        f = torch.stack([problem.running_cost(xs[k], float(times[k]),
                                              density(k + 1) if density else None)
                         for k in range(N)])
        residual = dt_u + nu * lap - problem.hamiltonian(xs, grad) + f
    return dict(dt_u=dt_u, grad=grad, lap=lap, residual=residual)


def loss_hjb(vp, flow: DensityFlow, problem: MFGProblem, M: int = 256, seed: int = 0,
             xs=None, through_samples: bool = False):
    """(1/NM) sum_n sum_i |HJB residual(x_i, t_n)|^2 with x_i ~ mu_{t_n}."""
    if xs is None:
        ctx = torch.enable_grad() if through_samples else torch.no_grad()
        with ctx:
            xs = flow.sample_levels(M, seed, stream=7)[0][1:]
    if not through_samples:
        xs = xs.detach()
    density = None
    if problem.congestion:
        density = lambda n: _detached_density(flow, n)  # noqa: E731
    res = hjb_terms(vp, problem, xs, density)["residual"]
    return (res ** 2).mean()


def loss_terminal(flow: DensityFlow, problem: MFGProblem, M: int = 1024, seed: int = 0,
                  xT=None):
    """(1/M) sum g(x_i) with x_i ~ terminal marginal of the flow."""
    if xT is None:
        xT = flow.push_samples(flow.N, M, seed)
    return problem.terminal_cost(xT).mean()


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    M: int = 1024
    k_theta: int = 5
    k_phi: int = 5
    lr_theta: float = 1e-3
    lr_phi: float = 1e-3
    tol: float = 1e-4
    patience: int = 20
    max_rounds: int = 2000
    hidden: int = 32
    flow_blocks: int = 2
    flow_hidden: int = 32
    w_hjb_theta: float = 0.0
    w_hjb_phi: float = 1e-3
    w_terminal: float = 1e-3
    w_fit: float = 1.0
    fit_levels: Optional[int] = None
    warm_weight: float = 1.0
    warm_burnin: float = 0.3
    warm_fit_steps: int = 200
    warm_lr_scale: float = 0.1
    data_init: bool = True
    eval_M: Optional[int] = None
    grad_clip: Optional[float] = None
    z_clip: Optional[float] = None
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FixedSolveResult:
    flow: DensityFlow
    vp: ValuePath
    trace: list
    converged: bool
    rounds: int
    best_round: int
    seconds: float
    config: TrainConfig = field(repr=False, default=None)

    def column(self, key):
        return np.array([row[key] for row in self.trace])


TRACE_COLUMNS = ("round", "l_mkv", "l_hjb", "l_t", "l_fit", "l_nf", "total", "best", "seconds")


def _fit_loss(flow, X, levels=None):
    """Negative log-likelihood of whole paths under the flow marginals.

    Summed over levels 1..N (or over ``levels``, rescaled to N levels),
    averaged over paths.
    """
    xs = X.detach().transpose(0, 1)             # (N+1, M, d)
    N = xs.shape[0] - 1
    if levels is None:
        return -flow.log_density_levels(xs)[1:].mean(dim=1).sum()
    K = int(max(levels)) + 1
    lp = flow.log_density_levels(xs[:K])
    return -lp[torch.as_tensor(levels)].mean(dim=1).sum() * (N / len(levels))


def _warm_penalty(flow_xs, flow_lp, warm_start):
    """Mean squared log-density gap to the reference at the flow's own samples."""
    target = warm_start.log_density_levels(flow_xs[1:])
    return ((flow_lp[1:] - target) ** 2).mean()


def _nf_loss(problem, flow, vp, X, cfg, fit_levels, seed, stream, warm_start=None, warm_w=0.0):
    xs, lp = flow.sample_levels(cfg.M, seed, stream)
    l_hjb = loss_hjb(vp, flow, problem, xs=xs[1:], through_samples=True)
    l_t = loss_terminal(flow, problem, xT=xs[-1])
    l_fit = _fit_loss(flow, X, fit_levels)
    l_nf = cfg.w_hjb_phi * l_hjb + cfg.w_terminal * l_t + cfg.w_fit * l_fit
    loss = l_nf
    if warm_start is not None and warm_w > 0:
        loss = loss + warm_w * _warm_penalty(xs, lp, warm_start)
    return loss, dict(l_hjb=l_hjb, l_t=l_t, l_fit=l_fit, l_nf=l_nf)


def _step(opt, params, loss, clip):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    if clip:
        torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()


def fit_to_reference(flow: DensityFlow, reference, steps: int, M: int, lr: float, seed: int = 0,
                     opt=None) -> list:
    """Pull the flow marginals toward ``reference`` densities; returns the penalty trace."""
    params = list(flow.parameters())
    opt = opt or torch.optim.Adam(params, lr=lr)
    trace = []
    for k in range(steps):
        xs, lp = flow.sample_levels(M, seed, stream=10**7 + k)
        loss = _warm_penalty(xs, lp, reference)
        _step(opt, params, loss, None)
        trace.append(float(loss.detach()))
    return trace


def flow_controls(flow: DensityFlow, problem: MFGProblem, M: int, seed: int, stream: int = 0):
    """Feedback controls implied by the flow's step maps.

    The density of dX = alpha dt + sigma dW moves with velocity
    alpha - nu grad log mu; reading that velocity off the step map
    (r_{n+1}(x) - x) / dt gives alpha = velocity + nu grad log mu.
    Returns (points (N, M, d), controls (N, M, d)) for levels 0..N-1.
    """
    with torch.no_grad():
        xs = flow.sample_levels(M, seed, stream)[0][: problem.N]
        nxt = torch.stack([flow.maps[n](xs[n])[0] for n in range(problem.N)])
    with torch.enable_grad():
        x = xs.clone().requires_grad_(True)
        (score,) = torch.autograd.grad(flow.log_density_levels(x).sum(), x)
    return xs, (nxt - xs) / problem.dt + problem.viscosity * score


def fit_controls(vp: ValuePath, flow: DensityFlow, problem: MFGProblem, steps: int, M: int,
                 lr: float, seed: int = 0, opt=None) -> list:
    """Regress the value-path control onto :func:`flow_controls`; returns the loss trace."""
    params = list(vp.parameters())
    opt = opt or torch.optim.Adam(params, lr=lr)
    levels = torch.arange(problem.N)
    trace = []
    for k in range(steps):
        xs, target = flow_controls(flow, problem, M, seed, stream=2 * 10**7 + k)
        _, p = _values_and_grads(vp, xs, levels)
        loss = ((problem.control(xs, p) - target) ** 2).sum(-1).mean()
        _step(opt, params, loss, None)
        trace.append(float(loss.detach()))
    return trace


def evaluate(problem, flow, vp, M: int, seed: int, w=None) -> dict:
    """Loss components on a fixed evaluation batch (deterministic given parameters)."""
    cfg = w or TrainConfig()
    batch = simulate_paths(problem, flow, vp, M, seed, stream=10**6, create_graph=False)
    with torch.no_grad():
        l_mkv = float(loss_mkv(batch, flow, problem))
        xs, _ = flow.sample_levels(M, seed, stream=10**6 + 1)
        l_fit = float(_fit_loss(flow, batch.X))
    l_hjb = float(loss_hjb(vp, flow, problem, xs=xs[1:]).detach())
    l_t = float(problem.terminal_cost(xs[-1]).mean())
    l_nf = cfg.w_hjb_phi * l_hjb + cfg.w_terminal * l_t + cfg.w_fit * l_fit
    return dict(l_mkv=l_mkv, l_hjb=l_hjb, l_t=l_t, l_fit=l_fit, l_nf=l_nf,
                total=l_mkv + cfg.w_hjb_theta * l_hjb + l_nf,
                terminal_rmse=math.sqrt(l_mkv))


def train_fixed(problem: MFGProblem, config: Optional[TrainConfig] = None, warm_start=None,
                flow: Optional[DensityFlow] = None, vp: Optional[ValuePath] = None,
                log_path=None) -> FixedSolveResult:
    """Alternating theta/phi training for one fixed-coefficient problem.

    Each round takes ``k_theta`` steps on the terminal mismatch, then
    ``k_phi`` flow steps on the path likelihood plus the weighted HJB and
    terminal terms, using all paths simulated during the round.

    ``warm_start`` is any object with ``log_density_levels(xs)`` returning
    reference log-densities for levels 1..N.  The flow is first fitted to it
    for ``warm_fit_steps`` steps, then the value path is fitted to the
    controls that the warm flow implies (:func:`flow_controls`) for as many
    steps.  During the rounds the flow keeps a density penalty toward the
    reference whose weight decays linearly to zero over
    ``warm_burnin * max_rounds`` rounds, while the value-path learning rate
    rises from ``warm_lr_scale * lr_theta`` to ``lr_theta``.
    Returns the best checkpoint seen (by total evaluation loss).
    """
    cfg = config or TrainConfig()
    torch.manual_seed(cfg.seed)
    flow = flow or DensityFlow.for_problem(problem, blocks_per_step=cfg.flow_blocks,
                                           hidden=cfg.flow_hidden)
    vp = vp or ValuePath.for_problem(problem, hidden=cfg.hidden, z_clip=cfg.z_clip)
    theta, phi = list(vp.parameters()), list(flow.parameters())
    opt_theta = torch.optim.Adam(theta, lr=cfg.lr_theta)
    opt_phi = torch.optim.Adam(phi, lr=cfg.lr_phi)
    eval_M = cfg.eval_M or cfg.M
    rng = _io.generator(cfg.seed, 99)
    burn = max(1.0, cfg.warm_burnin * cfg.max_rounds)

    logf = writer = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        new = not Path(log_path).exists()
        logf = open(log_path, "a", newline="")
        writer = csv.writer(logf, lineterminator="\n")
        if new:
            writer.writerow(TRACE_COLUMNS)

    trace, best, best_state, best_round = [], math.inf, None, -1
    converged = False
    t0 = time.perf_counter()
    try:
        if warm_start is not None and cfg.warm_fit_steps:
            # separate optimizers: pre-fit gradient statistics would damp later steps
            fit_to_reference(flow, warm_start, cfg.warm_fit_steps, cfg.M, cfg.lr_phi, cfg.seed)
            fit_controls(vp, flow, problem, cfg.warm_fit_steps, cfg.M, cfg.lr_theta, cfg.seed)
        for r in range(cfg.max_rounds):
            decay = max(0.0, 1.0 - r / burn) if warm_start is not None else 0.0
            if warm_start is not None:
                # full-size Adam steps would undo the distilled controls
                ramp = cfg.warm_lr_scale + (1.0 - cfg.warm_lr_scale) * (1.0 - decay)
                for group in opt_theta.param_groups:
                    group["lr"] = cfg.lr_theta * ramp
            paths = []
            for k in range(cfg.k_theta):
                stream = 2 * (r * 64 + k)
                batch = simulate_paths(problem, flow, vp, cfg.M, cfg.seed, stream=stream)
                loss = loss_mkv(batch, flow, problem)
                if cfg.w_hjb_theta:
                    with torch.no_grad():
                        xs = flow.sample_levels(cfg.M, cfg.seed, stream=stream + 1)[0]
                    loss = loss + cfg.w_hjb_theta * loss_hjb(vp, flow, problem, xs=xs[1:])
                _step(opt_theta, theta, loss, cfg.grad_clip)
                vp.calibrate(batch, problem.terminal_cost(batch.X[:, -1]))
                paths.append(batch.X.detach())
            if not paths:
                with torch.no_grad():
                    paths.append(simulate_paths(problem, flow, vp, cfg.M, cfg.seed,
                                                stream=2 * (r * 64), create_graph=False).X)
            X = torch.cat(paths)
            if r == 0 and warm_start is None and cfg.data_init:
                flow.initialize_from_paths(X, cfg.M, cfg.seed)
            warm_w = cfg.warm_weight * decay
            for k in range(cfg.k_phi):
                levels = None
                if cfg.fit_levels:
                    levels = np.sort(rng.choice(np.arange(1, problem.N + 1),
                                                size=min(cfg.fit_levels, problem.N),
                                                replace=False))
                loss, _ = _nf_loss(problem, flow, vp, X, cfg, levels, cfg.seed,
                                   stream=2 * (r * 64 + 32 + k), warm_start=warm_start,
                                   warm_w=warm_w)
                _step(opt_phi, phi, loss, cfg.grad_clip)

            ev = evaluate(problem, flow, vp, eval_M, cfg.seed, cfg)
            if not math.isfinite(ev["total"]):
                raise NonFiniteStateError(f"non-finite loss at round {r}")
            if ev["total"] < best:
                best, best_round = ev["total"], r
                best_state = (copy.deepcopy(flow.state_dict()), copy.deepcopy(vp.state_dict()))
            row = dict(round=r, **{k: ev[k] for k in ("l_mkv", "l_hjb", "l_t", "l_fit", "l_nf",
                                                       "total")},
                       best=best, seconds=time.perf_counter() - t0)
            trace.append(row)
            if writer:
                writer.writerow([row[c] for c in TRACE_COLUMNS])
                logf.flush()
            w = cfg.patience
            if len(trace) >= 2 * w and r >= burn * (warm_start is not None):
                cur = np.mean([t["total"] for t in trace[-w:]])
                prev = np.mean([t["total"] for t in trace[-2 * w:-w]])
                if abs(cur - prev) / (abs(prev) + 1e-12) < cfg.tol:
                    converged = True
                    break
    finally:
        if logf:
            logf.close()

    if best_state is not None:
        flow.load_state_dict(best_state[0])
        vp.load_state_dict(best_state[1])
    if not converged:
        log.info("train_fixed: no convergence after %d rounds (best round %d)",
                 len(trace), best_round)
    return FixedSolveResult(flow=flow, vp=vp, trace=trace, converged=converged, rounds=len(trace),
                            best_round=best_round, seconds=time.perf_counter() - t0, config=cfg)


def rounds_to_reach(trace, key: str, level: float) -> Optional[int]:
    """First round (1-based count) whose ``key`` value is <= level."""
    for i, row in enumerate(trace):
        if row[key] <= level:
            return i + 1
    return None


def save_solution(path, result_or_flow, vp: Optional[ValuePath] = None) -> None:
    flow = result_or_flow.flow if isinstance(result_or_flow, FixedSolveResult) else result_or_flow
    vp = result_or_flow.vp if isinstance(result_or_flow, FixedSolveResult) else vp
    header = dict(kind="FixedSolve", flow=flow.descriptor(), vp=vp.descriptor())
    arrays = {f"flow/{k}": v.detach().numpy() for k, v in flow.state_dict().items()}
    arrays.update({f"vp/{k}": v.detach().numpy() for k, v in vp.state_dict().items()})
    _io.save_npz(path, header, arrays)


def load_solution(path):
    header, arrays = _io.load_npz(path)
    if header.get("kind") != "FixedSolve":
        raise ValueError(f"{path} is not a fixed-solve checkpoint")
    fa = {k[5:]: v for k, v in arrays.items() if k.startswith("flow/")}
    va = {k[3:]: v for k, v in arrays.items() if k.startswith("vp/")}
    return DensityFlow.from_arrays(header["flow"], fa), ValuePath.from_arrays(header["vp"], va)
