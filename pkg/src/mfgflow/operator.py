"""Neural operator from boundary codes to density values at every time step.

The model sees, for each query point and step n = 1..N, the normalized code
vector, the normalized query and t_n / T.  A lifted channel representation
is mixed along the time axis by truncated Fourier layers; the projection
gives a raw log-density per step and the output is its exponential.
"""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import _io
from .core import BoundaryCode, CodeLayout, LayoutError, MFGProblem, build_crowd_motion
from .fbsde import TrainConfig, train_fixed
from .flow import DTYPE, DensityFlow, grid_points
from .oracle import LQDensity, LQSolution

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RAW_LIMITS = (-700.0, 50.0)


class SpectralMix(nn.Module):
    """Channel mixing on the lowest ``modes`` Fourier modes along the last axis.

    The truncated real transform and its inverse are dense matrices; for the
    short time axes used here this is faster than an FFT round trip and
    gives the same result.
    """

    def __init__(self, width: int, modes: int, n: int):
        super().__init__()
        self.modes = int(min(modes, n // 2 + 1))
        scale = 1.0 / (width * width)
        self.weight = nn.Parameter(scale * torch.randn(2, self.modes, width, width, dtype=DTYPE))
        t = torch.arange(n, dtype=DTYPE)
        k = torch.arange(self.modes, dtype=DTYPE)
        ang = 2 * math.pi * torch.outer(t, k) / n                    # (n, modes)
        mult = torch.full((self.modes,), 2.0, dtype=DTYPE)
        mult[0] = 1.0
        if n % 2 == 0 and self.modes == n // 2 + 1:
            mult[-1] = 1.0
        self.register_buffer("fwd", torch.cat([torch.cos(ang), -torch.sin(ang)], dim=1))
        self.register_buffer("inv", torch.cat([torch.cos(ang).T, -torch.sin(ang).T], dim=0)
                             * torch.cat([mult, mult]).unsqueeze(1) / n)

    def forward(self, h):
        m = self.modes
        spec = (h @ self.fwd).permute(2, 0, 1)                       # (2m, B, W)
        re, im = spec[:m], spec[m:]
        wr, wi = self.weight[0], self.weight[1]
        out = torch.cat([torch.bmm(re, wr) - torch.bmm(im, wi),
                         torch.bmm(re, wi) + torch.bmm(im, wr)])     # (2m, B, W)
        return out.permute(1, 2, 0) @ self.inv


class OperatorModel(nn.Module):
    """G(code, x) -> (mu_{t_1}(x), ..., mu_{t_N}(x))."""

    def __init__(self, layout: CodeLayout, N: int, box, T: float = 1.0, code_bounds=None,
                 width: int = 16, layers: int = 3, modes: int = 8, proj_hidden: int = 32,
                 seed: int = 0):
        super().__init__()
        self.layout = layout
        self.N, self.T, self.d = int(N), float(T), int(layout.dim)
        lo, hi = (np.asarray(b, dtype=float).reshape(self.d) for b in box)
        self.box = (tuple(lo.tolist()), tuple(hi.tolist()))
        self.arch = dict(width=int(width), layers=int(layers),
                         modes=int(min(modes, self.N // 2 + 1)), proj_hidden=int(proj_hidden))
        if code_bounds is None:
            clo, chi = -np.ones(layout.size), np.ones(layout.size)
        else:
            clo, chi = (np.asarray(b, dtype=float).reshape(layout.size) for b in code_bounds)
        half = (chi - clo) / 2
        self.register_buffer("code_center", torch.as_tensor((clo + chi) / 2, dtype=DTYPE))
        self.register_buffer("code_scale", torch.as_tensor(np.where(half > 0, half, 1.0),
                                                           dtype=DTYPE))
        self.register_buffer("x_center", torch.as_tensor((lo + hi) / 2, dtype=DTYPE))
        self.register_buffer("x_scale", torch.as_tensor((hi - lo) / 2, dtype=DTYPE))
        self.register_buffer("times", torch.arange(1, self.N + 1, dtype=DTYPE) / self.N)
        feat = layout.size + self.d + 1
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.lift = nn.Linear(feat, width).to(DTYPE)
            self.spectral = nn.ModuleList(SpectralMix(width, self.arch["modes"], self.N)
                                          for _ in range(layers))
            self.pointwise = nn.ModuleList(nn.Conv1d(width, width, 1).to(DTYPE)
                                           for _ in range(layers))
            self.proj = nn.Sequential(nn.Linear(width, proj_hidden), nn.Tanh(),
                                      nn.Linear(proj_hidden, 1)).to(DTYPE)

    # -- evaluation ---------------------------------------------------------
    def raw(self, codes, x):
        """Raw log-densities.  codes: (C,) or (B, C); x: (M, d) or (B, M, d) -> (..., M, N)."""
        codes = torch.as_tensor(codes, dtype=DTYPE)
        x = torch.as_tensor(x, dtype=DTYPE)
        single = codes.dim() == 1
        if single:
            codes, x = codes.unsqueeze(0), x.unsqueeze(0)
        B, M = x.shape[0], x.shape[1]
        c = ((codes - self.code_center) / self.code_scale).unsqueeze(1).expand(B, M, -1)
        xn = (x - self.x_center) / self.x_scale
        static = torch.cat([c, xn], dim=-1).reshape(B * M, 1, -1).expand(-1, self.N, -1)
        t = self.times.view(1, self.N, 1).expand(B * M, -1, -1)
        h = self.lift(torch.cat([static, t], dim=-1)).transpose(1, 2)   # (BM, W, N)
        last = len(self.spectral) - 1
        for i, (sm, pw) in enumerate(zip(self.spectral, self.pointwise)):
            h = sm(h) + pw(h)
            if i < last:
                h = torch.tanh(h)
        out = self.proj(h.transpose(1, 2)).squeeze(-1).clamp(*RAW_LIMITS)
        out = out.reshape(B, M, self.N)
        return out[0] if single else out

    def forward(self, codes, x):
        return torch.exp(self.raw(codes, x))

    def descriptor(self) -> dict:
        return dict(kind="OperatorModel", schema_version=SCHEMA_VERSION,
                    layout=self.layout.descriptor(), N=self.N, T=self.T,
                    box=[list(self.box[0]), list(self.box[1])], arch=self.arch)


def _check_layout(model: OperatorModel, code: BoundaryCode) -> None:
    if code.layout != model.layout:
        raise LayoutError(f"code layout {code.layout.descriptor()} does not match the model's "
                          f"{model.layout.descriptor()}")


def operator_eval(model: OperatorModel, code: BoundaryCode, queries, chunk: int = 4096) -> np.ndarray:
    """Density matrix (M, N) at the query points for one boundary code."""
    _check_layout(model, code)
    q = np.asarray(queries, dtype=float).reshape(-1, model.d)
    if not np.all(np.isfinite(q)):
        raise ValueError("queries must be finite")
    out = np.empty((len(q), model.N))
    vec = torch.as_tensor(code.vector)
    with torch.no_grad():
        for s in range(0, len(q), chunk):
            out[s:s + chunk] = model(vec, torch.as_tensor(q[s:s + chunk])).numpy()
    return out


# ---------------------------------------------------------------------------
# Samples and the operator loss


@dataclass
class TrainSample:
    code: BoundaryCode
    queries: np.ndarray      # (M, d)
    targets: np.ndarray      # (M, N)

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.queries.ndim != 2 or self.targets.ndim != 2 or \
                len(self.queries) != len(self.targets):
            raise ValueError("queries must be (M, d) and targets (M, N)")
        if not (np.all(np.isfinite(self.targets)) and np.all(self.targets >= 0)):
            raise ValueError("targets must be finite and non-negative")


def loss_pino(model: OperatorModel, sample: TrainSample):
    """(1/(N M)) sum_n sum_i (G(code, x_i)_n - mu_{t_n}(x_i))^2."""
    _check_layout(model, sample.code)
    pred = model(torch.as_tensor(sample.code.vector), torch.as_tensor(sample.queries))
    return ((pred - torch.as_tensor(sample.targets)) ** 2).mean()


def _batch_loss(model, samples, rng=None, per_sample=None):
    """Mean l_PINO over samples; optionally on a random subset of each sample's queries."""
    codes = torch.as_tensor(np.stack([s.code.vector for s in samples]))
    if rng is not None and per_sample and per_sample < min(len(s.queries) for s in samples):
        picks = [np.sort(rng.choice(len(s.queries), per_sample, replace=False)) for s in samples]
    else:
        picks = [slice(None)] * len(samples)
    q = torch.as_tensor(np.stack([s.queries[i] for s, i in zip(samples, picks)]))
    tgt = torch.as_tensor(np.stack([s.targets[i] for s, i in zip(samples, picks)]))
    return ((model(codes, q) - tgt) ** 2).mean()


def heldout_loss(model: OperatorModel, samples: Sequence[TrainSample]) -> float:
    """Mean l_PINO over samples, without gradients."""
    with torch.no_grad():
        return float(np.mean([float(loss_pino(model, s)) for s in samples]))


# ---------------------------------------------------------------------------
# Density sources and inner solvers


def _sample_level(source, n: int, M: int, seed: int, stream: int):
    if isinstance(source, DensityFlow):
        with torch.no_grad():
            return source.push_samples(n, M, seed, stream)
    return source.sample(n, M, seed, stream)


def make_sample(code: BoundaryCode, source, M: int, seed: int = 0, stream: int = 0,
                box=None, box_fraction: float = 0.0) -> TrainSample:
    """Queries drawn evenly from the marginals at steps 1..N, with densities at every step.

    With ``box_fraction`` > 0 that share of the queries is instead uniform
    over ``box``, so the targets also cover regions the crowd never visits.
    """
    N = source.N
    n_box = int(round(box_fraction * M)) if box is not None else 0
    counts = np.full(N, (M - n_box) // N)
    counts[: (M - n_box) % N] += 1
    pts = [_sample_level(source, n + 1, int(c), seed, stream * (N + 1) + n)
           for n, c in enumerate(counts) if c]
    if n_box:
        lo, hi = (np.asarray(b, dtype=float) for b in box)
        u = _io.generator(seed, 41, stream).uniform(lo, hi, size=(n_box, len(lo)))
        pts.append(torch.as_tensor(u, dtype=DTYPE))
    q = torch.cat(pts) if pts else torch.zeros(0, code.layout.dim, dtype=DTYPE)
    with torch.no_grad():
        tgt = torch.stack([torch.exp(source.log_density(q, n)) for n in range(1, N + 1)], dim=-1)
    return TrainSample(code, q.numpy(), tgt.numpy())


@dataclass
class InnerResult:
    source: object
    rounds: int
    converged: bool
    seconds: float = 0.0
    trace: list = field(default_factory=list)


def nf_inner_solver(config: Optional[TrainConfig] = None) -> Callable:
    """Inner solves by :func:`fbsde.train_fixed` with the given configuration."""
    base = config or TrainConfig()

    def solve(problem: MFGProblem, warm_start=None, warm_weight: float = 1.0) -> InnerResult:
        cfg = replace(base, warm_weight=base.warm_weight * warm_weight)
        ws = warm_start if warm_weight > 0 else None
        res = train_fixed(problem, cfg, warm_start=ws)
        return InnerResult(res.flow, res.rounds, res.converged, res.seconds, res.trace)

    return solve


def _is_lq(problem: MFGProblem) -> bool:
    if problem.obstacles or problem.congestion or problem.hamiltonian.name != "quadratic":
        return False
    lo, hi = (np.asarray(b) for b in problem.box)
    probe = torch.as_tensor(np.stack([lo, hi, (lo + hi) / 2]), dtype=DTYPE)
    return bool(torch.all(problem.running_cost(probe, 0.0) == 0))


def exact_lq_solver(problem: MFGProblem, warm_start=None, warm_weight: float = 0.0) -> InnerResult:
    """Closed-form inner solve for obstacle-free quadratic problems."""
    if not _is_lq(problem):
        raise ValueError("exact_lq_solver needs a quadratic problem without running cost")
    t0 = time.perf_counter()
    src = LQDensity(LQSolution.for_problem(problem), problem.N)
    return InnerResult(src, 0, True, time.perf_counter() - t0)


class OperatorWarmStart:
    """Operator predictions for one code, in the warm-start protocol of ``train_fixed``."""

    def __init__(self, model: OperatorModel, code: BoundaryCode):
        _check_layout(model, code)
        self.model, self.code = model, code
        self.vec = torch.as_tensor(code.vector)

    def log_density_levels(self, xs):
        """log G(code, xs[k])_k for levels k = 1..K (xs: (K, M, d))."""
        K, M, d = xs.shape
        raw = self.model.raw(self.vec, xs.reshape(K * M, d)).reshape(K, M, self.model.N)
        idx = torch.arange(K)
        return raw[idx, :, idx]


# ---------------------------------------------------------------------------
# Training


@dataclass
class PionmConfig:
    queries: int = 256
    steps_per_code: int = 20
    replay: int = 4
    lr: float = 1e-3
    warm_weight: float = 1.0
    warm_ramp: int = 4
    box_fraction: float = 0.25
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "PionmConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown operator options: {sorted(unknown)}")
        return cls(**doc)


REPORT_COLUMNS = ("iteration", "code_digest", "inner_rounds", "l_pino", "best_l_pino", "status")


@dataclass
class SessionReport:
    rows: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def trace(self) -> list:
        return [r["l_pino"] for r in self.rows if r["status"] == "used"]

    @property
    def best_trace(self) -> list:
        return [r["best_l_pino"] for r in self.rows if r["status"] == "used"]

    def write_csv(self, path) -> None:
        _io.write_csv(path, REPORT_COLUMNS, [[r[c] for c in REPORT_COLUMNS] for r in self.rows])


def fit_operator(model: OperatorModel, samples: Sequence[TrainSample], steps: int,
                 lr: float = 1e-3, batch: int = 8, queries_per_step: Optional[int] = None,
                 cosine: bool = True, seed: int = 0, opt=None) -> list:
    """Adam on l_PINO over mini-batches of stored samples; returns the loss trace.

    Each step uses ``batch`` samples and, if given, ``queries_per_step``
    random queries from each of them.  With ``cosine`` the learning rate
    decays to zero over the ``steps``.
    """
    if not samples or steps <= 0:
        return []
    params = list(model.parameters())
    opt = opt or torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps) if cosine else None
    rng = _io.generator(seed, 31)
    trace = []
    for _ in range(steps):
        idx = rng.choice(len(samples), size=min(batch, len(samples)), replace=False)
        loss = _batch_loss(model, [samples[i] for i in np.sort(idx)], rng, queries_per_step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        trace.append(float(loss.detach()))
    return trace


def train_pionm(sampler: Callable, problem_builder: Callable, budget: int,
                config: Optional[PionmConfig] = None, model: Optional[OperatorModel] = None,
                inner_solver: Optional[Callable] = None, validation: Sequence[TrainSample] = (),
                report_path=None):
    """Outer loop: draw a code, warm-start an inner solve from the current
    operator, sample its density flow and update the operator on l_PINO.

    ``budget`` is the number of codes drawn.  Inner solves that do not
    converge are logged and skipped.  When ``validation`` samples are given
    the best model by validation l_PINO is returned; otherwise the best
    value of the per-iteration loss is tracked.
    """
    cfg = config or PionmConfig()
    model = model or OperatorModel(sampler.layout, sampler.N, sampler.box,
                                   code_bounds=sampler.bounds(), seed=cfg.seed)
    solve = inner_solver or nf_inner_solver()
    rng = _io.generator(cfg.seed, 17)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    report = SessionReport()
    buffer: list = []
    best, best_state = math.inf, None
    t0 = time.perf_counter()
    for it in range(int(budget)):
        code = sampler(rng)
        problem = problem_builder(code)
        ramp = min(1.0, it / cfg.warm_ramp) if cfg.warm_ramp > 0 else 1.0
        warm = OperatorWarmStart(model, code) if cfg.warm_weight * ramp > 0 else None
        inner = solve(problem, warm, cfg.warm_weight * ramp)
        if not inner.converged:
            log.warning("iteration %d: inner solve for %s did not converge; sample skipped",
                        it, code.digest())
            report.rows.append(dict(iteration=it, code_digest=code.digest(),
                                    inner_rounds=inner.rounds, l_pino=float("nan"),
                                    best_l_pino=best, status="skipped"))
            continue
        sample = make_sample(code, inner.source, cfg.queries, cfg.seed, stream=it,
                             box=sampler.box, box_fraction=cfg.box_fraction)
        buffer.append(sample)
        for k in range(cfg.steps_per_code):
            extra = []
            if len(buffer) > 1 and cfg.replay:
                pick = rng.choice(len(buffer) - 1, size=min(cfg.replay, len(buffer) - 1),
                                  replace=False)
                extra = [buffer[i] for i in np.sort(pick)]
            loss = _batch_loss(model, [sample, *extra])
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            l_now = float(loss_pino(model, sample))
        score = heldout_loss(model, validation) if validation else l_now
        if score < best:
            best = score
            best_state = copy.deepcopy(model.state_dict())
        report.rows.append(dict(iteration=it, code_digest=code.digest(), inner_rounds=inner.rounds,
                                l_pino=l_now, best_l_pino=best, status="used"))
    if validation and best_state is not None:
        model.load_state_dict(best_state)
    report.seconds = time.perf_counter() - t0
    if report_path is not None:
        report.write_csv(report_path)
    return model, report


def collect_samples(codes: Sequence[BoundaryCode], problem_builder: Callable, M: int,
                    inner_solver: Callable = exact_lq_solver, seed: int = 0, box=None,
                    box_fraction: float = 0.0) -> list:
    """Inner-solve each code (cold) and draw one training sample from it."""
    out = []
    for i, code in enumerate(codes):
        inner = inner_solver(problem_builder(code))
        if not inner.converged:
            log.warning("inner solve for %s did not converge; skipped", code.digest())
            continue
        out.append(make_sample(code, inner.source, M, seed, stream=i, box=box,
                               box_fraction=box_fraction))
    return out


# ---------------------------------------------------------------------------
# Inference


@dataclass
class Inference:
    points: np.ndarray       # (P, d)
    axes: list
    fields: np.ndarray       # (P, N)
    masses: np.ndarray       # (N,)
    seconds: float
    resolution: tuple


def infer_equilibrium(model: OperatorModel, code: BoundaryCode, resolution=100, box=None,
                      chunk: int = 2500) -> Inference:
    """Density fields at steps 1..N on a cell-centered lattice, with their masses."""
    _check_layout(model, code)
    t0 = time.perf_counter()
    box = box or model.box
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    mlo, mhi = (np.asarray(b) for b in model.box)
    if np.any(lo < mlo - 1e-9) or np.any(hi > mhi + 1e-9):
        raise ValueError(f"lattice box {box} leaves the model's working box {model.box}")
    res = tuple(int(r) for r in np.broadcast_to(resolution, lo.shape))
    pts, axes, cell = grid_points((lo, hi), res)
    fields = operator_eval(model, code, pts, chunk)
    masses = fields.sum(axis=0) * cell
    return Inference(pts, axes, fields, masses, time.perf_counter() - t0, res)


# ---------------------------------------------------------------------------
# Checkpoints


def save_operator(path, model: OperatorModel) -> None:
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    _io.save_npz(path, model.descriptor(), arrays)


def load_operator(path, layout: Optional[CodeLayout] = None) -> OperatorModel:
    header, arrays = _io.load_npz(path)
    if header.get("kind") != "OperatorModel" or header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path} is not an operator checkpoint of schema {SCHEMA_VERSION}")
    stored = CodeLayout(**header["layout"])
    if layout is not None and layout != stored:
        raise LayoutError(f"checkpoint layout {header['layout']} does not match "
                          f"{layout.descriptor()}")
    model = OperatorModel(stored, header["N"], header["box"], header["T"], **header["arch"])
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    return model


# ---------------------------------------------------------------------------
# Code samplers


class UniformCodeSampler:
    """Uniform draws over per-field ranges for a fixed layout.

    ``ranges`` maps init_mean/target to per-axis (lo, hi) pairs and
    init_std/sigma to (lo, hi); obstacle centers, radii (or axes) and the
    obstacle count range are separate arguments.
    """

    def __init__(self, layout: CodeLayout, ranges: dict, N: int, box, T: float = 1.0,
                 n_obstacles=(0, 0), obstacle_center=None, obstacle_size=(1.0, 4.0)):
        self.layout, self.ranges, self.N, self.T = layout, ranges, int(N), float(T)
        self.box = box
        self.n_obstacles = tuple(n_obstacles)
        self.obstacle_center = obstacle_center
        self.obstacle_size = tuple(obstacle_size)

    def _u(self, rng, lohi):
        lohi = np.asarray(lohi, dtype=float).reshape(-1, 2)
        return rng.uniform(lohi[:, 0], lohi[:, 1])

    def __call__(self, rng) -> BoundaryCode:
        from .core import Obstacle
        r = self.ranges
        m = self._u(rng, r["init_mean"])
        s0 = float(self._u(rng, r["init_std"])[0])
        tgt = self._u(rng, r["target"])
        sig = float(self._u(rng, r["sigma"])[0])
        k = int(rng.integers(self.n_obstacles[0], self.n_obstacles[1] + 1))
        obs = []
        for _ in range(k):
            c = tuple(self._u(rng, self.obstacle_center))
            if self.layout.obstacle_kind == "circle":
                obs.append(Obstacle(center=c, radius=float(rng.uniform(*self.obstacle_size))))
            else:
                obs.append(Obstacle(center=c, axes=tuple(rng.uniform(*self.obstacle_size, size=2))))
        return BoundaryCode(tuple(m), s0, tuple(tgt), sig, obstacles=tuple(obs), layout=self.layout)

    def draw(self, count: int, seed: int, stream: int = 0) -> list:
        rng = _io.generator(seed, 23, stream)
        return [self(rng) for _ in range(count)]

    def bounds(self):
        """Per-slot (lo, hi) of the code vector, used to normalize model inputs."""
        lay, s = self.layout, self.layout.slots()
        lo, hi = np.zeros(lay.size), np.zeros(lay.size)
        for key in ("init_mean", "target", "init_std", "sigma"):
            lohi = np.asarray(self.ranges[key], dtype=float).reshape(-1, 2)
            lo[s[key]], hi[s[key]] = lohi[:, 0], lohi[:, 1]
        for k in range(lay.max_obstacles):
            sl = s[f"obstacle{k}"]
            c = np.asarray(self.obstacle_center, dtype=float).reshape(-1, 2) \
                if self.obstacle_center is not None else np.zeros((lay.dim, 2))
            size_lo = np.full(lay.obstacle_width - lay.dim, min(0.0, self.obstacle_size[0]))
            size_hi = np.full(lay.obstacle_width - lay.dim, self.obstacle_size[1])
            lo[sl] = np.concatenate([c[:, 0], size_lo])
            hi[sl] = np.concatenate([c[:, 1], size_hi])
        return lo, hi


TOY_LAYOUT = CodeLayout(dim=1, max_obstacles=0)
TOY_BOX = ((-8.0,), (6.0,))
TOY_RANGES = dict(init_mean=[(-2.0, 0.0)], init_std=(0.3, 0.8), target=[(0.5, 2.0)],
                  sigma=(0.3, 1.0))

CROWD_LAYOUT = CodeLayout(dim=2, max_obstacles=2, obstacle_kind="circle")
CROWD_RANGES = dict(init_mean=[(-10.0, -5.0), (-5.0, 5.0)], init_std=(0.2, 1.0),
                    target=[(3.0, 10.0), (-5.0, 5.0)], sigma=(0.2, 2.0))
CROWD_BOX = ((-16.0, -12.0), (16.0, 12.0))


def toy_sampler(N: int = 20, T: float = 1.0, ranges=None) -> UniformCodeSampler:
    """1D obstacle-free family: init mean, init std, target and sigma drawn uniformly."""
    return UniformCodeSampler(TOY_LAYOUT, ranges or TOY_RANGES, N, TOY_BOX, T)


def toy_problem_builder(N: int = 20, T: float = 1.0) -> Callable:
    return lambda code: build_crowd_motion(code, N=N, T=T, box=TOY_BOX)


def crowd_sampler(N: int = 50, T: float = 1.0, obstacle_kind: str = "circle") -> UniformCodeSampler:
    """2D crowd-motion family with 0-2 obstacles, covering every experiment family."""
    layout = CodeLayout(dim=2, max_obstacles=2, obstacle_kind=obstacle_kind)
    return UniformCodeSampler(layout, CROWD_RANGES, N, CROWD_BOX, T, n_obstacles=(0, 2),
                              obstacle_center=[(-3.0, 3.0), (-3.0, 3.0)],
                              obstacle_size=(1.0, 4.0))
