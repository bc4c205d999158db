"""Finite-volume fixed-point oracle for small HJB-FPK systems, plus closed-form LQ laws.

HJB: for the quadratic Hamiltonian the default solver uses the Hopf-Cole
substitution ``w = exp(-u / (2 nu))``, which turns the backward equation
into a linear implicit diffusion-reaction solve.  ``scheme="godunov"``
instead uses implicit diffusion with an explicit Godunov upwind
Hamiltonian.  FPK: implicit Euler with Scharfetter-Gummel (exponentially
fitted upwind) face fluxes and no-flux walls, so each step conserves mass
to round-off and keeps the density non-negative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch
from scipy.interpolate import RegularGridInterpolator

from . import _io
from .core import MFGProblem


class StabilityError(ValueError):
    """Grid/time step violates the scheme's stability or representability bound."""


@dataclass(frozen=True)
class GridSpec:
    lo: tuple
    hi: tuple
    points: tuple
    N_t: int
    cfl: float = 1.0

    def __post_init__(self):
        lo, hi = tuple(map(float, self.lo)), tuple(map(float, self.hi))
        pts = tuple(int(p) for p in np.broadcast_to(self.points, (len(lo),)))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "points", pts)
        if len(lo) not in (1, 2) or len(hi) != len(lo):
            raise ValueError("grid oracle supports 1D and 2D boxes")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError("box upper bounds must exceed lower bounds")
        limit = 128 if len(lo) == 1 else 64
        if any(p < 8 or p > limit for p in pts):
            raise ValueError(f"points per dimension must be in [8, {limit}] for {len(lo)}D")
        if self.N_t < 1:
            raise ValueError("N_t must be positive")

    @classmethod
    def for_problem(cls, problem: MFGProblem, points, N_t: int, box=None, cfl: float = 1.0,
                    scheme: str = "hopf-cole") -> "GridSpec":
        lo, hi = box or problem.box
        g = cls(lo, hi, points, N_t, cfl)
        g.check(problem, scheme)
        return g

    @classmethod
    def stable_for(cls, problem: MFGProblem, points, box=None, cfl: float = 1.0,
                   scheme: str = "hopf-cole") -> "GridSpec":
        """Grid with the smallest N_t (a multiple of the problem's N) meeting the CFL bound."""
        lo, hi = box or problem.box
        probe = cls(lo, hi, points, problem.N, cfl)
        vmax = probe.drift_bound(problem) if problem.hamiltonian.name != "zero" else 0.0
        need = problem.T * vmax / (cfl * float(probe.h.min()))
        N_t = problem.N * max(1, math.ceil(need / problem.N - 1e-12))
        return cls.for_problem(problem, points, N_t, box, cfl, scheme)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def h(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / np.asarray(self.points)

    @property
    def cell(self) -> float:
        return float(np.prod(self.h))

    @property
    def shape(self) -> tuple:
        return self.points

    def axes(self):
        return [l + (np.arange(p) + 0.5) * h for l, p, h in zip(self.lo, self.points, self.h)]

    def centers(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def drift_bound(self, problem: MFGProblem) -> float:
        """A priori bound on |grad u|: the largest terminal-cost gradient on the grid."""
        x = torch.as_tensor(self.centers(), dtype=torch.float64).requires_grad_(True)
        (g,) = torch.autograd.grad(problem.terminal_cost(x).sum(), x)
        return float(g.norm(dim=-1).max())

    def check(self, problem: MFGProblem, scheme: str = "hopf-cole") -> None:
        dt = problem.T / self.N_t
        if self.N_t % problem.N:
            raise StabilityError(f"N_t={self.N_t} must be a multiple of the problem's N={problem.N}")
        vmax = self.drift_bound(problem) if problem.hamiltonian.name != "zero" else 0.0
        courant = dt * vmax / float(self.h.min())
        if courant > self.cfl:
            raise StabilityError(
                f"CFL violated: dt*|v|max/dx = {courant:.3g} > {self.cfl} "
                f"(dt={dt:.3g}, |v|max={vmax:.3g}, dx={self.h.min():.3g}); increase N_t")
        if scheme == "hopf-cole" and problem.hamiltonian.name == "quadratic":
            x = torch.as_tensor(self.centers(), dtype=torch.float64)
            g = problem.terminal_cost(x).numpy()
            span = (g.max() - g.min()) / (2 * problem.viscosity)
            if span > 600:
                raise StabilityError(
                    f"Hopf-Cole transform underflows (cost span / 2nu = {span:.0f}); "
                    "use scheme='godunov'")


def _laplacian(grid: GridSpec) -> sp.csr_matrix:
    """Cell-centered Laplacian with homogeneous Neumann walls."""
    ops = []
    for p, h in zip(grid.points, grid.h):
        main = -2.0 * np.ones(p)
        main[0] = main[-1] = -1.0
        off = np.ones(p - 1)
        ops.append(sp.diags([off, main, off], [-1, 0, 1]) / h**2)
    if grid.dim == 1:
        return ops[0].tocsr()
    I0, I1 = sp.identity(grid.points[0]), sp.identity(grid.points[1])
    return (sp.kron(ops[0], I1) + sp.kron(I0, ops[1])).tocsr()


def _bernoulli(z):
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    small = np.abs(z) < 1e-8
    zs = z[~small]
    out[~small] = zs / np.expm1(zs)
    out[small] = 1.0 - z[small] / 2.0
    return out


def _fpk_operator(grid: GridSpec, u: np.ndarray, nu: float) -> sp.csr_matrix:
    """Flux-divergence operator D with d(mu)/dt = -D mu for drift -grad u.

    Columns of D sum to zero (flux leaving one cell enters its neighbour).
    """
    shape = grid.shape
    n = int(np.prod(shape))
    idx = np.arange(n).reshape(shape)
    rows, cols, vals = [], [], []
    for ax, h in enumerate(grid.h):
        lo_sl = [slice(None)] * grid.dim
        hi_sl = [slice(None)] * grid.dim
        lo_sl[ax] = slice(0, -1)
        hi_sl[ax] = slice(1, None)
        i = idx[tuple(lo_sl)].ravel()
        j = idx[tuple(hi_sl)].ravel()
        v = -(u.reshape(shape)[tuple(hi_sl)] - u.reshape(shape)[tuple(lo_sl)]).ravel() / h
        pe = v * h / nu
        a = nu / h * _bernoulli(-pe)     # coefficient on mu_i in flux i -> j
        b = nu / h * _bernoulli(pe)      # coefficient on mu_j
        # F = a mu_i - b mu_j leaves i, enters j; divergence scaled by 1/h
        rows += [i, i, j, j]
        cols += [i, j, i, j]
        vals += [a / h, -b / h, -a / h, b / h]
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n))


@dataclass
class OracleSolution:
    grid: GridSpec
    T: float
    u: np.ndarray          # (N_t+1, P) value on cell centers
    mu: np.ndarray         # (N_t+1, P) density on cell centers
    trace: list            # successive-mu L1 changes
    converged: bool
    mass_drift: float = 0.0
    times: np.ndarray = field(default=None)

    def levels(self, N: int):
        """Indices of the oracle time levels matching t_n = nT/N."""
        N_t = self.u.shape[0] - 1
        if N_t % N:
            raise ValueError(f"oracle N_t={N_t} is not a multiple of N={N}")
        return np.arange(N + 1) * (N_t // N)

    def masses(self) -> np.ndarray:
        return self.mu.sum(axis=1) * self.grid.cell


def _initial_density(problem: MFGProblem, grid: GridSpec) -> np.ndarray:
    x = grid.centers()
    m = np.asarray(problem.mu0_mean)
    q = ((x - m) ** 2).sum(-1) / problem.mu0_std**2
    rho = np.exp(-0.5 * q)
    return rho / (rho.sum() * grid.cell)


def _costs(problem: MFGProblem, grid: GridSpec, t: float, mu=None, interp=None) -> np.ndarray:
    x = torch.as_tensor(grid.centers(), dtype=torch.float64)
    density = None
    if problem.congestion and mu is not None:
        flat = torch.as_tensor(mu)
        density = lambda y: flat  # noqa: E731  (evaluated on the cell centers only)
    return problem.running_cost(x, t, density).detach().numpy()


def _solve_hjb(problem, grid, mu, scheme):
    nu = problem.viscosity
    N_t = mu.shape[0] - 1
    dt = problem.T / N_t
    L = _laplacian(grid)
    n = L.shape[0]
    x = torch.as_tensor(grid.centers(), dtype=torch.float64)
    g = problem.terminal_cost(x).detach().numpy()
    u = np.empty((N_t + 1, n))
    u[-1] = g
    times = np.arange(N_t + 1) * dt
    kind = problem.hamiltonian.name
    f_static = None if problem.congestion else _costs(problem, grid, 0.0)
    I = sp.identity(n, format="csc")

    if kind == "zero" or scheme == "godunov":
        lu = spla.splu((I - dt * nu * L).tocsc())
        for k in range(N_t - 1, -1, -1):
            f = f_static if f_static is not None else _costs(problem, grid, times[k], mu[k])
            rhs = u[k + 1] + dt * f
            if kind != "zero":
                rhs = rhs - dt * _godunov_h(u[k + 1], grid)
            u[k] = lu.solve(rhs)
        return u

    # Hopf-Cole: w = exp(-(u - c)/(2 nu)); backward: (I - dt nu L + dt f/(2nu)) w^k = w^{k+1}
    c = g.min()
    w = np.exp(-(g - c) / (2 * nu))
    lu = None
    for k in range(N_t - 1, -1, -1):
        f = f_static if f_static is not None else _costs(problem, grid, times[k], mu[k])
        if lu is None or f_static is None:
            A = (I - dt * nu * L + dt * sp.diags(f / (2 * nu))).tocsc()
            lu = spla.splu(A)
        w = lu.solve(w)
        u[k] = c - 2 * nu * np.log(np.maximum(w, 1e-300))
    return u


def _godunov_h(u, grid):
    """Godunov upwind discretization of |grad u|^2 / 2 with one-sided differences."""
    U = u.reshape(grid.shape)
    H = np.zeros(grid.shape)
    for ax, h in enumerate(grid.h):
        fwd = np.diff(U, axis=ax, append=np.take(U, [-1], axis=ax)) / h
        bwd = np.diff(U, axis=ax, prepend=np.take(U, [0], axis=ax)) / h
        H += 0.5 * (np.maximum(bwd, 0) ** 2 + np.minimum(fwd, 0) ** 2)
    return H.ravel()


def _solve_fpk(problem, grid, u, mu0):
    nu = problem.viscosity
    N_t = u.shape[0] - 1
    dt = problem.T / N_t
    n = mu0.size
    I = sp.identity(n, format="csc")
    mu = np.empty((N_t + 1, n))
    mu[0] = mu0
    drift = problem.hamiltonian.name != "zero"
    zero_u = np.zeros(n)
    lu_static = None
    drift_max = 0.0
    for k in range(N_t):
        if drift:
            A = (I + dt * _fpk_operator(grid, u[k], nu)).tocsc()
            lu = spla.splu(A)
        else:
            if lu_static is None:
                lu_static = spla.splu((I + dt * _fpk_operator(grid, zero_u, nu)).tocsc())
            lu = lu_static
        mu[k + 1] = lu.solve(mu[k])
        drift_max = max(drift_max, abs(mu[k + 1].sum() - mu[k].sum()) * grid.cell)
    return mu, drift_max


def solve_fixed_point(problem: MFGProblem, grid: GridSpec, damping: float = 0.5,
                      max_iter: int = 200, tol: float = 1e-6, scheme: str = "hopf-cole"
                      ) -> OracleSolution:
    """Damped HJB/FPK fixed-point iteration on the grid."""
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if problem.d != grid.dim:
        raise ValueError("grid dimension does not match the problem")
    grid.check(problem, scheme)
    mu0 = _initial_density(problem, grid)
    N_t = grid.N_t
    mu = np.repeat(mu0[None], N_t + 1, axis=0)
    trace, converged, drift = [], False, 0.0
    u = new = None
    coupled = bool(problem.congestion)
    for it in range(max_iter):
        if coupled or u is None:
            u = _solve_hjb(problem, grid, mu, scheme)
            new, drift = _solve_fpk(problem, grid, u, mu0)
        mixed = (1 - damping) * mu + damping * new
        change = float(np.abs(mixed - mu).sum(axis=1).max() * grid.cell)
        mu = mixed
        trace.append(change)
        if change < tol:
            converged = True
            break
    return OracleSolution(grid=grid, T=problem.T, u=u, mu=mu, trace=trace, converged=converged,
                          mass_drift=drift, times=np.linspace(0, problem.T, N_t + 1))


class GridDensity:
    """Flow-like view of an oracle density: log-densities at N+1 levels by interpolation."""

    def __init__(self, sol: OracleSolution, N: int, floor: float = 1e-300):
        self.sol, self.N, self.d, self.T = sol, int(N), sol.grid.dim, sol.T
        self._idx = sol.levels(N)
        self.floor = floor
        self._interp = [
            RegularGridInterpolator(tuple(sol.grid.axes()), sol.mu[k].reshape(sol.grid.shape),
                                    bounds_error=False, fill_value=0.0)
            for k in self._idx
        ]

    def density(self, x, n: int):
        x = np.asarray(x.detach() if isinstance(x, torch.Tensor) else x, dtype=float)
        return torch.as_tensor(np.maximum(self._interp[n](x), 0.0))

    def log_density(self, x, n: int):
        return torch.log(torch.clamp(self.density(x, n), min=self.floor))

    def log_density_levels(self, xs):
        """Levels 1..N for xs of shape (N, M, d) (warm-start protocol)."""
        return torch.stack([self.log_density(xs[k], k + 1) for k in range(xs.shape[0])])


def compare_to_flow(sol: OracleSolution, flow, vp=None) -> dict:
    """Per-level L1 density error and value RMSE of a flow (and value path) on the oracle grid."""
    if abs(float(flow.T) - sol.T) > 1e-12:
        raise ValueError(f"horizon mismatch: flow T={flow.T}, oracle T={sol.T}")
    if flow.d != sol.grid.dim:
        raise ValueError("dimension mismatch between flow and oracle grid")
    idx = sol.levels(flow.N)
    x = sol.grid.centers()
    cell = sol.grid.cell
    l1 = []
    with torch.no_grad():
        for n, k in enumerate(idx):
            dens = flow.density(torch.as_tensor(x), n)
            dens = dens.numpy() if isinstance(dens, torch.Tensor) else np.asarray(dens)
            l1.append(float(np.abs(dens - sol.mu[k]).sum() * cell))
    out = dict(l1=np.array(l1), max_l1=float(max(l1)))
    if vp is not None:
        rmse, wrmse = [], []
        xt = torch.as_tensor(x)
        with torch.no_grad():
            for n, k in enumerate(idx[:-1]):
                err = vp.value(xt, n).numpy() - sol.u[k]
                rmse.append(float(np.sqrt(np.mean(err**2))))
                w = sol.mu[k] * cell
                wrmse.append(float(np.sqrt(np.sum(w * err**2) / w.sum())))
        out.update(value_rmse=np.array(rmse), value_rmse_weighted=np.array(wrmse))
    return out


def save_fields(path, sol: OracleSolution) -> None:
    header = dict(kind="OracleFields", dims=sol.grid.dim, lo=list(sol.grid.lo),
                  hi=list(sol.grid.hi), points=list(sol.grid.points), N_t=sol.grid.N_t, T=sol.T,
                  converged=sol.converged)
    _io.save_npz(path, header, dict(u=sol.u, mu=sol.mu, trace=np.asarray(sol.trace)))


def load_fields(path) -> OracleSolution:
    header, arrays = _io.load_npz(path)
    grid = GridSpec(header["lo"], header["hi"], tuple(header["points"]), header["N_t"])
    return OracleSolution(grid=grid, T=header["T"], u=arrays["u"], mu=arrays["mu"],
                          trace=list(arrays["trace"]), converged=header["converged"],
                          times=np.linspace(0, header["T"], header["N_t"] + 1))


class LQSolution:
    """Closed form for g = q|x - x_T|^2, f = 0, H = |p|^2/2, dX = alpha dt + sigma dW.

    u(t, x) = P(t)|x - x_T|^2 / 2 + nu d log(s(t)/c) with s = c + T - t,
    c = 1/(2q), P = 1/s.  The law stays Gaussian with mean
    x_T + (m0 - x_T) s(t)/s(0) and per-axis variance
    s^2 [v0/s(0)^2 + sigma^2 (1/s - 1/s(0))].
    """

    def __init__(self, m0, s0: float, target, sigma: float, T: float = 1.0, q: float = 1.0):
        self.m0 = np.atleast_1d(np.asarray(m0, dtype=float))
        self.target = np.atleast_1d(np.asarray(target, dtype=float))
        self.s0, self.sigma, self.T, self.q = float(s0), float(sigma), float(T), float(q)
        self.c = 1.0 / (2 * q)
        self.d = self.m0.size

    @classmethod
    def for_problem(cls, problem: MFGProblem) -> "LQSolution":
        return cls(problem.mu0_mean, problem.mu0_std, problem.target, problem.sigma, problem.T,
                   problem.terminal_weight)

    def _s(self, t):
        return self.c + self.T - np.asarray(t, dtype=float)

    def mean(self, t):
        return self.target + (self.m0 - self.target) * self._s(t) / self._s(0.0)

    def var(self, t):
        s, s0 = self._s(t), self._s(0.0)
        return s**2 * (self.s0**2 / s0**2 + self.sigma**2 * (1.0 / s - 1.0 / s0))

    def log_density(self, x, t):
        x = np.asarray(x, dtype=float)
        v = self.var(t)
        return (-0.5 * ((x - self.mean(t)) ** 2).sum(-1) / v
                - 0.5 * self.d * math.log(2 * math.pi * v))

    def density(self, x, t):
        return np.exp(self.log_density(x, t))

    def value(self, x, t):
        x = np.asarray(x, dtype=float)
        s = self._s(t)
        nu = 0.5 * self.sigma**2
        return 0.5 * ((x - self.target) ** 2).sum(-1) / s + nu * self.d * np.log(s / self.c)

    def control(self, x, t):
        return -(np.asarray(x, dtype=float) - self.target) / self._s(t)


class LQDensity:
    """Flow-like view of an :class:`LQSolution` on the time grid t_n = nT/N.

    Log-densities are computed in torch, so they are differentiable in x.
    """

    def __init__(self, lq: LQSolution, N: int):
        self.lq, self.N, self.d, self.T = lq, int(N), lq.d, lq.T

    def log_density(self, x, n: int):
        x = torch.as_tensor(x, dtype=torch.float64)
        t = n * self.T / self.N
        mean = torch.as_tensor(self.lq.mean(t), dtype=x.dtype)
        v = float(self.lq.var(t))
        return (-0.5 * ((x - mean) ** 2).sum(-1) / v - 0.5 * self.d * math.log(2 * math.pi * v))

    def density(self, x, n: int):
        return torch.exp(self.log_density(x, n))

    def log_density_levels(self, xs):
        return torch.stack([self.log_density(xs[k], k + 1) for k in range(xs.shape[0])])

    def sample(self, n: int, M: int, seed: int, stream: int = 0):
        t = n * self.T / self.N
        eps = _io.normal(seed, (M, self.d), stream)
        return torch.as_tensor(self.lq.mean(t)) + math.sqrt(self.lq.var(t)) * eps
