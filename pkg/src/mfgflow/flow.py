"""Discrete-time normalizing flow carrying the population density.

The marginal at step ``n`` is the push-forward of the Gaussian initial law
through the transition maps ``r_1, ..., r_n``.  Each map is an elementwise
affine layer followed by affine coupling blocks, so inverses and
log-determinants are exact.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import _io

SCHEMA_VERSION = 1
DTYPE = torch.float64


def _as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


class ElementwiseAffine(nn.Module):
    """y = c + exp(s) * (x - c) + h * b, with (c, h) the box center and half-width."""

    def __init__(self, center, halfwidth):
        super().__init__()
        d = len(center)
        self.register_buffer("center", _as_tensor(center))
        self.register_buffer("halfwidth", _as_tensor(halfwidth))
        self.log_scale = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.shift = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x):
        y = self.center + torch.exp(self.log_scale) * (x - self.center) + self.halfwidth * self.shift
        return y, self.log_scale.sum().expand(x.shape[:-1])

    def inverse(self, y):
        x = self.center + torch.exp(-self.log_scale) * (y - self.center - self.halfwidth * self.shift)
        return x, (-self.log_scale.sum()).expand(y.shape[:-1])


class AffineCoupling(nn.Module):
    """Transforms the coordinates where ``mask`` is False conditioned on the rest."""

    def __init__(self, mask, center, halfwidth, hidden: int = 32, clamp: float = 2.0):
        super().__init__()
        mask = torch.as_tensor(mask, dtype=torch.bool)
        self.register_buffer("mask", mask)
        self.register_buffer("center", _as_tensor(center))
        self.register_buffer("halfwidth", _as_tensor(halfwidth))
        self.clamp = clamp
        d = mask.numel()
        self.net = nn.Sequential(
            nn.Linear(d, hidden), nn.Tanh(),
            nn.Linear(hidden, hidden), nn.Tanh(),
            nn.Linear(hidden, 2 * d),
        ).to(DTYPE)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def _params(self, x):
        keep = self.mask.to(x.dtype)
        h = self.net((x - self.center) / self.halfwidth * keep)
        s, t = h.chunk(2, dim=-1)
        s = self.clamp * torch.tanh(s / self.clamp) * (1 - keep)
        t = t * self.halfwidth * (1 - keep)
        return s, t

    def forward(self, x):
        s, t = self._params(x)
        return x * torch.exp(s) + t, s.sum(-1)

    def inverse(self, y):
        s, t = self._params(y)
        return (y - t) * torch.exp(-s), -s.sum(-1)


class TransitionMap(nn.Module):
    """One invertible step r_n: R^d -> R^d."""

    def __init__(self, d, center, halfwidth, blocks: int = 2, hidden: int = 32, clamp: float = 2.0):
        super().__init__()
        layers = [ElementwiseAffine(center, halfwidth)]
        if d > 1:
            for k in range(blocks):
                mask = (torch.arange(d) % 2) == (k % 2)
                layers.append(AffineCoupling(mask, center, halfwidth, hidden, clamp))
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        logdet = torch.zeros(x.shape[:-1], dtype=x.dtype)
        for layer in self.layers:
            x, ld = layer(x)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, y):
        logdet = torch.zeros(y.shape[:-1], dtype=y.dtype)
        for layer in reversed(self.layers):
            y, ld = layer.inverse(y)
            logdet = logdet + ld
        return y, logdet


class DensityFlow(nn.Module):
    """N transition maps on top of the Gaussian base ``N(mean, std^2 I)``."""

    def __init__(self, d: int, N: int, base_mean, base_std: float, box=None,
                 blocks_per_step: int = 2, hidden: int = 32, clamp: float = 2.0,
                 T: float = 1.0):
        super().__init__()
        if box is None:
            m = np.asarray(base_mean, dtype=float)
            box = (tuple(m - 6 * base_std), tuple(m + 6 * base_std))
        lo, hi = (np.asarray(b, dtype=float) for b in box)
        center, halfwidth = (lo + hi) / 2, (hi - lo) / 2
        self.d, self.N, self.T = int(d), int(N), float(T)
        self.box = (tuple(lo.tolist()), tuple(hi.tolist()))
        self.structure = dict(blocks_per_step=int(blocks_per_step), hidden=int(hidden),
                              clamp=float(clamp))
        self.register_buffer("base_mean", _as_tensor(base_mean).reshape(d))
        self.register_buffer("base_std", _as_tensor(float(base_std)))
        self.maps = nn.ModuleList(
            TransitionMap(d, center, halfwidth, blocks_per_step, hidden, clamp) for _ in range(N))

    @classmethod
    def for_problem(cls, problem, **kw) -> "DensityFlow":
        return cls(problem.d, problem.N, problem.mu0_mean, problem.mu0_std, box=problem.box,
                   T=problem.T, **kw)

    # -- base -----------------------------------------------------------
    def base_log_prob(self, z):
        eps = (z - self.base_mean) / self.base_std
        return (-0.5 * (eps * eps).sum(-1) - self.d * (torch.log(self.base_std)
                                                        + 0.5 * math.log(2 * math.pi)))

    def base_samples(self, M: int, seed: int, stream: int = 0):
        eps = _io.normal(seed, (M, self.d), stream)
        return self.base_mean + self.base_std * eps

    # -- sampling ---------------------------------------------------------
    def forward_levels(self, z, upto: Optional[int] = None):
        """Push base points through maps 1..upto; returns (xs, logp) for levels 0..upto."""
        upto = self.N if upto is None else upto
        xs, lps = [z], [self.base_log_prob(z)]
        x, lp = z, lps[0]
        for r in self.maps[:upto]:
            x, ld = r(x)
            lp = lp - ld
            xs.append(x)
            lps.append(lp)
        return torch.stack(xs), torch.stack(lps)

    def sample_levels(self, M: int, seed: int, stream: int = 0):
        return self.forward_levels(self.base_samples(M, seed, stream))

    def push_samples(self, n: int, M: int, seed: int, stream: int = 0) -> torch.Tensor:
        self._check_level(n)
        x = self.base_samples(M, seed, stream)
        for r in self.maps[:n]:
            x, _ = r(x)
        return x

    @torch.no_grad()
    def initialize_from_paths(self, paths, M: int = 1024, seed: int = 0) -> None:
        """Data-dependent start: set each step's elementwise affine layer so the
        pushed-forward mean and per-axis std match those of ``paths`` (M, N+1, d).

        Meant for fresh flows, whose coupling blocks are still the identity.
        """
        X = _as_tensor(paths)
        if X.shape[1] != self.N + 1 or X.shape[2] != self.d:
            raise ValueError(f"paths must be (M, {self.N + 1}, {self.d}), got {tuple(X.shape)}")
        x = self.base_samples(M, seed, 7)
        for n, r in enumerate(self.maps, start=1):
            aff = r.layers[0]
            a, sa = x.mean(0), x.std(0).clamp_min(1e-12)
            b, sb = X[:, n].mean(0), X[:, n].std(0).clamp_min(1e-12)
            aff.log_scale.copy_(torch.log(sb / sa))
            aff.shift.copy_((b - aff.center - (sb / sa) * (a - aff.center)) / aff.halfwidth)
            x, _ = r(x)

    # -- density ----------------------------------------------------------
    def log_density(self, x, n: int) -> torch.Tensor:
        """log mu_{t_n}(x) by inverting maps n..1 and accumulating log-dets."""
        self._check_level(n)
        x = _as_tensor(x)
        acc = torch.zeros(x.shape[:-1], dtype=x.dtype)
        for r in reversed(self.maps[:n]):
            x, ld = r.inverse(x)
            acc = acc + ld
        return self.base_log_prob(x) + acc

    def log_density_levels(self, xs) -> torch.Tensor:
        """log mu_{t_k}(xs[k]) for k = 0..K-1 with one batched inversion sweep."""
        xs = _as_tensor(xs)
        K = xs.shape[0]
        if K - 1 > self.N:
            raise ValueError(f"{K} levels requested, flow has {self.N + 1}")
        y = xs.clone() if not xs.requires_grad else xs
        acc = torch.zeros(xs.shape[:-1], dtype=xs.dtype)
        for k in range(K - 1, 0, -1):
            # levels k..K-1 still need map k inverted
            head, tail = y[:k], y[k:]
            tail, ld = self.maps[k - 1].inverse(tail)
            y = torch.cat([head, tail])
            acc = torch.cat([acc[:k], acc[k:] + ld])
        return self.base_log_prob(y) + acc

    def density(self, x, n: int) -> torch.Tensor:
        return torch.exp(self.log_density(x, n))

    def terminal_density(self) -> "MarginalHandle":
        return MarginalHandle(self, self.N)

    def marginal(self, n: int) -> "MarginalHandle":
        self._check_level(n)
        return MarginalHandle(self, n)

    def _check_level(self, n):
        if not (isinstance(n, (int, np.integer)) and 0 <= n <= self.N):
            raise IndexError(f"step index {n} outside 0..{self.N}")

    # -- persistence --------------------------------------------------------
    def descriptor(self) -> dict:
        return dict(kind="DensityFlow", schema_version=SCHEMA_VERSION, d=self.d, N=self.N,
                    T=self.T, box=[list(self.box[0]), list(self.box[1])], structure=self.structure)

    def save(self, path) -> None:
        header = self.descriptor()
        arrays = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        _io.save_npz(path, header, arrays)

    @classmethod
    def load(cls, path) -> "DensityFlow":
        header, arrays = _io.load_npz(path)
        return cls.from_arrays(header, arrays)

    @classmethod
    def from_arrays(cls, header, arrays) -> "DensityFlow":
        if header.get("kind") != "DensityFlow" or header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"not a DensityFlow checkpoint (schema {header.get('schema_version')})")
        flow = cls(header["d"], header["N"], arrays["base_mean"], float(arrays["base_std"]),
                   box=header["box"], T=header["T"], **header["structure"])
        flow.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
        return flow


class MarginalHandle:
    """Density handle for one marginal of a flow."""

    def __init__(self, flow: DensityFlow, n: int):
        self.flow, self.n = flow, n

    def log_density(self, x):
        return self.flow.log_density(x, self.n)

    def density(self, x):
        return self.flow.density(x, self.n)

    def sample(self, M: int, seed: int):
        return self.flow.push_samples(self.n, M, seed)


def push_samples(flow: DensityFlow, n: int, M: int, seed: int) -> torch.Tensor:
    return flow.push_samples(n, M, seed)


def log_density(flow: DensityFlow, x, n: int) -> torch.Tensor:
    return flow.log_density(x, n)


def terminal_density(flow: DensityFlow) -> MarginalHandle:
    return flow.terminal_density()


def grid_points(box, resolution):
    """Cell-center lattice over ``box``; returns (points (P, d), axes, cell volume)."""
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    res = np.broadcast_to(np.asarray(resolution), lo.shape)
    axes = [l + (np.arange(r) + 0.5) * (h - l) / r for l, h, r in zip(lo, hi, res)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    cell = float(np.prod((hi - lo) / res))
    return pts, axes, cell


def quadrature_mass(flow: DensityFlow, n: int, box, resolution) -> float:
    """Midpoint-rule integral of the step-n marginal over ``box``."""
    pts, _, cell = grid_points(box, resolution)
    with torch.no_grad():
        dens = flow.density(pts, n).numpy()
    return float(math.fsum(dens) * cell)
