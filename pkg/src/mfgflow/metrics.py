"""Evaluation measures: solve time, collision-avoidance rate and volume invariance."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import _io
from .flow import DensityFlow, grid_points


# ---------------------------------------------------------------------------
# Collisions


def collision_flags(trajectories, obstacles: Sequence = (), pair_radius: float = 0.1):
    """Per-agent failure flags: (hit_obstacle, hit_agent), each of shape (M,)."""
    X = np.asarray(trajectories, dtype=float)
    if X.ndim != 3:
        raise ValueError(f"trajectories must be (M, steps, d), got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("trajectories must be finite")
    M = X.shape[0]
    hit_obs = np.zeros(M, dtype=bool)
    for o in obstacles:
        hit_obs |= o.contains(X).any(axis=1)
    hit_agent = np.zeros(M, dtype=bool)
    if pair_radius > 0 and M > 1:
        for n in range(X.shape[1]):
            pairs = cKDTree(X[:, n]).query_pairs(pair_radius, output_type="ndarray")
            if len(pairs):
                hit_agent[pairs.ravel()] = True
    return hit_obs, hit_agent


def collision_success_rate(trajectories, obstacles: Sequence = (), pair_radius: float = 0.1) -> float:
    """Fraction of agents that never enter an obstacle and never come within
    ``pair_radius`` of another agent at the same time step."""
    hit_obs, hit_agent = collision_flags(trajectories, obstacles, pair_radius)
    if hit_obs.size == 0:
        return 1.0
    return float(np.mean(~(hit_obs | hit_agent)))


def obstacle_success_rate(trajectories, obstacles: Sequence = ()) -> float:
    """Agent-obstacle part of the rate alone."""
    hit_obs, _ = collision_flags(trajectories, obstacles, pair_radius=0.0)
    return float(np.mean(~hit_obs)) if hit_obs.size else 1.0


# ---------------------------------------------------------------------------
# Volume invariance


def _level_masses_flow(flow: DensityFlow, pts, cell, levels, chunk):
    out = []
    with torch.no_grad():
        for n in levels:
            tot = []
            for s in range(0, len(pts), chunk):
                x = torch.as_tensor(pts[s:s + chunk], dtype=torch.float64)
                tot.append(flow.density(x, int(n)).numpy())
            out.append(math.fsum(np.concatenate(tot)) * cell)
    return np.array(out)


def level_deviations(source, box, resolution=200, sigma0: Optional[float] = None,
                     levels=None, chunk: int = 20000) -> np.ndarray:
    """|quadrature mass - 1| for each time level.

    ``source`` is a DensityFlow, a callable ``density(x, n)`` with ``levels``
    given, or an array of density fields of shape (L, *resolution) sampled at
    the cell centers of ``box``.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    res = np.broadcast_to(np.asarray(resolution), lo.shape)
    widths = (hi - lo) / res
    if isinstance(source, DensityFlow) and sigma0 is None:
        sigma0 = float(source.base_std)
    if sigma0 is not None and widths.max() > sigma0 / 2:
        raise ValueError(f"quadrature cell {widths.max():.3g} is coarser than sigma0/2 = "
                         f"{sigma0 / 2:.3g}; raise the resolution")
    if isinstance(source, (np.ndarray, list)):
        fields = np.asarray(source, dtype=float)
        if fields.shape[1:] != tuple(res):
            raise ValueError(f"fields of shape {fields.shape[1:]} do not match resolution {tuple(res)}")
        cell = float(np.prod(widths))
        masses = np.array([math.fsum(f.ravel()) * cell for f in fields])
        return np.abs(masses - 1.0)
    pts, _, cell = grid_points(box, res)
    if isinstance(source, DensityFlow):
        levels = range(source.N + 1) if levels is None else levels
        masses = _level_masses_flow(source, pts, cell, levels, chunk)
    else:
        if levels is None:
            raise ValueError("levels are required for a density callable")
        masses = np.array([math.fsum(np.asarray(source(pts, n), dtype=float).ravel()) * cell
                           for n in levels])
    return np.abs(masses - 1.0)


def volume_invariance(source, box, resolution=200, sigma0: Optional[float] = None,
                      levels=None) -> float:
    """log10 of the worst per-level deviation of the total mass from one."""
    dev = level_deviations(source, box, resolution, sigma0, levels)
    return float(np.log10(max(dev.max(), 1e-300)))


# ---------------------------------------------------------------------------
# Timing


def timed(run: Callable, *args, **kwargs):
    """(result, seconds) for one call, on the monotonic clock."""
    t0 = time.perf_counter()
    out = run(*args, **kwargs)
    return out, time.perf_counter() - t0


def timed_repeat(run: Callable, repeat: int = 5, *args, **kwargs):
    """(last result, mean seconds, sample std of seconds) over ``repeat`` calls."""
    times, out = [], None
    for _ in range(max(1, repeat)):
        out, s = timed(run, *args, **kwargs)
        times.append(s)
    spread = statistics.stdev(times) if len(times) > 1 else 0.0
    return out, statistics.fmean(times), spread


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    scenario: str
    solve_seconds: float
    success_rate: float
    volume_diff: float
    pair_radius: float = 0.1
    obstacle_success_rate: Optional[float] = None
    level_deviation: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError(f"success_rate {self.success_rate} outside [0, 1]")
        if not math.isfinite(self.volume_diff):
            raise ValueError("volume_diff must be finite")

    COLUMNS = ("scenario", "solve_seconds", "success_rate", "obstacle_success_rate",
               "pair_radius", "volume_diff")

    def row(self) -> list:
        return [getattr(self, c) for c in self.COLUMNS]


def write_reports_csv(path, reports: Sequence[MetricsReport], drop_timing: bool = False) -> None:
    cols = [c for c in MetricsReport.COLUMNS if not (drop_timing and c == "solve_seconds")]
    rows = [[getattr(r, c) for c in cols] for r in reports]
    _io.write_csv(path, cols, rows)


def write_reports_json(path, reports: Sequence[MetricsReport]) -> None:
    _io.write_json(path, [asdict(r) for r in reports])
