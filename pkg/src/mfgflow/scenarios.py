"""Crowd-motion experiment families: obstacle, diffusion and init/target sweeps."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import _io
from .core import BoundaryCode, CodeLayout, Obstacle, Scenario, decode, scenario_to_dict

CIRCLE_LAYOUT = CodeLayout(dim=2, max_obstacles=1, obstacle_kind="circle")
ELLIPSE_LAYOUT = CodeLayout(dim=2, max_obstacles=2, obstacle_kind="ellipse")

OBSTACLE_SWEEP = ((0.0, 0.0, 2.0), (0.0, 1.0, 2.0), (0.0, -2.0, 2.0), (0.0, -2.0, 3.0),
                  (0.0, -2.0, 4.0))
DIFFUSION_SWEEP = (0.2, 1.0, 2.0)
INIT_TERMINAL_SWEEP = (
    ((-5.0, -5.0), 1.0, (3.0, 0.0)),
    ((-10.0, 5.0), 0.2, (10.0, -5.0)),
    ((-10.0, -5.0), 0.2, (10.0, -5.0)),
    ((-10.0, 5.0), 0.2, (5.0, 5.0)),
)


@dataclass(frozen=True)
class ScenarioFamily:
    """A named sweep: the shared settings plus one code per member."""

    family: str
    fixed: dict
    swept: tuple
    codes: tuple = field(repr=False)

    def __len__(self):
        return len(self.codes)

    def __iter__(self):
        return iter(self.codes)

    def __getitem__(self, i):
        return self.codes[i]


def passage_ellipses(offset: float = 3.0, axes=(1.5, 2.5)) -> tuple:
    """Two ellipses mirrored about y = 0; the gap at x = 0 is 2 * (offset - axes[1])."""
    return (Obstacle(center=(0.0, offset), axes=tuple(axes)),
            Obstacle(center=(0.0, -offset), axes=tuple(axes)))


def obstacle_family(layout: CodeLayout = CIRCLE_LAYOUT) -> list:
    """Five single-circle settings between a start at (-7, 0) and a target at (7, 0)."""
    return [BoundaryCode((-7.0, 0.0), 0.2, (7.0, 0.0), 1.0,
                         obstacles=(Obstacle(center=(x, y), radius=r),), layout=layout)
            for x, y, r in OBSTACLE_SWEEP]


def diffusion_family(sigmas=DIFFUSION_SWEEP, obstacles=None,
                     layout: CodeLayout = ELLIPSE_LAYOUT) -> list:
    """Same narrow-passage geometry at several noise levels."""
    obstacles = passage_ellipses() if obstacles is None else tuple(obstacles)
    return [BoundaryCode((-10.0, 0.0), 1.0, (10.0, 0.0), s, obstacles=obstacles, layout=layout)
            for s in sigmas]


def init_terminal_family(sigma: float = 1.0, obstacles=None,
                         layout: CodeLayout = CIRCLE_LAYOUT) -> list:
    """Four start/target pairs sharing the noise level and obstacle layout."""
    if obstacles is None:
        obstacles = (Obstacle(center=(0.0, 0.0), radius=2.0),)
    return [BoundaryCode(m, s, t, sigma, obstacles=tuple(obstacles), layout=layout)
            for m, s, t in INIT_TERMINAL_SWEEP]


FAMILIES = {
    "obstacle-change": (obstacle_family, ("obstacles",)),
    "diffusion-change": (diffusion_family, ("sigma",)),
    "init-terminal-change": (init_terminal_family, ("init_mean", "init_std", "target")),
}


def get_family(name: str, **kw) -> ScenarioFamily:
    if name not in FAMILIES:
        raise KeyError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}")
    build, swept = FAMILIES[name]
    codes = tuple(build(**kw))
    first = codes[0]
    fixed = {k: v for k, v in dict(init_mean=first.init_mean, init_std=first.init_std,
                                   target=first.target, sigma=first.sigma,
                                   obstacles=first.obstacles).items()
             if k not in swept}
    return ScenarioFamily(name, fixed, swept, codes)


def family_scenarios(name: str, base: Scenario = None, **kw) -> list:
    return [decode(c, base) for c in get_family(name, **kw)]


def export_family(name: str, out_dir, base: Scenario = None, **kw) -> list:
    """Write one scenario JSON file per member; returns the paths."""
    out_dir = Path(out_dir)
    paths = []
    for i, s in enumerate(family_scenarios(name, base, **kw)):
        p = out_dir / f"{name}-{i}.json"
        _io.write_json(p, scenario_to_dict(s))
        paths.append(p)
    return paths
