"""Problem definitions: crowd-motion MFG instances, costs and boundary codes.

All cost functions operate on torch tensors of shape ``(..., d)`` and return
``(...)``; the helpers in this module also accept numpy arrays.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import jsonschema
import numpy as np
import torch


class LayoutError(ValueError):
    """Boundary code does not fit (or does not match) a code layout."""


def _xp(x):
    return torch if isinstance(x, torch.Tensor) else np


def _sqnorm(x):
    return (x * x).sum(-1)


# ---------------------------------------------------------------------------
# Hamiltonians


class QuadraticHamiltonian:
    """H(x, p) = |p|^2 / 2, optimal drift -p."""

    name = "quadratic"

    def __call__(self, x, p):
        return 0.5 * _sqnorm(p)

    def grad_p(self, x, p):
        return p


class ZeroHamiltonian:
    """H = 0: uncontrolled dynamics (pure diffusion / linear HJB)."""

    name = "zero"

    def __call__(self, x, p):
        return 0.0 * _sqnorm(p)

    def grad_p(self, x, p):
        return 0.0 * p


HAMILTONIANS = {"quadratic": QuadraticHamiltonian, "zero": ZeroHamiltonian}


def hamiltonian(x, p):
    return QuadraticHamiltonian()(x, p)


def hamiltonian_grad(x, p):
    return QuadraticHamiltonian().grad_p(x, p)


# ---------------------------------------------------------------------------
# Obstacles


@dataclass(frozen=True)
class Obstacle:
    """Circle (``radius``) or axis-aligned ellipse (``axes``) in the plane."""

    center: tuple
    radius: Optional[float] = None
    axes: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if (self.radius is None) == (self.axes is None):
            raise ValueError("obstacle needs exactly one of radius or axes")
        if self.radius is not None:
            object.__setattr__(self, "radius", float(self.radius))
            if not self.radius > 0:
                raise ValueError(f"obstacle radius must be > 0, got {self.radius}")
        else:
            axes = tuple(float(a) for a in self.axes)
            if len(axes) != 2 or len(self.center) != 2:
                raise ValueError("elliptical obstacles are planar with two axes")
            if not min(axes) > 0:
                raise ValueError(f"ellipse axes must be > 0, got {axes}")
            object.__setattr__(self, "axes", axes)
        if not all(math.isfinite(c) for c in self.center):
            raise ValueError("obstacle center must be finite")

    @property
    def kind(self) -> str:
        return "circle" if self.radius is not None else "ellipse"

    def _scaled_sq(self, x):
        xp = _xp(x)
        c = xp.asarray(self.center) if xp is np else torch.as_tensor(self.center, dtype=x.dtype)
        diff = x - c
        if self.kind == "circle":
            return _sqnorm(diff) / self.radius**2
        a, b = self.axes
        return (diff[..., 0] / a) ** 2 + (diff[..., 1] / b) ** 2

    def sq_dist(self, x, scaled: bool = False):
        """Squared distance to the center; in units of the shape when ``scaled``."""
        if scaled:
            return self._scaled_sq(x)
        xp = _xp(x)
        c = xp.asarray(self.center) if xp is np else torch.as_tensor(self.center, dtype=x.dtype)
        return _sqnorm(x - c)

    def contains(self, x) -> np.ndarray:
        """Exact point-in-shape test (boundary counts as inside)."""
        x = np.asarray(x, dtype=float)
        return self._scaled_sq(x) <= 1.0

    def extent(self) -> tuple:
        r = (self.radius, self.radius) if self.kind == "circle" else self.axes
        return tuple(self.center), tuple(r[: len(self.center)])


def obstacle_penalty(x, obs: Obstacle, s_safe: float = 0.5, scaled: bool = False):
    """exp(-r^2) + exp(-(r^2 - s_safe)^2) with r the distance to the obstacle center."""
    xp = _xp(x)
    r2 = obs.sq_dist(x, scaled=scaled)
    return xp.exp(-r2) + xp.exp(-((r2 - s_safe) ** 2))


# ---------------------------------------------------------------------------
# Scenarios and boundary codes


@dataclass(frozen=True)
class Scenario:
    init_mean: tuple
    init_std: float
    target: tuple
    obstacles: tuple = ()
    sigma: float = 1.0
    T: float = 1.0
    N: int = 50
    s_safe: float = 0.5
    f_in: float = 0.0
    congestion: float = 0.0
    terminal_weight: float = 1.0
    obstacle_weight: float = 1.0
    radius_scaled: bool = False

    def __post_init__(self):
        object.__setattr__(self, "init_mean", tuple(float(v) for v in self.init_mean))
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))
        object.__setattr__(self, "obstacles", tuple(
            o if isinstance(o, Obstacle) else Obstacle(**o) for o in self.obstacles))
        if len(self.init_mean) != len(self.target):
            raise ValueError("init_mean and target must have the same dimension")
        vals = [*self.init_mean, *self.target, self.init_std, self.sigma, self.T,
                self.s_safe, self.f_in, self.congestion, self.terminal_weight,
                self.obstacle_weight]
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError("scenario fields must be finite")
        if self.init_std <= 0:
            raise ValueError(f"init_std must be > 0, got {self.init_std}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.T <= 0 or int(self.N) < 1:
            raise ValueError("need T > 0 and N >= 1")

    @property
    def dim(self) -> int:
        return len(self.init_mean)


@dataclass(frozen=True)
class CodeLayout:
    """Slot map of the flat boundary-code vector.

    Order: init mean (d), init std, target (d), diffusion, then
    ``max_obstacles`` obstacle slots of (center, radius) or (center, a, b).
    Absent obstacles are all-``sentinel`` slots; radii are > 0 so a zero
    radius is unambiguous.
    """

    dim: int = 2
    max_obstacles: int = 2
    obstacle_kind: str = "circle"
    min_obstacles: int = 0
    canonical: bool = False
    sentinel: float = 0.0

    def __post_init__(self):
        if self.obstacle_kind not in ("circle", "ellipse"):
            raise ValueError(f"unknown obstacle kind {self.obstacle_kind!r}")
        if self.obstacle_kind == "ellipse" and self.dim != 2:
            raise ValueError("ellipse layout requires dim == 2")
        if self.max_obstacles and self.dim != 2:
            raise ValueError("obstacles are only supported in dim == 2")
        if not 0 <= self.min_obstacles <= self.max_obstacles:
            raise ValueError("need 0 <= min_obstacles <= max_obstacles")

    @property
    def obstacle_width(self) -> int:
        return self.dim + (1 if self.obstacle_kind == "circle" else 2)

    @property
    def size(self) -> int:
        return 2 * self.dim + 2 + self.max_obstacles * self.obstacle_width

    def slots(self) -> dict:
        d = self.dim
        out = {
            "init_mean": slice(0, d),
            "init_std": slice(d, d + 1),
            "target": slice(d + 1, 2 * d + 1),
            "sigma": slice(2 * d + 1, 2 * d + 2),
        }
        w = self.obstacle_width
        for k in range(self.max_obstacles):
            start = 2 * d + 2 + k * w
            out[f"obstacle{k}"] = slice(start, start + w)
        return out

    def descriptor(self) -> dict:
        return asdict(self)


def _obstacle_key(o: Obstacle):
    return (o.center, o.radius or 0.0, o.axes or (0.0, 0.0))


@dataclass(frozen=True)
class BoundaryCode:
    init_mean: tuple
    init_std: float
    target: tuple
    sigma: float
    obstacles: tuple = ()
    layout: CodeLayout = field(default_factory=CodeLayout)

    def __post_init__(self):
        lay = self.layout
        object.__setattr__(self, "init_mean", tuple(float(v) for v in self.init_mean))
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))
        object.__setattr__(self, "init_std", float(self.init_std))
        object.__setattr__(self, "sigma", float(self.sigma))
        obs = tuple(self.obstacles)
        if lay.canonical:
            obs = tuple(sorted(obs, key=_obstacle_key))
        object.__setattr__(self, "obstacles", obs)
        if len(self.init_mean) != lay.dim or len(self.target) != lay.dim:
            raise LayoutError(f"code dimension does not match layout dim={lay.dim}")
        if len(obs) > lay.max_obstacles:
            raise LayoutError(
                f"{len(obs)} obstacles exceed layout capacity {lay.max_obstacles}")
        if len(obs) < lay.min_obstacles:
            raise LayoutError(
                f"layout requires at least {lay.min_obstacles} obstacle(s), got {len(obs)}")
        for o in obs:
            if o.kind != lay.obstacle_kind:
                raise LayoutError(f"{o.kind} obstacle in a {lay.obstacle_kind} layout")
        vals = [*self.init_mean, *self.target, self.init_std, self.sigma]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("boundary code fields must be finite")
        if self.init_std <= 0:
            raise ValueError(f"init_std must be > 0, got {self.init_std}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")

    @property
    def vector(self) -> np.ndarray:
        lay = self.layout
        v = np.full(lay.size, lay.sentinel, dtype=np.float64)
        s = lay.slots()
        v[s["init_mean"]] = self.init_mean
        v[s["init_std"]] = self.init_std
        v[s["target"]] = self.target
        v[s["sigma"]] = self.sigma
        for k, o in enumerate(self.obstacles):
            shape = (o.radius,) if o.kind == "circle" else o.axes
            v[s[f"obstacle{k}"]] = (*o.center, *shape)
        return v

    @classmethod
    def from_vector(cls, layout: CodeLayout, vec) -> "BoundaryCode":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (layout.size,):
            raise LayoutError(f"expected vector of length {layout.size}, got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("boundary code vector must be finite")
        s = layout.slots()
        d = layout.dim
        obs = []
        for k in range(layout.max_obstacles):
            slot = vec[s[f"obstacle{k}"]]
            if np.all(slot == layout.sentinel) and slot[d] <= 0:
                continue
            if layout.obstacle_kind == "circle":
                obs.append(Obstacle(center=tuple(slot[:d]), radius=slot[d]))
            else:
                obs.append(Obstacle(center=tuple(slot[:d]), axes=tuple(slot[d:])))
        return cls(
            init_mean=tuple(vec[s["init_mean"]]),
            init_std=float(vec[s["init_std"]][0]),
            target=tuple(vec[s["target"]]),
            sigma=float(vec[s["sigma"]][0]),
            obstacles=tuple(obs),
            layout=layout,
        )

    def digest(self) -> str:
        import hashlib
        return hashlib.sha1(self.vector.tobytes()).hexdigest()[:12]


def encode(scenario: Scenario, layout: Optional[CodeLayout] = None) -> BoundaryCode:
    layout = layout or CodeLayout(dim=scenario.dim, max_obstacles=2 if scenario.dim == 2 else 0)
    return BoundaryCode(
        init_mean=scenario.init_mean,
        init_std=scenario.init_std,
        target=scenario.target,
        sigma=scenario.sigma,
        obstacles=scenario.obstacles,
        layout=layout,
    )


def decode(code: BoundaryCode, base: Optional[Scenario] = None) -> Scenario:
    """Scenario described by ``code``; non-encoded fields come from ``base``."""
    fields = dict(init_mean=code.init_mean, init_std=code.init_std, target=code.target,
                  sigma=code.sigma, obstacles=code.obstacles)
    if base is None:
        return Scenario(**fields)
    return replace(base, **fields)


# ---------------------------------------------------------------------------
# Scenario files

SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["init_mean", "init_std", "target", "sigma"],
    "properties": {
        "init_mean": {"type": "array", "items": {"type": "number"}, "minItems": 1, "maxItems": 3},
        "init_std": {"type": "number", "exclusiveMinimum": 0},
        "target": {"type": "array", "items": {"type": "number"}, "minItems": 1, "maxItems": 3},
        "obstacles": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["center"],
                "properties": {
                    "center": {"type": "array", "items": {"type": "number"},
                               "minItems": 2, "maxItems": 2},
                    "radius": {"type": "number", "exclusiveMinimum": 0},
                    "axes": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                             "minItems": 2, "maxItems": 2},
                },
                "oneOf": [{"required": ["radius"]}, {"required": ["axes"]}],
            },
        },
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "N": {"type": "integer", "minimum": 1},
        "s_safe": {"type": "number"},
        "f_in": {"type": "number"},
        "congestion": {"type": "number", "minimum": 0},
        "terminal_weight": {"type": "number", "minimum": 0},
        "obstacle_weight": {"type": "number", "minimum": 0},
        "radius_scaled": {"type": "boolean"},
    },
}


class SchemaError(ValueError):
    """Configuration or scenario document failed schema validation."""


def validate_document(doc, schema, what: str = "document") -> None:
    validator = jsonschema.Draft7Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{what}: {where}: {e.message}")
        raise SchemaError("\n".join(lines))


def scenario_from_dict(doc: dict) -> Scenario:
    validate_document(doc, SCENARIO_SCHEMA, "scenario")
    if len(doc["init_mean"]) != len(doc["target"]):
        raise SchemaError("scenario: init_mean and target lengths differ")
    doc = dict(doc)
    doc["obstacles"] = tuple(
        Obstacle(center=o["center"], radius=o.get("radius"),
                 axes=tuple(o["axes"]) if "axes" in o else None)
        for o in doc.get("obstacles", ()))
    return Scenario(**doc)


def scenario_to_dict(s: Scenario) -> dict:
    out = {
        "init_mean": list(s.init_mean),
        "init_std": s.init_std,
        "target": list(s.target),
        "obstacles": [
            {"center": list(o.center), "radius": o.radius} if o.kind == "circle"
            else {"center": list(o.center), "axes": list(o.axes)}
            for o in s.obstacles
        ],
        "sigma": s.sigma,
        "T": s.T,
        "N": int(s.N),
        "s_safe": s.s_safe,
        "f_in": s.f_in,
    }
    for key in ("congestion", "terminal_weight", "obstacle_weight", "radius_scaled"):
        if getattr(s, key) != Scenario.__dataclass_fields__[key].default:
            out[key] = getattr(s, key)
    return out


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"scenario {path}: invalid JSON: {e}") from e
    return scenario_from_dict(doc)


# ---------------------------------------------------------------------------
# The MFG problem


@dataclass(frozen=True)
class MFGProblem:
    """Fixed-coefficient MFG instance.

    ``running_cost(x, t, density=None)`` and ``terminal_cost(x)`` act on
    tensors of shape ``(..., d)``.  ``density`` is an optional callable
    returning the current population density at ``x`` (used by congestion).
    Agents follow ``dX = alpha dt + sigma dW``; the matching HJB/FPK
    viscosity is ``sigma**2 / 2``.
    """

    d: int
    T: float
    N: int
    sigma: float
    running_cost: Callable
    terminal_cost: Callable
    mu0_mean: tuple
    mu0_std: float
    hamiltonian: object = field(default_factory=QuadraticHamiltonian)
    box: tuple = None
    target: Optional[tuple] = None
    obstacles: tuple = ()
    congestion: float = 0.0
    terminal_weight: float = 1.0

    def __post_init__(self):
        if self.d < 1 or self.N < 1 or not self.T > 0:
            raise ValueError("need d >= 1, N >= 1, T > 0")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.mu0_std > 0:
            raise ValueError(f"mu0 std must be > 0, got {self.mu0_std}")
        if len(self.mu0_mean) != self.d:
            raise ValueError("mu0 mean has wrong dimension")
        object.__setattr__(self, "mu0_mean", tuple(float(v) for v in self.mu0_mean))
        if self.box is None:
            object.__setattr__(self, "box", working_box(self.mu0_mean, self.mu0_std,
                                                        self.target or self.mu0_mean,
                                                        self.sigma, self.T, self.obstacles))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def viscosity(self) -> float:
        return 0.5 * self.sigma**2

    def time_grid(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.T / self.N

    def lagrangian(self, x, p):
        """Running control cost of the feedback alpha = -grad_p H(x, p)."""
        return (p * self.hamiltonian.grad_p(x, p)).sum(-1) - self.hamiltonian(x, p)

    def control(self, x, p):
        return -self.hamiltonian.grad_p(x, p)


def working_box(init_mean, init_std, target, sigma, T, obstacles=(), spread: float = 6.0):
    """Axis-aligned box holding init/target clouds with generous margins and obstacles."""
    init_mean = np.asarray(init_mean, dtype=float)
    target = np.asarray(target, dtype=float)
    margin = spread * init_std + 3.0 * sigma * math.sqrt(T)
    lo = np.minimum(init_mean, target) - margin
    hi = np.maximum(init_mean, target) + margin
    for o in obstacles:
        c, r = (np.asarray(v) for v in o.extent())
        lo = np.minimum(lo, c - r - 0.5)
        hi = np.maximum(hi, c + r + 0.5)
    return tuple(lo.tolist()), tuple(hi.tolist())


def build_crowd_motion(code: BoundaryCode, N: int = 50, T: float = 1.0, *,
                       s_safe: float = 0.5, f_in: float = 0.0, congestion: float = 0.0,
                       terminal_weight: float = 1.0, obstacle_weight: float = 1.0,
                       radius_scaled: bool = False, hamiltonian: str = "quadratic",
                       box=None) -> MFGProblem:
    """Crowd-motion instance: Gaussian start, quadratic pull to the target, soft obstacles.

    In one dimension without obstacles this is the linear-quadratic benchmark.
    """
    if N < 2:
        raise ValueError(f"need N >= 2, got {N}")
    if code.init_std <= 0:
        raise ValueError("init_std must be > 0")
    obstacles = tuple(code.obstacles)
    target = tuple(code.target)
    tgt = torch.tensor(target, dtype=torch.float64)

    def running_cost(x, t=0.0, density=None):
        out = torch.full(x.shape[:-1], float(f_in), dtype=x.dtype)
        for o in obstacles:
            out = out + obstacle_weight * obstacle_penalty(x, o, s_safe, scaled=radius_scaled)
        if congestion and density is not None:
            out = out + congestion * density(x)
        return out

    def terminal_cost(x):
        return terminal_weight * _sqnorm(x - tgt.to(x.dtype))

    return MFGProblem(
        d=code.layout.dim, T=float(T), N=int(N), sigma=code.sigma,
        running_cost=running_cost, terminal_cost=terminal_cost,
        mu0_mean=code.init_mean, mu0_std=code.init_std,
        hamiltonian=HAMILTONIANS[hamiltonian](),
        box=box or working_box(code.init_mean, code.init_std, target, code.sigma, T, obstacles),
        target=target, obstacles=obstacles, congestion=float(congestion),
        terminal_weight=float(terminal_weight),
    )


def problem_from_scenario(s: Scenario, layout: Optional[CodeLayout] = None, **overrides) -> MFGProblem:
    kw = dict(N=int(s.N), T=s.T, s_safe=s.s_safe, f_in=s.f_in, congestion=s.congestion,
              terminal_weight=s.terminal_weight, obstacle_weight=s.obstacle_weight,
              radius_scaled=s.radius_scaled)
    kw.update(overrides)
    if layout is None:
        kind = s.obstacles[0].kind if s.obstacles else "circle"
        layout = CodeLayout(dim=s.dim, max_obstacles=len(s.obstacles) if s.dim == 2 else 0,
                            obstacle_kind=kind)
    return build_crowd_motion(encode(s, layout), **kw)


def population_cost(cost: Callable, samples) -> tuple:
    """Sample mean of a pointwise cost over population samples, with its standard error."""
    vals = cost(torch.as_tensor(samples, dtype=torch.float64)).detach().numpy()
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))
