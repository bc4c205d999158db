"""Command-line runner: train, infer, solve the grid oracle, evaluate and plot.

Every command reads an optional JSON config (schema in
``mfgflow/schemas/run_config.schema.json``); flags override its top-level
keys.  Outputs go to ``--out``, else ``$MFGFLOW_OUT/<command>``, else
``./runs/<command>``.  Exit codes: 0 success, 2 invalid configuration,
3 non-convergence (artifacts kept), 4 missing input or I/O failure.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import math
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import _io
from . import operator as op
from .core import (LayoutError, Scenario, SchemaError, decode, encode,
                   load_scenario, problem_from_scenario, scenario_from_dict, validate_document)
from .fbsde import (TRACE_COLUMNS, TrainConfig, fit_to_reference, load_solution, save_solution,
                    simulate_paths, train_fixed)
from .flow import DensityFlow
from .metrics import (MetricsReport, collision_success_rate, obstacle_success_rate,
                      volume_invariance, write_reports_csv, write_reports_json)
from .oracle import GridSpec, StabilityError, save_fields, solve_fixed_point
from .scenarios import get_family

log = logging.getLogger("mfgflow")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("train-fixed", "train-operator", "infer", "oracle", "eval", "plot")
SNAPSHOT_FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
OUT_ENV = "MFGFLOW_OUT"


class ConfigError(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


def config_schema() -> dict:
    text = resources.files("mfgflow").joinpath("schemas/run_config.schema.json").read_text()
    return json.loads(text)


# ---------------------------------------------------------------------------
# Configuration


def load_config(args) -> dict:
    cfg = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise FileNotFoundError(f"config {args.config}: {e.strerror or e}") from e
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as e:
            raise SchemaError(f"config {args.config}: invalid JSON: {e}") from e
    for key in ("seed", "out", "checkpoint", "family", "device", "scenario"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    validate_document(cfg, config_schema(), "config")
    if cfg.get("command", args.command) != args.command:
        raise ConfigError(f"config is for {cfg['command']!r}, not {args.command!r}")
    cfg["command"] = args.command
    device = cfg.get("device", "cpu")
    if device != "cpu":
        raise ConfigError(f"device {device!r} is not supported; this build runs on cpu only")
    return cfg


def out_dir(cfg) -> Path:
    if "out" in cfg:
        return Path(cfg["out"])
    return Path(os.environ.get(OUT_ENV, "runs")) / cfg["command"]


def _require_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} {path} does not exist")


def preflight(cfg) -> None:
    """Check every referenced input before any compute or output."""
    if isinstance(cfg.get("scenario"), str):
        _require_file(cfg["scenario"], "scenario file")
    if cfg["command"] in ("infer", "eval", "plot"):
        if "checkpoint" not in cfg:
            raise ConfigError(f"{cfg['command']} needs --checkpoint")
        ck = Path(cfg["checkpoint"])
        if not (ck.is_file() or ck.is_dir()):
            raise FileNotFoundError(f"checkpoint {ck} does not exist")
    elif cfg["command"] == "train-fixed" and "checkpoint" in cfg:
        _require_file(cfg["checkpoint"], "warm-start checkpoint")
    if cfg["command"] != "train-operator" and "scenario" not in cfg and "family" not in cfg:
        raise ConfigError(f"{cfg['command']} needs a scenario or a family")


def scenarios(cfg) -> list:
    """(name, Scenario) pairs selected by the config."""
    if "scenario" in cfg:
        s = cfg["scenario"]
        if isinstance(s, str):
            return [(Path(s).stem, load_scenario(s))]
        return [("scenario", scenario_from_dict(s))]
    base = Scenario((0.0, 0.0), 1.0, (0.0, 0.0), N=cfg.get("N", 50), T=cfg.get("T", 1.0))
    fam = get_family(cfg["family"])
    members = cfg.get("members", range(len(fam)))
    out = []
    for i in members:
        if i >= len(fam):
            raise ConfigError(f"family {cfg['family']} has {len(fam)} members, not {i + 1}")
        out.append((f"{cfg['family']}-{i}", decode(fam[i], base)))
    return out


# ---------------------------------------------------------------------------
# Commands


def _load_warm_start(cfg, scenario):
    if "checkpoint" not in cfg:
        return None
    model = op.load_operator(cfg["checkpoint"])
    return op.OperatorWarmStart(model, encode(scenario, model.layout))


def cmd_train_fixed(cfg, out: Path) -> int:
    tcfg = TrainConfig.from_dict({"seed": cfg.get("seed", 0), **cfg.get("train", {})})
    rows, failed = [], []
    for i, (name, s) in enumerate(scenarios(cfg)):
        problem = problem_from_scenario(s)
        res = train_fixed(problem, tcfg, warm_start=_load_warm_start(cfg, s))
        _io.write_csv(out / f"trace-{i}.csv", TRACE_COLUMNS,
                      [[row[c] for c in TRACE_COLUMNS] for row in res.trace])
        save_solution(out / f"solution-{i}.npz", res)
        last = res.trace[-1]
        rows.append(dict(scenario=name, rounds=res.rounds, best_round=res.best_round,
                         converged=res.converged, seconds=res.seconds,
                         **{k: last[k] for k in ("l_mkv", "l_hjb", "l_t", "l_fit", "total")}))
        if not res.converged:
            failed.append(name)
    _io.write_json(out / "metrics.json", rows)
    if failed:
        raise NonConvergence(f"no convergence within max_rounds for: {', '.join(failed)}")
    return EXIT_OK


def _operator_parts(ocfg: dict, seed: int):
    kind = ocfg.get("sampler", "toy")
    if kind == "toy":
        N = ocfg.get("N", 20)
        return op.toy_sampler(N=N), op.toy_problem_builder(N)
    N = ocfg.get("N", 50)
    from .core import build_crowd_motion
    sampler = op.crowd_sampler(N=N, obstacle_kind=ocfg.get("obstacle_kind", "circle"))
    return sampler, (lambda code: build_crowd_motion(code, N=N))


def cmd_train_operator(cfg, out: Path) -> int:
    ocfg = cfg.get("operator", {})
    seed = cfg.get("seed", 0)
    sampler, builder = _operator_parts(ocfg, seed)
    if ocfg.get("inner", "exact-lq") == "exact-lq":
        if ocfg.get("sampler", "toy") != "toy":
            raise ConfigError("the exact-lq inner solver only covers the obstacle-free toy family")
        inner = op.exact_lq_solver
    else:
        inner = op.nf_inner_solver(TrainConfig.from_dict({"seed": seed, **cfg.get("train", {})}))
    pcfg = op.PionmConfig.from_dict({"seed": seed, **ocfg.get("pionm", {})})
    model = op.OperatorModel(sampler.layout, sampler.N, sampler.box, T=sampler.T,
                             code_bounds=sampler.bounds(), seed=seed, **ocfg.get("arch", {}))
    share = dict(box=sampler.box, box_fraction=pcfg.box_fraction)
    validation = op.collect_samples(sampler.draw(ocfg.get("validation", 16), seed, 1), builder,
                                    pcfg.queries, inner, seed=seed + 1, **share)
    budget = ocfg.get("budget", 64)
    t0 = time.perf_counter()
    if ocfg.get("protocol", "online") == "online":
        model, report = op.train_pionm(sampler, builder, budget, pcfg, model, inner, validation,
                                       report_path=out / "session.csv")
        used = len(report.trace)
    else:
        train = op.collect_samples(sampler.draw(budget, seed, 0), builder, pcfg.queries, inner,
                                   seed=seed, **share)
        trace = op.fit_operator(model, train, ocfg.get("steps", 2000), lr=pcfg.lr,
                                batch=ocfg.get("batch", 8),
                                queries_per_step=ocfg.get("queries_per_step"), seed=seed)
        _io.write_csv(out / "session.csv", ("step", "l_pino"), list(enumerate(trace)))
        used = len(train)
    op.save_operator(out / "operator.npz", model)
    _io.write_json(out / "metrics.json", dict(
        codes_used=used, budget=budget, seconds=time.perf_counter() - t0,
        validation_l_pino=op.heldout_loss(model, validation) if validation else None))
    if used == 0:
        raise NonConvergence("every inner solve failed to converge; no operator samples")
    return EXIT_OK


def cmd_infer(cfg, out: Path) -> int:
    model = op.load_operator(cfg["checkpoint"])
    res = cfg.get("infer", {}).get("resolution", 100)
    rows = []
    for i, (name, s) in enumerate(scenarios(cfg)):
        code = encode(s, model.layout)
        inf = op.infer_equilibrium(model, code, res)
        _io.save_npz(out / f"fields-{i}.npz", dict(kind="OperatorFields", scenario=name,
                                                   box=[list(model.box[0]), list(model.box[1])],
                                                   resolution=list(inf.resolution), N=model.N),
                     dict(fields=inf.fields, masses=inf.masses))
        rows.append(dict(scenario=name, seconds=inf.seconds, masses=inf.masses.tolist()))
    _io.write_json(out / "metrics.json", rows)
    return EXIT_OK


def cmd_oracle(cfg, out: Path) -> int:
    ocfg = cfg.get("oracle", {})
    rows, failed = [], []
    for i, (name, s) in enumerate(scenarios(cfg)):
        problem = problem_from_scenario(s)
        points = ocfg.get("points", 64 if s.dim == 2 else 128)
        if "N_t" in ocfg:
            grid = GridSpec.for_problem(problem, points, ocfg["N_t"])
        else:
            grid = GridSpec.stable_for(problem, points)
        sol = solve_fixed_point(problem, grid, ocfg.get("damping", 0.5),
                                ocfg.get("max_iter", 200), ocfg.get("tol", 1e-6))
        save_fields(out / f"oracle-{i}.npz", sol)
        rows.append(dict(scenario=name, converged=sol.converged, iterations=len(sol.trace),
                         mass_drift=sol.mass_drift, final_change=sol.trace[-1]))
        if not sol.converged:
            failed.append(name)
    _io.write_json(out / "metrics.json", rows)
    if failed:
        raise NonConvergence(f"oracle fixed point did not converge for: {', '.join(failed)}")
    return EXIT_OK


def _checkpoint_kind(path: Path) -> str:
    if path.is_dir():
        return "FixedSolveDir"
    header, _ = _io.load_npz(path)
    return header.get("kind", "")


def trajectories(cfg, index: int, scenario: Scenario, agents: int):
    """(trajectories (M, N+1, d), flow, seconds) from the configured checkpoint.

    A fixed-solve checkpoint (or a train-fixed output directory) is rolled
    out with its controls and noise.  An operator checkpoint is distilled
    into a density flow whose transport maps carry the agents.
    """
    seed = cfg.get("seed", 0)
    ck = Path(cfg["checkpoint"])
    kind = _checkpoint_kind(ck)
    problem = problem_from_scenario(scenario)
    t0 = time.perf_counter()
    if kind in ("FixedSolve", "FixedSolveDir"):
        path = ck / f"solution-{index}.npz" if kind == "FixedSolveDir" else ck
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint {path} does not exist")
        flow, vp = load_solution(path)
        X = simulate_paths(problem, flow, vp, agents, seed, create_graph=False).X
    elif kind == "OperatorModel":
        model = op.load_operator(ck)
        ecfg = cfg.get("eval", {})
        flow = DensityFlow.for_problem(problem)
        ref = op.OperatorWarmStart(model, encode(scenario, model.layout))
        fit_to_reference(flow, ref, ecfg.get("distill_steps", 200), 256,
                         ecfg.get("distill_lr", 1e-2), seed)
        with torch.no_grad():
            X = flow.sample_levels(agents, seed, 1)[0].transpose(0, 1)
    else:
        raise ConfigError(f"checkpoint {ck} is neither an operator nor a fixed solve")
    return X.detach().numpy(), flow, time.perf_counter() - t0


def _volume(flow: DensityFlow, resolution: int) -> float:
    lo, hi = (np.asarray(b) for b in flow.box)
    need = int(math.ceil(((hi - lo) / (float(flow.base_std) / 2)).max()))
    return volume_invariance(flow, flow.box, max(resolution, need))


def cmd_eval(cfg, out: Path) -> int:
    ecfg = cfg.get("eval", {})
    agents, radius = ecfg.get("agents", 1000), ecfg.get("pair_radius", 0.1)
    reports = []
    for i, (name, s) in enumerate(scenarios(cfg)):
        X, flow, secs = trajectories(cfg, i, s, agents)
        reports.append(MetricsReport(
            scenario=name, solve_seconds=secs,
            success_rate=collision_success_rate(X, s.obstacles, radius),
            volume_diff=_volume(flow, ecfg.get("resolution", 200)), pair_radius=radius,
            obstacle_success_rate=obstacle_success_rate(X, s.obstacles)))
    write_reports_csv(out / "metrics.csv", reports)
    write_reports_json(out / "metrics.json", reports)
    return EXIT_OK


def snapshot_figure(X, scenario: Scenario, title: str = ""):
    """Six scatter panels of agent positions at t = 0, 0.2T, ..., T."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Circle, Ellipse

    N = X.shape[1] - 1
    pts = X.reshape(-1, X.shape[-1])
    if X.shape[-1] == 2:
        # keep the target and obstacles in view
        extra = [np.asarray(scenario.target, dtype=float)[None]]
        extra += [np.asarray(o.center, dtype=float) + np.array([[-1, -1], [1, 1]]) * np.max(
            o.radius if o.kind == "circle" else o.axes) for o in scenario.obstacles]
        pts = np.concatenate([pts, *extra])
    lo, hi = pts.min(0), pts.max(0)
    span = hi - lo + 2
    height = 3.4 if X.shape[-1] != 2 else min(3.4, 3 * span[1] / span[0] + 1.0)
    fig, axes = plt.subplots(1, 6, figsize=(18, height), sharex=True, sharey=True)
    for ax, frac in zip(axes, SNAPSHOT_FRACTIONS):
        n = int(round(frac * N))
        for o in scenario.obstacles:
            patch = Circle(o.center, o.radius) if o.kind == "circle" else \
                Ellipse(o.center, 2 * o.axes[0], 2 * o.axes[1])
            patch.set(color="0.6", alpha=0.6)
            ax.add_patch(patch)
        if X.shape[-1] == 2:
            ax.scatter(X[:, n, 0], X[:, n, 1], s=2, alpha=0.5)
            ax.scatter(*scenario.target, marker="*", s=80, color="k")
            ax.set_ylim(lo[1] - 1, hi[1] + 1)
            ax.set_aspect("equal", adjustable="box")
        else:
            ax.hist(X[:, n, 0], bins=50, density=True)
        ax.set_xlim(lo[0] - 1, hi[0] + 1)
        ax.set_title(f"t = {frac:.1f}T")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return fig


def cmd_plot(cfg, out: Path) -> int:
    agents = cfg.get("eval", {}).get("agents", 1000)
    for i, (name, s) in enumerate(scenarios(cfg)):
        X, _, _ = trajectories(cfg, i, s, agents)
        fig = snapshot_figure(X, s, name)
        buf = io.BytesIO()
        fig.savefig(buf, format="png", dpi=100)
        _io.atomic_write_bytes(out / f"snapshots-{i}.png", buf.getvalue())
    return EXIT_OK


HANDLERS = {"train-fixed": cmd_train_fixed, "train-operator": cmd_train_operator,
            "infer": cmd_infer, "oracle": cmd_oracle, "eval": cmd_eval, "plot": cmd_plot}


def run(cfg: dict) -> int:
    """Run one validated config; returns the exit status."""
    preflight(cfg)
    torch.manual_seed(cfg.get("seed", 0))
    return HANDLERS[cfg["command"]](cfg, out_dir(cfg))


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfgflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help=f"output directory (default ${OUT_ENV}/{name})")
        s.add_argument("--checkpoint", help="operator or fixed-solve checkpoint")
        s.add_argument("--family", help="scenario family id")
        s.add_argument("--scenario", help="scenario JSON file")
        s.add_argument("--device", help="compute device (cpu)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return run(cfg)
    except (SchemaError, ConfigError, LayoutError, StabilityError) as e:
        print(f"mfgflow: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergence as e:
        print(f"mfgflow: {e}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except OSError as e:
        print(f"mfgflow: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
