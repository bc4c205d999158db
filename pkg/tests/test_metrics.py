import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from mfgflow.core import Obstacle
from mfgflow.flow import DensityFlow
from mfgflow.metrics import (MetricsReport, collision_flags, collision_success_rate, level_deviations,
                             obstacle_success_rate, timed, timed_repeat, volume_invariance,
                             write_reports_csv)


def _spread_paths(M=20, steps=11):
    # agents on separate horizontal lanes, 1 unit apart
    x = np.linspace(-5, 5, steps)
    paths = np.zeros((M, steps, 2))
    paths[:, :, 0] = x
    paths[:, :, 1] = np.arange(M)[:, None] + 5.0
    return paths


def test_far_apart_no_obstacles():
    assert collision_success_rate(_spread_paths(), (), 0.1) == 1.0


def test_single_obstacle_violator():
    paths = _spread_paths()
    paths[3, :, 1] = 0.0
    obs = (Obstacle(center=(0.0, 0.0), radius=0.5),)
    M = len(paths)
    assert collision_success_rate(paths, obs, 0.1) == (M - 1) / M


def test_coincident_pair_both_fail():
    paths = _spread_paths()
    paths[7, 2] = paths[8, 2]
    M = len(paths)
    assert collision_success_rate(paths, (), 0.1) == (M - 2) / M
    hit_obs, hit_agent = collision_flags(paths, (), 0.1)
    assert np.flatnonzero(hit_agent).tolist() == [7, 8] and not hit_obs.any()


def test_permutation_invariance():
    rng = np.random.default_rng(0)
    paths = rng.normal(scale=3, size=(300, 5, 2))
    obs = (Obstacle(center=(0.0, 0.0), radius=1.0),)
    base = collision_success_rate(paths, obs, 0.2)
    assert 0 < base < 1
    for _ in range(3):
        assert collision_success_rate(paths[rng.permutation(300)], obs, 0.2) == base
    assert obstacle_success_rate(paths, obs) >= base


def test_collision_input_validation():
    with pytest.raises(ValueError):
        collision_success_rate(np.zeros((3, 2)))
    bad = np.zeros((2, 3, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        collision_success_rate(bad)


def _gauss_fields(scale=1.0, res=200):
    ax = -6 + (np.arange(res) + 0.5) * 12 / res
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    pdf = multivariate_normal(mean=[0, 0]).pdf(np.stack([X, Y], -1))
    return scale * pdf[None]


def test_gaussian_quadrature():
    box = ((-6.0, -6.0), (6.0, 6.0))
    dev = level_deviations(_gauss_fields(), box, 200)
    assert dev.max() <= 1e-6
    assert volume_invariance(_gauss_fields(), box, 200) <= -6


def test_scaled_density():
    box = ((-6.0, -6.0), (6.0, 6.0))
    assert volume_invariance(_gauss_fields(1.1), box, 200) == pytest.approx(-1.0, abs=1e-4)


def test_callable_source_and_refinement():
    box = ((-6.0, -6.0), (6.0, 6.0))
    pdf = multivariate_normal(mean=[0.3, -0.2], cov=[[1.0, 0.3], [0.3, 0.8]]).pdf
    devs = [level_deviations(lambda x, n: pdf(x), box, r, levels=[0])[0] for r in (25, 50, 100, 200)]
    for coarse, fine in zip(devs, devs[1:]):
        assert fine <= 2 * coarse + 1e-14


def test_coarse_cell_rejected():
    flow = DensityFlow(2, 3, (0.0, 0.0), 0.2, box=((-6, -6), (6, 6)))
    with pytest.raises(ValueError):
        volume_invariance(flow, flow.box, 50)


def test_fresh_flow_volume():
    flow = DensityFlow(2, 3, (0.0, 0.0), 1.0, box=((-6, -6), (6, 6)))
    assert volume_invariance(flow, flow.box, 200) <= -1.25


def test_timed():
    (_, seconds) = timed(lambda: None)
    assert seconds < 0.01
    out, mean, spread = timed_repeat(lambda: sum(range(1000)), 5)
    assert out == 499500 and mean >= 0 and spread >= 0 and math.isfinite(spread)


def test_report_csv(tmp_path):
    r = MetricsReport("a", 1.5, 0.9, -3.0, 0.1, 0.95)
    write_reports_csv(tmp_path / "m.csv", [r], drop_timing=True)
    text = (tmp_path / "m.csv").read_text()
    assert "solve_seconds" not in text and "0.9" in text
    with pytest.raises(ValueError):
        MetricsReport("b", 1.0, 1.5, -3.0)
