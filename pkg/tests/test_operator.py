import numpy as np
import pytest
import torch

from mfgflow import operator as op
from mfgflow.core import BoundaryCode, CodeLayout, LayoutError, Obstacle
from mfgflow.oracle import LQDensity, LQSolution

N = 10


@pytest.fixture(scope="module")
def toy():
    return op.toy_sampler(N=N), op.toy_problem_builder(N)


@pytest.fixture(scope="module")
def fresh(toy):
    smp, _ = toy
    return op.OperatorModel(smp.layout, N, smp.box, code_bounds=smp.bounds(), seed=0)


@pytest.fixture(scope="module")
def recall(toy):
    """Operator fitted to four toy codes with 1000 stored queries each."""
    smp, build = toy
    samples = op.collect_samples(smp.draw(4, 0, 0), build, 1000, seed=0)
    model = op.OperatorModel(smp.layout, N, smp.box, code_bounds=smp.bounds(), seed=0)
    op.fit_operator(model, samples, 1200, lr=1e-2, batch=4, queries_per_step=128)
    return model, samples


@pytest.fixture(scope="module")
def online(toy):
    """Operator trained online on 32 toy codes with exact inner solves."""
    smp, build = toy
    cfg = op.PionmConfig(lr=1e-2, queries=128)
    return op.train_pionm(smp, build, 32, cfg, inner_solver=op.exact_lq_solver)


def test_empty_query_batch(fresh, toy):
    code = toy[0].draw(1, 5)[0]
    out = op.operator_eval(fresh, code, np.zeros((0, 1)))
    assert out.shape == (0, N)


def test_fresh_model_contract(fresh, toy):
    smp, _ = toy
    rng = np.random.default_rng(0)
    for code in smp.draw(5, 1):
        out = op.operator_eval(fresh, code, rng.uniform(-8, 6, (50, 1)))
        assert out.shape == (50, N)
        assert np.all(np.isfinite(out)) and np.all(out >= 0)


def test_output_length_independent_of_code():
    lay = CodeLayout(dim=2, max_obstacles=2)
    model = op.OperatorModel(lay, 7, ((-16, -12), (16, 12)), seed=1)
    a = BoundaryCode((-7.0, 0.0), 0.2, (7.0, 0.0), 1.0, layout=lay)
    b = BoundaryCode((-7.0, 0.0), 0.2, (7.0, 0.0), 1.0, layout=lay,
                     obstacles=(Obstacle((0, 0), 2.0), Obstacle((1, 1), 1.0)))
    q = np.zeros((3, 2))
    assert op.operator_eval(model, a, q).shape == op.operator_eval(model, b, q).shape == (3, 7)


def test_query_and_layout_validation(fresh, toy):
    code = toy[0].draw(1, 5)[0]
    with pytest.raises(ValueError):
        op.operator_eval(fresh, code, np.array([[np.nan]]))
    other = BoundaryCode((0.0, 0.0), 1.0, (1.0, 1.0), 1.0)
    with pytest.raises(LayoutError):
        op.operator_eval(fresh, other, np.zeros((2, 2)))


class _Offset(op.OperatorModel):
    def forward(self, codes, x):
        return super().forward(codes, x) + 1.0


def test_loss_pino_cases(fresh, toy):
    smp, _ = toy
    code = smp.draw(1, 7)[0]
    q = np.random.default_rng(0).uniform(-4, 3, (40, 1))
    pred = op.operator_eval(fresh, code, q)
    exact = op.TrainSample(code, q, pred)
    with torch.no_grad():
        assert abs(float(op.loss_pino(fresh, exact))) <= 1e-10
        shifted = _Offset(smp.layout, N, smp.box, code_bounds=smp.bounds(), seed=0)
        assert abs(float(op.loss_pino(shifted, exact)) - 1.0) <= 1e-10


def test_loss_pino_brute_force(fresh, toy):
    smp, build = toy
    code = smp.draw(1, 8)[0]
    sample = op.make_sample(code, op.exact_lq_solver(build(code)).source, 30, seed=2)
    pred = op.operator_eval(fresh, code, sample.queries)
    M, n = pred.shape
    brute = 0.0
    for k in range(n):
        for i in range(M):
            brute += (pred[i, k] - sample.targets[i, k]) ** 2
    brute /= n * M
    with torch.no_grad():
        assert abs(float(op.loss_pino(fresh, sample)) - brute) <= 1e-12


def test_train_sample_validation(toy):
    code = toy[0].draw(1, 5)[0]
    with pytest.raises(ValueError):
        op.TrainSample(code, np.zeros((3, 1)), -np.ones((3, N)))
    with pytest.raises(ValueError):
        op.TrainSample(code, np.zeros((3, 1)), np.ones((2, N)))


def test_make_sample_spreads_queries(toy):
    smp, build = toy
    code = smp.draw(1, 3)[0]
    src = LQDensity(LQSolution.for_problem(build(code)), N)
    s = op.make_sample(code, src, 25, seed=0)
    assert s.queries.shape == (25, 1) and s.targets.shape == (25, N)
    x = torch.as_tensor(s.queries)
    assert np.allclose(s.targets[:, 3], src.density(x, 4).numpy())


def test_spectral_layer_matches_fft():
    torch.manual_seed(0)
    for n, modes in ((10, 4), (10, 6), (9, 5), (20, 8)):
        layer = op.SpectralMix(3, modes, n)
        h = torch.randn(5, 3, n, dtype=torch.float64)
        m = layer.modes
        spec = torch.fft.rfft(h, dim=-1)[..., :m]
        w = torch.complex(layer.weight[0], layer.weight[1])          # (m, W, W)
        mixed = torch.einsum("bim,mio->bom", spec, w)
        full = torch.zeros(5, 3, n // 2 + 1, dtype=torch.complex128)
        full[..., :m] = mixed
        ref = torch.fft.irfft(full, n=n, dim=-1)
        with torch.no_grad():
            assert torch.allclose(layer(h), ref, atol=1e-12)


def test_canonical_slots_give_identical_outputs():
    lay = CodeLayout(dim=2, max_obstacles=2, canonical=True)
    model = op.OperatorModel(lay, 5, ((-16, -12), (16, 12)), seed=3)
    o1, o2 = Obstacle((1.0, 0.0), 1.0), Obstacle((-1.0, 2.0), 0.5)
    a = BoundaryCode((-7.0, 0.0), 0.2, (7.0, 0.0), 1.0, obstacles=(o1, o2), layout=lay)
    b = BoundaryCode((-7.0, 0.0), 0.2, (7.0, 0.0), 1.0, obstacles=(o2, o1), layout=lay)
    q = np.random.default_rng(0).uniform(-5, 5, (20, 2))
    assert np.array_equal(op.operator_eval(model, a, q), op.operator_eval(model, b, q))
    plain = CodeLayout(dim=2, max_obstacles=2)
    model2 = op.OperatorModel(plain, 5, ((-16, -12), (16, 12)), seed=3)
    a2 = BoundaryCode(a.init_mean, 0.2, a.target, 1.0, obstacles=(o1, o2), layout=plain)
    b2 = BoundaryCode(a.init_mean, 0.2, a.target, 1.0, obstacles=(o2, o1), layout=plain)
    assert not np.array_equal(op.operator_eval(model2, a2, q), op.operator_eval(model2, b2, q))


def test_checkpoint_round_trip(tmp_path, fresh, toy):
    p = tmp_path / "op.npz"
    op.save_operator(p, fresh)
    again = op.load_operator(p, layout=toy[0].layout)
    code = toy[0].draw(1, 4)[0]
    q = np.linspace(-3, 3, 11)[:, None]
    assert np.array_equal(op.operator_eval(again, code, q), op.operator_eval(fresh, code, q))
    with pytest.raises(LayoutError):
        op.load_operator(p, layout=CodeLayout(dim=2, max_obstacles=2))


def test_seeded_construction_is_deterministic(toy):
    smp, _ = toy
    a = op.OperatorModel(smp.layout, N, smp.box, seed=5)
    b = op.OperatorModel(smp.layout, N, smp.box, seed=5)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_training_recall(recall):
    model, samples = recall
    for s in samples:
        pred = op.operator_eval(model, s.code, s.queries)
        # error relative to each level's peak target density
        rel = np.abs(pred - s.targets).max(0) / s.targets.max(0)
        assert rel.max() <= 0.10


def test_zero_budget(toy):
    smp, build = toy
    model, report = op.train_pionm(smp, build, 0, inner_solver=op.exact_lq_solver)
    assert report.rows == [] and report.trace == []
    ref = op.OperatorModel(smp.layout, N, smp.box, code_bounds=smp.bounds(), seed=0)
    for k, v in model.state_dict().items():
        assert torch.equal(v, ref.state_dict()[k])


def _heldout_l1(model, codes, build):
    xs = np.linspace(-8, 6, 400)[:, None]
    dx = xs[1, 0] - xs[0, 0]
    errs = []
    for c in codes:
        lq = LQDensity(LQSolution.for_problem(build(c)), N)
        exact = np.stack([lq.density(torch.as_tensor(xs), n).numpy() for n in range(1, N + 1)], -1)
        errs.append(np.abs(op.operator_eval(model, c, xs) - exact).sum(0).mean() * dx)
    return float(np.mean(errs))


def test_online_training_beats_untrained(online, toy):
    smp, build = toy
    model, report = online
    held = smp.draw(8, 0, 1)
    base = op.OperatorModel(smp.layout, N, smp.box, code_bounds=smp.bounds(), seed=0)
    assert _heldout_l1(base, held, build) >= 5 * _heldout_l1(model, held, build)
    best = report.best_trace
    assert len(best) == 32 and np.all(np.diff(best) <= 0)


def test_session_report_csv(online, tmp_path):
    _, report = online
    report.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].split(",") == list(op.REPORT_COLUMNS) and len(lines) == 33


def test_inference_1d(online, toy):
    smp, _ = toy
    model, _ = online
    code = smp.draw(1, 9)[0]
    inf = op.infer_equilibrium(model, code, resolution=400)
    assert inf.fields.shape == (400, N) and np.all(np.isfinite(inf.fields))
    assert np.all((inf.masses >= 0.5) & (inf.masses <= 1.5))
    again = op.infer_equilibrium(model, code, resolution=400)
    assert np.array_equal(inf.fields, again.fields)
    with pytest.raises(ValueError):
        op.infer_equilibrium(model, code, box=((-20.0,), (6.0,)))


def test_inference_2d_lattice_shape():
    smp = op.crowd_sampler(N=12)
    model = op.OperatorModel(smp.layout, 12, smp.box, code_bounds=smp.bounds(), seed=0)
    code = smp.draw(1, 0)[0]
    inf = op.infer_equilibrium(model, code, resolution=100)
    assert inf.fields.shape == (100 * 100, 12) and np.all(np.isfinite(inf.fields))
    assert np.array_equal(inf.fields, op.infer_equilibrium(model, code, resolution=100).fields)


def test_nonconverged_inner_solves_are_skipped(toy):
    smp, build = toy

    def never(problem, warm_start=None, warm_weight=0.0):
        return op.InnerResult(None, 3, False)

    model, report = op.train_pionm(smp, build, 3, inner_solver=never)
    assert [r["status"] for r in report.rows] == ["skipped"] * 3


def test_exact_solver_rejects_obstacles():
    smp = op.crowd_sampler(N=5)
    code = BoundaryCode((-7.0, 0.0), 0.2, (7.0, 0.0), 1.0,
                        obstacles=(Obstacle((0, 0), 2.0),), layout=smp.layout)
    from mfgflow.core import build_crowd_motion
    with pytest.raises(ValueError):
        op.exact_lq_solver(build_crowd_motion(code, N=5))
