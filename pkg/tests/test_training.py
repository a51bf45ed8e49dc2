import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blitzgp.errors import ConfigError, DegenerateGridError, NonFiniteGradientError
from blitzgp.exact_gp import ExactGP
from blitzgp.kernels import EQParams, GPHyperparams
from blitzgp.svgp import BlitzModel, elbo
from blitzgp.training import (
    TRACE_HEADER,
    AdadeltaState,
    TrainConfig,
    adadelta_step,
    build_grid,
    minibatch_schedule,
    train,
)


class Quadratic:
    """Minimal trainer-protocol model: maximise ``-sum(p^2)``."""

    def __init__(self, p0):
        self.p = np.array(p0, dtype=np.float64)

    def get_params(self):
        return self.p.copy()

    def set_params(self, vec):
        self.p = np.array(vec, dtype=np.float64)

    def param_names(self):
        return [f"p{j}" for j in range(self.p.size)]

    def objective(self, vec, x, y, scale=1.0):
        self.set_params(vec)
        return -float(self.p @ self.p), -2.0 * self.p, {}


def toy(rng, n=60):
    x = rng.uniform(-2, 2, (n, 2))
    return x, np.sin(1.5 * x[:, 0]) * np.cos(x[:, 1]) + 0.1 * rng.standard_normal(n)


def toy_model(x, sizes=(4, 4)):
    return BlitzModel(build_grid(x, sizes, 0.05), GPHyperparams(EQParams.create([1.0, 1.0], 1.0), math.log(10.0)))


class TestAdadelta:
    def test_first_step(self):
        _, p = adadelta_step(AdadeltaState.zeros(1), np.zeros(1), np.ones(1))
        assert p[0] == pytest.approx(-math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6), rel=1e-12)
        assert p[0] == pytest.approx(-4.47e-3, abs=1e-5)

    def test_zero_gradient(self):
        state = AdadeltaState(np.array([0.4]), np.array([0.2]))
        new, p = adadelta_step(state, np.array([1.5]), np.zeros(1))
        assert p[0] == 1.5
        assert new.sq_grad[0] == pytest.approx(0.95 * 0.4)
        assert new.sq_delta[0] == pytest.approx(0.95 * 0.2)

    def test_converges_on_parabola(self):
        state, x = AdadeltaState.zeros(1), np.array([5.0])
        for step in range(1, 10001):
            state, x = adadelta_step(state, x, 2 * x)
            if abs(x[0]) < 0.1:
                break
        assert abs(x[0]) < 0.1, step

    def test_non_finite_gradient_names_parameter(self):
        with pytest.raises(NonFiniteGradientError) as info:
            adadelta_step(AdadeltaState.zeros(3), np.zeros(3), np.array([0.0, np.nan, 1.0]), ["a", "b", "c"], 7)
        assert info.value.parameter == "b" and info.value.iteration == 7

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adadelta_step(AdadeltaState.zeros(2), np.zeros(3), np.zeros(3))

    @settings(max_examples=50, deadline=None)
    @given(g=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=5), steps=st.integers(1, 20))
    def test_steps_bounded_and_finite(self, g, steps):
        g = np.array(g)
        state, p = AdadeltaState.zeros(g.size), np.zeros(g.size)
        for _ in range(steps):
            prev = p
            state, p = adadelta_step(state, p, g)
            bound = math.sqrt((state.sq_delta.max() + state.eps) / state.eps) * np.abs(g).max()
            assert np.all(np.isfinite(p))
            assert np.abs(p - prev).max() <= bound + 1e-12
            assert np.all(state.sq_grad >= 0) and np.all(state.sq_delta >= 0)


class TestSchedule:
    def test_full_batch(self):
        (batch,) = minibatch_schedule(5, 5, 0, 0)
        np.testing.assert_array_equal(np.sort(batch), np.arange(5))

    def test_two_disjoint_batches(self):
        a, b = minibatch_schedule(4, 2, 3, 1)
        assert set(a).isdisjoint(b) and set(a) | set(b) == {0, 1, 2, 3}

    def test_deterministic(self):
        for a, b in zip(minibatch_schedule(50, 8, 11, 4), minibatch_schedule(50, 8, 11, 4)):
            np.testing.assert_array_equal(a, b)

    def test_epochs_differ(self):
        assert not np.array_equal(np.concatenate(minibatch_schedule(50, 8, 11, 0)), np.concatenate(minibatch_schedule(50, 8, 11, 1)))

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(1, 300), data=st.data())
    def test_epoch_coverage(self, n, data):
        b = data.draw(st.integers(1, n))
        idx = np.concatenate(minibatch_schedule(n, b, data.draw(st.integers(0, 99)), data.draw(st.integers(0, 9))))
        np.testing.assert_array_equal(np.sort(idx), np.arange(n))

    @pytest.mark.parametrize("b", [0, 6])
    def test_bad_batch(self, b):
        with pytest.raises(ValueError):
            minibatch_schedule(5, b, 0, 0)


class TestBuildGrid:
    def test_toy_domain(self):
        x = np.array([[-2.0, -2.0], [2.0, 2.0], [0.3, -1.0]])
        g = build_grid(x, (27, 27))
        for p in g.points:
            np.testing.assert_allclose(p, np.linspace(-2, 2, 27))

    def test_padding(self):
        g = build_grid(np.array([[0.0], [10.0], [3.0]]), (5,), padding=0.05)
        assert g.points[0][0] == pytest.approx(-0.5)
        assert g.points[0][-1] == pytest.approx(10.5)

    def test_midpoints(self):
        g = build_grid(np.array([[0.0, 4.0], [2.0, 8.0]]), (1, 1))
        np.testing.assert_allclose(g.locations(), [[1.0, 6.0]])

    def test_degenerate_dimension(self):
        x = np.array([[1.0, 0.0], [1.0, 2.0]])
        with pytest.raises(DegenerateGridError):
            build_grid(x, (3, 3))
        assert build_grid(x, (1, 3)).sizes == (1, 3)

    def test_size_count_mismatch(self):
        with pytest.raises(ValueError):
            build_grid(np.zeros((2, 2)), (3,))


class TestConfig:
    def test_collects_errors(self):
        with pytest.raises(ConfigError) as info:
            TrainConfig(batch_size=0, rho=1.5, optimizer="sgd")
        assert len(info.value.errors) == 3

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"batch": 4})

    def test_round_trip(self):
        cfg = TrainConfig(batch_size=32, iterations=7, seed=3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTrain:
    def test_zero_budget_is_identity(self, rng):
        x, y = toy(rng)
        m = toy_model(x)
        before = m.get_params()
        for opt in ("adadelta", "lbfgs"):
            _, trace = train(m, x, y, TrainConfig(iterations=0, optimizer=opt))
            np.testing.assert_array_equal(m.get_params(), before)
            assert len(trace) == 0

    def test_adadelta_improves_and_timestamps_increase(self, rng):
        x, y = toy(rng, 120)
        m = toy_model(x)
        start = elbo(m, x, y)
        m, trace = train(m, x, y, TrainConfig(batch_size=32, iterations=300, eval_every=20))
        times = [r.wall_seconds for r in trace.rows]
        assert np.all(np.diff(times) > 0)
        assert elbo(m, x, y) > start
        assert elbo(m, x, y) == pytest.approx(max(r.l3_estimate for r in trace.rows), rel=1e-10)
        assert m.iteration == 300 and m.seed == 0

    def test_best_so_far_is_monotone(self, rng):
        x, y = toy(rng, 100)
        _, trace = train(toy_model(x), x, y, TrainConfig(batch_size=10, iterations=200, eval_every=10))
        assert np.all(np.diff(trace.best_so_far()) >= 0)

    def test_lbfgs_monotone_over_200_steps(self, rng):
        x, y = toy(rng, 80)
        m, trace = train(toy_model(x), x, y, TrainConfig(iterations=200, optimizer="lbfgs"))
        values = np.array([r.l3_estimate for r in trace.rows])
        assert np.all(np.diff(values) >= -1e-6)
        assert values[-1] > values[0]

    def test_deterministic(self, rng):
        x, y = toy(rng, 90)
        cfg = TrainConfig(batch_size=16, iterations=60, eval_every=15, seed=4)
        a, _ = train(toy_model(x), x, y, cfg)
        b, _ = train(toy_model(x), x, y, cfg)
        np.testing.assert_array_equal(a.get_params(), b.get_params())

    def test_eval_subsample(self, rng):
        x, y = toy(rng, 200)
        cfg = TrainConfig(batch_size=50, iterations=10, eval_every=5, eval_subsample=50)
        _, trace = train(toy_model(x), x, y, cfg)
        assert [r.iteration for r in trace.rows] == [0, 5, 10]

    def test_patience(self):
        m = Quadratic([0.0])
        _, trace = train(m, np.zeros((4, 1)), np.zeros(4), TrainConfig(batch_size=2, iterations=100, eval_every=1, patience=3))
        assert len(trace) == 4

    def test_generic_model_protocol(self):
        m, _ = train(Quadratic([3.0, -2.0]), np.zeros((10, 1)), np.zeros(10), TrainConfig(batch_size=5, iterations=5000, eval_every=100))
        assert np.abs(m.p).max() < 0.1

    def test_exact_gp_lbfgs(self, rng):
        x, y = toy(rng, 50)
        gp = ExactGP(x, y, GPHyperparams(EQParams.create([1.0, 1.0], 1.0), 0.0))
        start = gp.log_marginal_likelihood()
        gp, _ = train(gp, x, y, TrainConfig(iterations=100, optimizer="lbfgs"))
        assert gp.log_marginal_likelihood() > start

    def test_trace_csv(self, rng, tmp_path):
        x, y = toy(rng, 40)
        _, trace = train(toy_model(x), x, y, TrainConfig(batch_size=10, iterations=20, eval_every=10))
        path = tmp_path / "trace.csv"
        trace.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0].split(",") == list(TRACE_HEADER)
        assert len(lines) == 1 + len(trace)
        assert float(lines[-1].split(",")[2]) == trace.rows[-1].l3_estimate
