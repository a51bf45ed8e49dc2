import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blitzgp.errors import DataError, GuardError, SchemaError
from blitzgp.exact_gp import ExactGP
from blitzgp.kernels import EQParams, GPHyperparams
from blitzgp.data import (
    Dataset,
    Normalization,
    ar_lag,
    evaluate,
    gaussian_log_likelihood,
    gen_square_wave,
    gen_toy_gp,
    load_csv,
    load_features,
    report_from_predictions,
    split_indices,
    square_wave,
    write_csv,
)


class TestCsv:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b,t\n1,2,3\n4,5,6\n7,8,9\n")
        ds = load_csv(p, "t")
        assert ds.n == 3 and ds.features == ["a", "b"]
        np.testing.assert_array_equal(ds.y, [3, 6, 9])

    def test_column_selection(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b,t\n1,2,3\n4,5,6\n")
        ds = load_csv(p, "a", ["t"])
        np.testing.assert_array_equal(ds.x[:, 0], [3, 6])
        np.testing.assert_array_equal(ds.y, [1, 4])

    def test_bad_row_dropped_with_warning(self, tmp_path, caplog):
        p = tmp_path / "d.csv"
        p.write_text("a,t\n1,2\nfoo,3\n4,\n5,nan\n6,7\n")
        with caplog.at_level(logging.WARNING):
            ds = load_csv(p, "t")
        assert ds.n == 2 and ds.dropped == 3
        assert "dropped 3" in caplog.text

    def test_missing_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(SchemaError):
            load_csv(p, "t")

    def test_nothing_usable(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,t\nx,y\n")
        with pytest.raises(DataError):
            load_csv(p, "t")

    def test_bitwise_round_trip(self, rng, tmp_path):
        ds = Dataset(rng.standard_normal((20, 3)) * 1e3, rng.standard_normal(20) / 7, ["p", "q", "r"], "z")
        p = tmp_path / "rt.csv"
        write_csv(ds, p)
        back = load_csv(p, "z")
        np.testing.assert_array_equal(back.x, ds.x)
        np.testing.assert_array_equal(back.y, ds.y)
        assert back.features == ds.features

    def test_load_features(self, tmp_path):
        p = tmp_path / "q.csv"
        p.write_text("u,v\n1,2\n3,4\n")
        np.testing.assert_array_equal(load_features(p, ["v"]), [[2], [4]])
        with pytest.raises(SchemaError):
            load_features(p, ["w"])


class TestNormalization:
    @settings(max_examples=50, deadline=None)
    @given(y=arrays(np.float64, st.integers(2, 30), elements=st.floats(-1e4, 1e4)))
    def test_round_trip(self, y):
        norm = Normalization.fit(np.zeros((y.size, 1)), y)
        np.testing.assert_allclose(norm.inverse_y(norm.transform_y(y)), y, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(y).max()))

    def test_log_round_trip(self, rng):
        y = np.exp(rng.uniform(8, 14, 50))
        norm = Normalization.fit(rng.standard_normal((50, 2)), y, log_target=True)
        z = norm.transform_y(y)
        assert abs(z.mean()) < 1e-12 and z.std() == pytest.approx(1.0)
        np.testing.assert_allclose(norm.inverse_y(z), y, rtol=1e-12)

    def test_log_needs_positive(self):
        with pytest.raises(DataError):
            Normalization.fit(np.zeros((2, 1)), [1.0, -1.0], log_target=True)

    def test_constant_columns(self):
        norm = Normalization.fit(np.ones((4, 2)), np.full(4, 3.0))
        np.testing.assert_array_equal(norm.x_scale, [1.0, 1.0])
        assert norm.y_scale == 1.0

    def test_dict_round_trip(self, rng):
        norm = Normalization.fit(rng.standard_normal((9, 2)), rng.standard_normal(9))
        back = Normalization.from_dict(norm.to_dict())
        np.testing.assert_array_equal(back.x_mean, norm.x_mean)
        assert back.y_scale == norm.y_scale
        with pytest.raises(SchemaError):
            Normalization.from_dict({"x_mean": [0.0]})


class TestSplit:
    def test_deterministic_partition(self):
        a = split_indices(100, 0.2, 7)
        b = split_indices(100, 0.2, 7)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)
        train, test = a
        assert test.size == 20
        np.testing.assert_array_equal(np.sort(np.concatenate(a)), np.arange(100))
        assert not np.array_equal(split_indices(100, 0.2, 8)[1], test)

    @pytest.mark.parametrize("frac", [0.0, 1.0])
    def test_bad_fraction(self, frac):
        with pytest.raises(ValueError):
            split_indices(10, frac, 0)

    def test_too_small(self):
        with pytest.raises(DataError):
            split_indices(3, 0.1, 0)


class TestArLag:
    def test_features(self):
        ds = ar_lag(np.arange(8.0), 3, "w")
        assert ds.n == 5 and ds.features == ["w_lag3", "w_lag2", "w_lag1"]
        np.testing.assert_array_equal(ds.x[0], [0, 1, 2])
        assert ds.y[0] == 3

    def test_too_short(self):
        with pytest.raises(DataError):
            ar_lag([1.0, 2.0], 2)


class TestToyGenerator:
    def test_deterministic(self):
        a, b = gen_toy_gp(3, n=50), gen_toy_gp(3, n=50)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        assert np.all(np.abs(a.x) <= 2)

    def test_pair_covariance_monte_carlo(self):
        prods, expected = [], []
        for seed in range(1000):
            ds = gen_toy_gp(seed, n=2, noise=0.0)
            prods.append(ds.y[0] * ds.y[1])
            expected.append(math.exp(-0.5 * np.sum((ds.x[0] - ds.x[1]) ** 2) / 20.0))
        diff = np.array(prods) - np.array(expected)
        assert abs(diff.mean()) <= 3 * diff.std() / math.sqrt(1000)

    def test_cap(self):
        with pytest.raises(GuardError):
            gen_toy_gp(0, n=11, dense_cap=10)


class TestSquareWave:
    def test_block_centres(self):
        np.testing.assert_array_equal(square_wave([[0.5, 0.5], [1.5, 0.5], [1.5, 1.5], [0.5, 3.5]], 2.0), [2, -2, 2, -2])

    def test_excision_disjoint(self):
        obs, cut = gen_square_wave(0, n=2000)
        assert obs.n + cut.n == 2000
        assert not np.any(np.floor(obs.x) == 3)
        assert np.all(np.any(np.floor(cut.x) == 3, axis=1))

    def test_no_excision(self):
        obs, cut = gen_square_wave(1, n=300, strips=[])
        assert obs.n == 300 and cut is None

    def test_everything_excised(self):
        with pytest.raises(DataError):
            gen_square_wave(0, n=100, blocks=1)

    def test_invalid_strip(self):
        with pytest.raises(ValueError):
            gen_square_wave(0, n=10, strips=[(2, 0)])


class TestEvaluation:
    def test_perfect_predictions(self):
        r = report_from_predictions([1.0, 2.0], [1.0, 2.0], [0.1, 0.1], "m", 0.0)
        assert r.rmse == 0.0

    def test_single_point(self):
        r = report_from_predictions([0.0], [0.0], [1.0], "m", 0.0)
        assert r.mean_log_likelihood == pytest.approx(-0.5 * math.log(2 * math.pi))
        assert r.sum_log_likelihood == r.mean_log_likelihood

    def test_empty(self):
        with pytest.raises(ValueError):
            report_from_predictions([], [], [], "m", 0.0)
        with pytest.raises(ValueError):
            evaluate(None, Dataset(np.zeros((0, 1)), np.zeros(0)))

    def test_log_likelihood_formula(self, rng):
        y, m, v = rng.standard_normal(5), rng.standard_normal(5), rng.uniform(0.1, 2, 5)
        expected = np.log(np.exp(-0.5 * (y - m) ** 2 / v) / np.sqrt(2 * math.pi * v))
        np.testing.assert_allclose(gaussian_log_likelihood(y, m, v), expected, rtol=1e-12)

    def test_evaluate_uses_observation_noise(self, rng):
        x = rng.uniform(-1, 1, (30, 1))
        y = np.sin(3 * x[:, 0])
        gp = ExactGP(x, y, GPHyperparams(EQParams.create([0.5]), math.log(100.0)))
        test = Dataset(x[:5], y[:5])
        r = evaluate(gp, test, "exact")
        mean, var = gp.predict(test.x)
        expected = gaussian_log_likelihood(test.y, mean, var + 0.01)
        assert r.mean_log_likelihood == pytest.approx(expected.mean(), rel=1e-12)
        assert r.n_test == 5 and r.model == "exact" and r.wall_seconds >= 0
