import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blitzgp.errors import DegenerateGridError, NumericError, SchemaError
from blitzgp.kernels import (
    EQParams,
    GPHyperparams,
    SMParams,
    init_eq,
    init_sm,
    kernel_cross_1d,
    kernel_diag,
    kernel_diag_gradient,
    kernel_gradients,
    kernel_gram_1d,
    kernel_lag_derivative,
    kernel_matrix,
    parse_kernel_spec,
)
from blitzgp.kron import KroneckerPSD
from conftest import dense_kron


def random_sm(rng, dims=2, q=3):
    return SMParams.create(
        rng.uniform(0.2, 2.0, (dims, q)),
        rng.uniform(0.05, 1.5, (dims, q)),
        rng.uniform(0.05, 1.0, (dims, q)),
    )


def random_eq(rng, dims=2):
    return EQParams.create(rng.uniform(0.3, 3.0, dims), rng.uniform(0.5, 2.0))


def _with_kernel_vector(params, vec):
    if isinstance(params, EQParams):
        return EQParams.from_vector(vec, params.ndim)
    return SMParams.from_vector(vec, params.ndim, params.n_components)


class TestEQ:
    def test_zero_lag(self):
        p = EQParams.create([1.5, 0.7], variance=2.5)
        assert kernel_cross_1d(p, 0, [0.3], [0.3])[0, 0] == pytest.approx(2.5)
        assert kernel_cross_1d(p, 1, [0.3], [0.3])[0, 0] == pytest.approx(1.0)

    def test_toy_settings_value(self):
        p = EQParams.create([math.sqrt(20.0)], 1.0)
        assert kernel_cross_1d(p, 0, [0.0], [math.sqrt(40.0)])[0, 0] == pytest.approx(math.exp(-1.0), rel=1e-14)

    def test_gram_at_one_lengthscale(self):
        p = EQParams.create([0.8], variance=3.0)
        g = kernel_gram_1d(p, 0, [0.0, 0.8])
        assert g[0, 1] == pytest.approx(3.0 * math.exp(-0.5), rel=1e-14)

    def test_single_point_gram(self):
        p = EQParams.create([1.0], variance=2.0)
        np.testing.assert_allclose(kernel_gram_1d(p, 0, [0.4]), [[2.0]])

    def test_diag_all_ones(self, rng):
        p = EQParams.create([1.0, 2.0], 1.0)
        np.testing.assert_array_equal(kernel_diag(p, rng.standard_normal((5, 2))), np.ones(5))

    def test_variance_gradient_at_zero_lag(self):
        p = EQParams.create([1.3], variance=1.7)
        grads = dict(kernel_gradients(p, 0, [0.2], [0.2]))
        assert grads[0][0, 0] == pytest.approx(1.7)

    def test_lengthscale_gradient_at_one_lengthscale(self):
        p = EQParams.create([0.9], variance=2.0)
        grads = dict(kernel_gradients(p, 0, [0.0], [0.9]))
        assert grads[1][0, 0] == pytest.approx(2.0 * math.exp(-0.5), rel=1e-12)


class TestSM:
    def test_zero_mean_single_component_is_gaussian(self):
        p = SMParams.create([[1.0]], [[1e-300]], [[0.4]])
        tau = np.array([0.0, 0.5, 1.3])
        got = kernel_cross_1d(p, 0, tau, [0.0]).ravel()
        np.testing.assert_allclose(got, np.exp(-2 * math.pi**2 * tau**2 * 0.16), rtol=1e-12)
        assert got[0] == 1.0

    def test_diag_is_product_of_weight_sums(self, rng):
        p = random_sm(rng)
        expected = np.prod(np.exp(p.log_weights).sum(axis=1))
        np.testing.assert_allclose(kernel_diag(p, np.zeros((3, 2))), expected, rtol=1e-12)

    def test_even_in_lag(self, rng):
        p = random_sm(rng, dims=1)
        tau = rng.uniform(-3, 3, 10)
        np.testing.assert_allclose(kernel_cross_1d(p, 0, tau, [0.0]), kernel_cross_1d(p, 0, -tau, [0.0]), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(SchemaError):
            SMParams(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 3)))


class TestGrams:
    def test_duplicate_grid_points(self):
        with pytest.raises(DegenerateGridError):
            kernel_gram_1d(EQParams.create([1.0]), 0, [0.0, 1.0, 1.0])

    def test_unsorted_grid(self):
        with pytest.raises(DegenerateGridError):
            kernel_gram_1d(EQParams.create([1.0]), 0, [1.0, 0.0])

    @pytest.mark.parametrize("maker", [random_eq, random_sm])
    def test_symmetric_psd(self, rng, maker):
        for _ in range(10):
            p = maker(rng)
            zs = np.sort(rng.uniform(-3, 3, rng.integers(1, 9)))
            if np.any(np.diff(zs) <= 0):
                continue
            for d in range(p.ndim):
                g = kernel_gram_1d(p, d, zs)
                np.testing.assert_array_equal(g, g.T)
                assert np.linalg.eigvalsh(g).min() > -1e-10 * np.abs(g).max()

    def test_non_finite_inputs(self):
        with pytest.raises(NumericError):
            kernel_cross_1d(EQParams.create([1.0]), 0, [np.nan], [0.0])

    def test_non_finite_parameters(self):
        with pytest.raises(NumericError):
            EQParams(np.inf, np.zeros(1))


@pytest.mark.parametrize("maker", [random_eq, random_sm])
class TestProperties:
    def test_stationary(self, rng, maker):
        p = maker(rng)
        xs, zs = rng.standard_normal(6), rng.standard_normal(4)
        shift = rng.uniform(-5, 5)
        for d in range(p.ndim):
            np.testing.assert_allclose(
                kernel_cross_1d(p, d, xs + shift, zs + shift), kernel_cross_1d(p, d, xs, zs), rtol=1e-10, atol=1e-12
            )

    def test_symmetry(self, rng, maker):
        p = maker(rng)
        xs, zs = rng.standard_normal(6), rng.standard_normal(4)
        for d in range(p.ndim):
            np.testing.assert_allclose(kernel_cross_1d(p, d, xs, zs), kernel_cross_1d(p, d, zs, xs).T, rtol=1e-12, atol=1e-14)

    def test_product_matches_kronecker(self, rng, maker):
        p = maker(rng)
        grid = [np.sort(rng.uniform(-2, 2, 3)), np.sort(rng.uniform(-2, 2, 4))]
        pts = np.stack(np.meshgrid(*grid, indexing="ij"), axis=-1).reshape(-1, 2)
        grams = [kernel_gram_1d(p, d, grid[d]) for d in range(2)]
        np.testing.assert_allclose(kernel_matrix(p, pts, pts), KroneckerPSD(grams).dense(), rtol=1e-12, atol=1e-14)

    def test_diag_matches_dense(self, rng, maker):
        p = maker(rng)
        x = rng.standard_normal((5, 2))
        np.testing.assert_allclose(kernel_diag(p, x), np.diag(kernel_matrix(p, x, x)), rtol=1e-12)


def _fd_check(p, d, xs, zs, step=1e-6):
    base = p.to_vector()
    for idx, analytic in kernel_gradients(p, d, xs, zs):
        up, dn = base.copy(), base.copy()
        up[idx] += step
        dn[idx] -= step
        numeric = (
            kernel_cross_1d(_with_kernel_vector(p, up), d, xs, zs) - kernel_cross_1d(_with_kernel_vector(p, dn), d, xs, zs)
        ) / (2 * step)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


class TestGradients:
    def test_finite_differences_100_configurations(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            p = random_eq(rng, 2) if trial % 2 else random_sm(rng, 2, int(rng.integers(1, 4)))
            xs, zs = rng.uniform(-2, 2, 5), rng.uniform(-2, 2, 4)
            for d in range(2):
                _fd_check(p, d, xs, zs)

    def test_unrelated_parameters_omitted(self, rng):
        p = random_eq(rng, 3)
        assert [i for i, _ in kernel_gradients(p, 2, [0.0], [1.0])] == [3]
        assert [i for i, _ in kernel_gradients(p, 0, [0.0], [1.0])] == [0, 1]

    @pytest.mark.parametrize("maker", [random_eq, random_sm])
    def test_diag_gradient(self, rng, maker):
        p = maker(rng)
        base = p.to_vector()
        step = 1e-6
        x = np.zeros((1, 2))
        num = np.empty(base.size)
        for j in range(base.size):
            up, dn = base.copy(), base.copy()
            up[j] += step
            dn[j] -= step
            num[j] = (kernel_diag(_with_kernel_vector(p, up), x)[0] - kernel_diag(_with_kernel_vector(p, dn), x)[0]) / (2 * step)
        np.testing.assert_allclose(kernel_diag_gradient(p), num, rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("maker", [random_eq, random_sm])
    def test_lag_derivative(self, rng, maker):
        p = maker(rng)
        xs, zs = rng.uniform(-2, 2, 5), rng.uniform(-2, 2, 3)
        h = 1e-6
        for d in range(p.ndim):
            num = (kernel_cross_1d(p, d, xs + h, zs) - kernel_cross_1d(p, d, xs - h, zs)) / (2 * h)
            np.testing.assert_allclose(kernel_lag_derivative(p, d, xs, zs), num, rtol=1e-6, atol=1e-8)


class TestHyperparams:
    @settings(max_examples=40, deadline=None)
    @given(vec=st.lists(st.floats(-5, 5), min_size=4, max_size=4))
    def test_eq_vector_round_trip(self, vec):
        h = GPHyperparams(EQParams.create([1.0, 1.0]), 0.0).with_vector(np.array(vec))
        np.testing.assert_array_equal(h.to_vector(), vec)

    def test_sm_vector_round_trip(self, rng):
        h = GPHyperparams(random_sm(rng, 2, 3), 1.3)
        np.testing.assert_array_equal(h.with_vector(h.to_vector()).to_vector(), h.to_vector())
        assert len(h.param_names()) == h.n_params

    @pytest.mark.parametrize("maker", [random_eq, random_sm])
    def test_json_round_trip_is_exact(self, rng, maker):
        h = GPHyperparams(maker(rng), rng.uniform(-2, 2))
        back = GPHyperparams.from_json(h.to_json())
        np.testing.assert_array_equal(back.to_vector(), h.to_vector())

    def test_beta_is_precision(self):
        h = GPHyperparams(EQParams.create([1.0]), math.log(4.0))
        assert h.beta == pytest.approx(4.0)
        assert h.noise_variance == pytest.approx(0.25)

    def test_missing_key(self):
        with pytest.raises(SchemaError):
            GPHyperparams.from_dict({"kernel": "eq", "log_variance": 0.0})

    def test_unknown_kernel(self):
        with pytest.raises(SchemaError):
            GPHyperparams.from_dict({"kernel": "matern", "log_noise_precision": 0.0})


class TestInitialisation:
    def test_eq_uses_range_and_second_moment(self, rng):
        x = rng.uniform([0, -5], [2, 5], (50, 2))
        y = rng.standard_normal(50) * 3 + 2
        p = init_eq(x, y)
        np.testing.assert_allclose(p.lengthscales, np.ptp(x, axis=0))
        assert p.variance == pytest.approx(np.mean(y**2))
        assert init_eq(x, np.zeros(50)).variance == 1.0

    def test_sm_is_seeded_and_below_nyquist(self, rng):
        x = rng.uniform(0, 4, (30, 2))
        y = rng.standard_normal(30)
        grid = [np.linspace(0, 4, 9), np.linspace(0, 4, 5)]
        a = init_sm(x, y, grid, 4, seed=3)
        b = init_sm(x, y, grid, 4, seed=3)
        np.testing.assert_array_equal(a.to_vector(), b.to_vector())
        nyq = [0.5 / 0.5, 0.5 / 1.0]
        for d in range(2):
            assert np.all(np.exp(a.log_means[d]) <= nyq[d])
        np.testing.assert_allclose(kernel_diag(a, x[:1]), np.var(y), rtol=1e-12)

    @pytest.mark.parametrize("text, expected", [("eq", ("eq", 0)), ("SM:10", ("sm", 10)), (" sm:1 ", ("sm", 1))])
    def test_parse(self, text, expected):
        assert parse_kernel_spec(text) == expected

    @pytest.mark.parametrize("text", ["rbf", "sm:0", "sm:x"])
    def test_parse_rejects(self, text):
        with pytest.raises(ValueError):
            parse_kernel_spec(text)
