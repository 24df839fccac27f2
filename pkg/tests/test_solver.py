import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcest import Factor, FactorGraph, GaussianNoise, SolverConfig, SolverError, lm_solve
from bcest.solver import linearize
from helpers import X, scalar_graph, unary


class TestLinearize:
    def test_whitened_row(self):
        g = scalar_graph([1.0], [2.0])
        J, z = linearize(g, dense=True)
        assert J[0, 0] == pytest.approx(-0.5) and z[0] == pytest.approx(0.5)

    def test_weight_scales_by_sqrt(self):
        g = scalar_graph([1.0], [2.0])
        J, z = linearize(g, weights=[0.25], dense=True)
        assert J[0, 0] == pytest.approx(-0.25) and z[0] == pytest.approx(0.25)

    def test_finite_difference_square(self):
        g = FactorGraph().add_state_block(X, [3.0])
        g.add_factor(Factor((X,), lambda v: np.array([v[0][0] ** 2]), GaussianNoise.isotropic(1.0)))
        J, _ = linearize(g, config=SolverConfig(jacobian_mode="central_difference"), dense=True)
        assert J[0, 0] == pytest.approx(6.0, abs=1e-4)

    def test_nonfinite_names_factor(self):
        g = scalar_graph([1.0, 2.0])
        g.add_factor(Factor((X,), lambda v: np.array([np.nan]), GaussianNoise.isotropic(1.0)))
        with pytest.raises(SolverError, match="factor 2"):
            linearize(g)

    def test_weights_must_cover_factors(self):
        with pytest.raises(ValueError):
            linearize(scalar_graph([1.0, 2.0]), weights=[1.0])


class TestLMSolve:
    def test_single_prior(self):
        g = scalar_graph([5.0])
        _, rep = lm_solve(g)
        assert g.value(X)[0] == pytest.approx(5.0, abs=1e-8) and rep.final_error < 1e-12

    def test_two_equal_priors(self):
        g = scalar_graph([0.0, 4.0])
        lm_solve(g)
        assert g.value(X)[0] == pytest.approx(2.0, abs=1e-8)

    def test_weighted_priors_closed_form(self):
        # (0 * 4 + 4 * 1) / (4 + 1)
        g = scalar_graph([0.0, 4.0], [1.0, 2.0])
        lm_solve(g)
        assert g.value(X)[0] == pytest.approx(0.8, abs=1e-8)

    def test_empty_graph(self):
        with pytest.raises(ValueError):
            lm_solve(FactorGraph())

    def test_history_monotone_nonlinear(self):
        g = FactorGraph().add_state_block(X, [10.0])
        for y in (4.0, 9.0, 16.0):
            g.add_factor(Factor((X,), lambda v, y=y: np.array([y - v[0][0] ** 2]),
                                GaussianNoise.isotropic(1.0), jacobian_fn=lambda v: [np.array([[-2 * v[0][0]]])]))
        _, rep = lm_solve(g)
        h = np.array(rep.error_history)
        assert np.all(np.diff(h) <= 0) and rep.final_error <= rep.initial_error
        assert rep.converged


def _linear_problem(rng, n_obs, dim):
    A = rng.normal(size=(n_obs, dim))
    y = rng.normal(size=n_obs) * 3
    s = rng.uniform(0.2, 3.0, n_obs)
    return A, y, s


def _linear_graph(A, y, s, order):
    from bcest import StateBlockKey, StateKind
    keys = [StateBlockKey(i, StateKind.SCALAR) for i in range(A.shape[1])]
    g = FactorGraph()
    for k in keys:
        g.add_state_block(k, [0.0])
    for i in order:
        a = A[i]
        g.add_factor(Factor(tuple(keys), lambda v, a=a, yi=y[i]: np.array([yi - sum(c * b[0] for c, b in zip(a, v))]),
                            GaussianNoise.isotropic(s[i]), jacobian_fn=lambda v, a=a: [np.array([[-c]]) for c in a]))
    return g, keys


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), dim=st.integers(1, 5))
def test_linear_closed_form_and_permutation(seed, dim):
    rng = np.random.default_rng(seed)
    A, y, s = _linear_problem(rng, dim + 6, dim)
    W = np.diag(1 / s ** 2)
    ref = np.linalg.solve(A.T @ W @ A, A.T @ W @ y)
    g, keys = _linear_graph(A, y, s, range(len(y)))
    # each damped step leaves roughly lambda * cond of the error behind, so
    # the stopping tolerances must sit below the default ones
    tight = SolverConfig(max_iterations=3, abs_error_tol=1e-15, rel_error_tol=1e-15)
    lm_solve(g, tight)
    sol = np.array([g.value(k)[0] for k in keys])
    np.testing.assert_allclose(sol, ref, atol=1e-8, rtol=1e-8)
    g2, _ = _linear_graph(A, y, s, rng.permutation(len(y)))
    lm_solve(g2, tight)
    np.testing.assert_allclose(np.array([g2.value(k)[0] for k in keys]), sol, atol=1e-8)


def test_sparse_and_dense_paths_agree():
    rng = np.random.default_rng(3)
    A, y, s = _linear_problem(rng, 12, 4)
    g1, keys = _linear_graph(A, y, s, range(12))
    g2 = g1.copy()
    lm_solve(g1, SolverConfig(linear_solver="dense"))
    lm_solve(g2, SolverConfig(linear_solver="sparse"))
    np.testing.assert_allclose(g1.state_vector, g2.state_vector, atol=1e-10)


def test_weights_act_as_covariance_scaling():
    g1 = scalar_graph([0.0, 4.0], [1.0, 1.0])
    lm_solve(g1, weights=np.array([1.0, 0.25]))
    g2 = scalar_graph([0.0, 4.0], [1.0, 2.0])
    lm_solve(g2)
    assert g1.value(X)[0] == pytest.approx(g2.value(X)[0], abs=1e-10)
