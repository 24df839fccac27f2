import numpy as np
import pytest

from bcest import (COV_FLOOR, BCEConfig, FactorGraph, GraphError,
                   StateBlockKey, StateKind, VBConfig, bce_solve, lm_solve,
                   update_noise_from_gmm, vb_fit)
from bcest.bce import centered_on_dominant, group_residuals
from bcest.mixture import extract_point_gmm, gmm_from_components
from helpers import X, em_gmm, scalar_graph, unary

APRIORI = np.diag([2.5 ** 2, 0.025 ** 2])


def paired_graph(n_states=30, per_state=10, seed=0, sig=(2.5, 0.025), prior=True):
    """Scalar states each seen by ``per_state`` (range-like, phase-like) factor pairs."""
    rng = np.random.default_rng(seed)
    truth = rng.normal(0, 10, n_states)
    g = FactorGraph()
    for k in range(n_states):
        key = StateBlockKey("s", StateKind.SCALAR, k)
        g.add_state_block(key, [0.0])
        for j in range(per_state):
            for s in sig:
                g.add_factor(unary(truth[k] + s * rng.standard_normal(), s, (k, j), key))
    if prior:
        anchor = StateBlockKey("s", StateKind.SCALAR, 0)
        g.add_factor(unary(truth[0], 100.0, None, anchor))
    return g, truth


def toy_1d(seed=0, truth=3.0):
    rng = np.random.default_rng(seed)
    y = np.concatenate([truth + rng.normal(0, 1, 40), truth + 20 + rng.normal(0, 1, 10)])
    return scalar_graph(y, grouped=True), y


def test_toy_bce_removes_bias():
    g, y = toy_1d()
    l2 = g.copy()
    lm_solve(l2)
    assert l2.value(X)[0] - 3.0 == pytest.approx(10 * 20 / 50, abs=0.5)
    bce_solve(g, BCEConfig(vb=VBConfig.for_apriori([[1.0]])))
    est = g.value(X)[0]
    assert abs(est - 3.0) < 0.5
    # oracle: two-component EM on the L2 residuals, means taken relative to
    # the dominant component, then weighted least squares
    w, mu, var, resp = em_gmm(y - l2.value(X)[0], 2)
    lab = np.argmax(resp, 1)
    mu_rel = mu - mu[np.argmax(w)]
    oracle = np.sum((y - mu_rel[lab]) / var[lab]) / np.sum(1 / var[lab])
    assert est == pytest.approx(oracle, abs=0.05)


def test_single_iteration_is_solve_plus_fit():
    g, _ = paired_graph(10, 5)
    ref = g.copy()
    lm_solve(ref)
    cfg = BCEConfig(max_outer_iterations=1, vb=VBConfig.for_apriori(APRIORI))
    values, gmm, rep = bce_solve(g, cfg)
    assert rep.outer_iterations == 1 and len(rep.history) == 1
    assert np.array_equal(g.state_vector, ref.state_vector)
    assert [f.noise for f in g.factors] == [f.noise for f in ref.factors]
    _, R = group_residuals(ref)
    post, _ = vb_fit(R, cfg.vb)
    assert gmm.to_json() == extract_point_gmm(post).to_json()


def test_clean_data_converges_and_recovers_model():
    g, _ = paired_graph()
    values, gmm, rep = bce_solve(g, BCEConfig(vb=VBConfig.for_apriori(APRIORI)))
    assert rep.converged and rep.outer_iterations <= 3
    dom = gmm.components[gmm.dominant()]
    assert dom.weight >= 0.8
    ratio = np.diag(dom.covariance) / np.diag(APRIORI)
    assert np.all((ratio > 0.5) & (ratio < 2.0))


def test_ungrouped_noise_untouched_and_deterministic():
    g, _ = paired_graph(8, 6, seed=2)
    h = g.copy()
    prior_noise = g.factors[-1].noise
    cfg = BCEConfig(vb=VBConfig.for_apriori(APRIORI))
    _, gmm1, rep1 = bce_solve(g, cfg)
    _, gmm2, rep2 = bce_solve(h, cfg)
    assert g.factors[-1].noise is prior_noise
    assert np.array_equal(g.state_vector, h.state_vector)
    assert gmm1.to_json() == gmm2.to_json()
    assert [it.total_error for it in rep1.history] == [it.total_error for it in rep2.history]


def test_outer_iteration_bound():
    g, _ = toy_1d(1)
    _, _, rep = bce_solve(g, BCEConfig(max_outer_iterations=2, outer_error_rel_tol=1e-15,
                                       vb=VBConfig.for_apriori([[1.0]])))
    assert rep.outer_iterations <= 2 and len(rep.history) == rep.outer_iterations


def test_needs_grouped_factors():
    with pytest.raises(GraphError):
        bce_solve(scalar_graph([1.0, 2.0]))


class TestUpdateNoise:
    def _pair(self):
        g = FactorGraph().add_state_block(X, [0.0])
        g.add_factor(unary(1.0, 2.5, "g"))
        g.add_factor(unary(1.0, 0.025, "g"))
        return g

    def test_component_statistics(self):
        g = self._pair()
        gmm = gmm_from_components([1.0], [[1.2, 0.002]], [np.diag([1.7 ** 2, 0.0017 ** 2])])
        update_noise_from_gmm(g, gmm, {"g": 0})
        assert g.factors[0].noise.mean[0] == 1.2 and g.factors[0].noise.covariance[0, 0] == pytest.approx(1.7 ** 2)
        assert g.factors[1].noise.mean[0] == 0.002
        assert g.factors[1].noise.covariance[0, 0] == pytest.approx(0.0017 ** 2)

    def test_identity_rewrite(self):
        g = self._pair()
        before = g.total_weighted_error()
        update_noise_from_gmm(g, gmm_from_components([1.0], [[0.0, 0.0]], [APRIORI]), {"g": 0})
        assert g.total_weighted_error() == pytest.approx(before, rel=1e-12)

    def test_floor_propagates(self):
        g = self._pair()
        update_noise_from_gmm(g, gmm_from_components([1.0], [[0.0, 0.0]], [np.diag([COV_FLOOR, COV_FLOOR])]),
                              {"g": 0})
        assert all(f.noise.covariance[0, 0] >= COV_FLOOR * (1 - 1e-12) for f in g.factors)

    def test_missing_assignment(self):
        with pytest.raises(GraphError):
            update_noise_from_gmm(self._pair(), gmm_from_components([1.0], [[0.0, 0.0]], [APRIORI]), {})

    def test_dimension_mismatch(self):
        with pytest.raises(GraphError):
            update_noise_from_gmm(self._pair(), gmm_from_components([1.0], [[0.0]], [[[1.0]]]), {"g": 0})


def test_centering_keeps_covariances():
    gmm = gmm_from_components([0.7, 0.3], [[-4.0], [16.0]], [[[1.0]], [[2.0]]])
    c = centered_on_dominant(gmm)
    assert c.components[0].mean[0] == 0.0 and c.components[1].mean[0] == 20.0
    assert c.components[1].covariance[0, 0] == 2.0 and np.array_equal(c.weights, gmm.weights)
