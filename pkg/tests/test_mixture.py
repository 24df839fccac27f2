import math

import numpy as np
import pytest

from bcest import GMM, COV_FLOOR, GaussianComponent, MixtureError, VBConfig, extract_point_gmm, vb_fit
from bcest.mixture import (VBPosterior, component_log_likelihood, gmm_from_components, hard_assign,
                           hard_assign_all, max_mixture_select, vb_free_energy)
from helpers import em_gmm, em_loglik


def two_cluster(seed=0, n=200):
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal(0, 0.1, n // 2), rng.normal(10, 0.1, n // 2)])


class TestLogLikelihood:
    def test_examples(self):
        c = GaussianComponent(1.0, [0.0], [[1.0]])
        assert component_log_likelihood(c, [0.0]) == pytest.approx(-0.918939, abs=1e-6)
        assert component_log_likelihood(c, [1.0]) == pytest.approx(-1.418939, abs=1e-6)
        half = GaussianComponent(0.5, [0.0], [[1.0]])
        assert component_log_likelihood(half, [1.0]) == pytest.approx(-1.418939 - math.log(2), abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(MixtureError):
            component_log_likelihood(GaussianComponent(1.0, [0.0], [[1.0]]), [0.0, 1.0])


class TestMaxMixture:
    def test_single_component(self):
        g = gmm_from_components([1.0], [[0.0]], [[[1.0]]])
        assert all(max_mixture_select(g, [r])[0] == 0 for r in (-50, 0, 3, 1e3))

    def test_nearest_mode(self):
        g = gmm_from_components([0.5, 0.5], [[0.0], [10.0]], [[[1.0]], [[1.0]]])
        assert max_mixture_select(g, [9.0])[0] == 1

    def test_broad_mode_in_tail(self):
        g = gmm_from_components([0.99, 0.01], [[0.0], [0.0]], [[[1.0]], [[100.0]]])
        narrow = math.log(0.99) - 0.5 * math.log(2 * math.pi) - 12.5
        broad = math.log(0.01) - 0.5 * math.log(2 * math.pi) - 0.5 * math.log(100) - 0.125
        assert broad > narrow
        idx, ll = max_mixture_select(g, [5.0])
        assert idx == 1 and ll == pytest.approx(broad)

    def test_tie_goes_low(self):
        g = gmm_from_components([0.5, 0.5], [[0.0], [0.0]], [[[1.0]], [[1.0]]])
        assert max_mixture_select(g, [0.3])[0] == 0


class TestGMM:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(MixtureError):
            GMM([GaussianComponent(0.5, [0.0], [[1.0]])])

    def test_json_roundtrip(self):
        g = gmm_from_components([0.3, 0.7], [[1.0, 2.0], [0.0, 0.0]],
                                [np.diag([2.0, 3.0]), [[1.0, 0.2], [0.2, 1.0]]])
        h = GMM.from_json(g.to_json())
        for a, b in zip(g.components, h.components):
            assert a.weight == b.weight
            assert np.array_equal(a.mean, b.mean) and np.array_equal(a.covariance, b.covariance)


class TestVBFit:
    def test_identical_residuals(self):
        cfg = VBConfig(max_components=1, S0=np.diag([2.0, 3.0]), nu0=4.0, kappa0=0.01)
        R = np.zeros((30, 2))
        post, _ = vb_fit(R, cfg)
        np.testing.assert_allclose(post.m[0], 0.0, atol=1e-15)
        assert post.kappa[0] == pytest.approx(0.01 + 30)
        assert post.nu[0] == pytest.approx(4.0 + 30)
        np.testing.assert_allclose(post.S[0], np.diag([2.0, 3.0]), atol=1e-12)
        g = extract_point_gmm(post)
        np.testing.assert_allclose(g.components[0].covariance, np.diag([2.0, 3.0]) / (4 + 30 - 2 - 1))

    def test_two_clusters_against_em(self):
        x = two_cluster()
        post, _ = vb_fit(x[:, None], VBConfig.for_apriori([[1.0]]))
        g = extract_point_gmm(post)
        assert len(g) == 2
        means = np.sort([c.mean[0] for c in g.components])
        assert abs(means[0]) < 0.1 and abs(means[1] - 10) < 0.1
        np.testing.assert_allclose(np.sort(g.weights), [0.5, 0.5], atol=0.05)
        w, mu, var, resp = em_gmm(x, 2)
        em_labels = np.argmax(resp, 1)
        vb_labels = hard_assign_all(post)
        # match label sets by component mean
        vb_to_em = {k: int(np.argmin(np.abs(mu - post.m[k, 0]))) for k in range(2)}
        agree = np.mean([vb_to_em[v] == e for v, e in zip(vb_labels, em_labels)])
        assert agree >= 0.99

    def test_single_gaussian_is_unimodal(self):
        x = np.random.default_rng(5).normal(0, 1, 500)
        post, _ = vb_fit(x[:, None], VBConfig.for_apriori([[1.0]]))
        g = extract_point_gmm(post)
        assert g.weights.max() > 0.95
        # the EM oracle agrees: BIC prefers one component over two
        bic = []
        for k in (1, 2):
            w, mu, var, _ = em_gmm(x, k)
            bic.append(-2 * em_loglik(x, w, mu, var) + (3 * k - 1) * math.log(len(x)))
        assert bic[0] < bic[1]

    def test_free_energy_beats_forced_single(self):
        x = two_cluster(1)[:, None]
        base = VBConfig.for_apriori([[1.0]])
        post_m, h_m = vb_fit(x, base)
        one = VBConfig.for_apriori([[1.0]], max_components=1)
        post_1, h_1 = vb_fit(x, one)
        assert vb_free_energy(x, post_m, base) >= vb_free_energy(x, post_1, one)

    @pytest.mark.parametrize("seed", range(20))
    def test_free_energy_monotone(self, seed):
        rng = np.random.default_rng(seed)
        d = 1 + seed % 2
        k = 1 + seed % 4
        centers = rng.normal(0, 5, (k, d))
        R = np.vstack([c + rng.normal(0, rng.uniform(0.1, 2), (int(rng.integers(20, 80)), d)) for c in centers])
        post, hist = vb_fit(R, VBConfig.for_apriori(np.eye(d), rng_seed=seed))
        assert np.all(np.diff(hist) >= -1e-8)
        np.testing.assert_allclose(post.responsibilities.sum(1), 1.0, atol=1e-9)
        g = extract_point_gmm(post)
        assert abs(g.weights.sum() - 1) < 1e-9
        assert all(np.linalg.eigvalsh(c.covariance).min() >= COV_FLOOR * (1 - 1e-9) for c in g.components)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        R = np.vstack([rng.normal(0, 1, (60, 2)), rng.normal(6, 0.5, (30, 2))])
        cfg = VBConfig.for_apriori(np.eye(2))
        post, _ = vb_fit(R, cfg)
        perm = rng.permutation(len(R))
        post_p, _ = vb_fit(R[perm], cfg)
        assert vb_free_energy(R[perm], post_p, cfg) == pytest.approx(vb_free_energy(R, post, cfg), abs=1e-9)
        np.testing.assert_allclose(post_p.responsibilities, post.responsibilities[perm], atol=1e-12)

    def test_seeded_bit_stable(self):
        R = np.random.default_rng(4).normal(0, 1, (80, 2))
        a, ha = vb_fit(R, VBConfig.for_apriori(np.eye(2), rng_seed=3))
        b, hb = vb_fit(R, VBConfig.for_apriori(np.eye(2), rng_seed=3))
        assert ha == hb and np.array_equal(a.S, b.S) and np.array_equal(a.responsibilities, b.responsibilities)

    def test_errors(self):
        with pytest.raises(MixtureError):
            vb_fit([[1.0]])
        with pytest.raises(MixtureError, match="index 2"):
            vb_fit([[1.0], [2.0], [np.inf]])
        with pytest.raises(MixtureError):
            vb_fit(np.zeros((5, 1)), VBConfig(nu0=-1.0))


class TestExtract:
    def _post(self, alpha, nu):
        k = len(alpha)
        return VBPosterior(np.array(alpha, float), np.full(k, 1.0), np.zeros((k, 1)), np.array(nu, float),
                           np.ones((k, 1, 1)), np.full((3, k), 1.0 / k), np.zeros((3, k)))

    def test_alpha_normalization(self):
        g = extract_point_gmm(self._post([101.0, 1.0], [50.0, 50.0]))
        np.testing.assert_allclose(g.weights, [101 / 102, 1 / 102])

    def test_small_nu_rejected(self):
        with pytest.raises(MixtureError):
            extract_point_gmm(self._post([1.0], [2.0]))

    def test_covariance_floor(self):
        post = self._post([1.0], [10.0])
        post.S[:] = 1e-20
        assert extract_point_gmm(post).components[0].covariance[0, 0] >= COV_FLOOR * (1 - 1e-12)


class TestHardAssign:
    def test_at_component_mean(self):
        g = gmm_from_components([0.5, 0.5], [[0.0], [10.0]], [[[0.01]], [[0.01]]])
        assert hard_assign(g, [10.0]) == 1 and hard_assign(g, [0.0]) == 0

    def test_tie(self):
        g = gmm_from_components([0.5, 0.5], [[-1.0], [1.0]], [[[1.0]], [[1.0]]])
        assert hard_assign(g, [0.0]) == 0

    def test_two_cluster_new_point(self):
        post, _ = vb_fit(two_cluster()[:, None], VBConfig.for_apriori([[1.0]]))
        k = hard_assign(post, [9.8])
        assert abs(post.m[k, 0] - 10) < 0.1
        assert hard_assign(post, index=0) == hard_assign_all(post)[0]
