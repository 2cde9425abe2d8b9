import numpy as np
import pytest
from scipy import stats

from tailfree.errors import NonFiniteDensity
from tailfree.kernels import KernelConfig, gram_matrix
from tailfree.model import (Dataset, LatentState, LogNormalParams, PriorConfig,
                            ensemble_mean, joint_log_density)
from tailfree.tree import ModelTree, NodeGPValues, TemperatureSet, \
    softmax_conditional


def _flat2_state(g_a, g_b, residual, lam=1.0, noise_sd=0.3):
    tree = ModelTree.flat(["a", "b"])
    return LatentState(tree=tree,
                       node_gps=NodeGPValues({"a": np.asarray(g_a, float),
                                              "b": np.asarray(g_b, float)}),
                       residual=np.asarray(residual, float),
                       temps=TemperatureSet({"root": lam}),
                       noise_sd=noise_sd)


class TestEnsembleMean:
    def test_single_model_gets_weight_one(self):
        tree = ModelTree.flat(["only"])
        ds = Dataset(features=np.array([0.5]), targets=np.array([1.0]),
                     base_predictions=np.array([[2.0]]), base_names=("only",))
        state = LatentState(tree=tree, node_gps=NodeGPValues({}),
                            residual=np.array([0.25]),
                            temps=TemperatureSet({}), noise_sd=1.0)
        assert ensemble_mean(ds, state, 0) == pytest.approx(2.25)

    def test_even_weights(self):
        ds = Dataset(features=np.array([0.0]), targets=np.array([0.0]),
                     base_predictions=np.array([[1.0, 3.0]]), base_names=("a", "b"))
        state = _flat2_state([0.0], [0.0], [0.0])
        assert ensemble_mean(ds, state, 0) == pytest.approx(2.0, rel=1e-12)

    def test_softmax_weights_plus_residual(self):
        ds = Dataset(features=np.array([0.0]), targets=np.array([0.0]),
                     base_predictions=np.array([[1.0, 3.0]]), base_names=("a", "b"))
        state = _flat2_state([1.0], [0.0], [0.1])
        w = softmax_conditional([1.0, 0.0], 1.0)
        expect = w[0] * 1.0 + w[1] * 3.0 + 0.1
        assert expect == pytest.approx(1.6378828427, rel=1e-9)
        assert ensemble_mean(ds, state, 0) == pytest.approx(expect, rel=1e-12)


class TestJointLogDensity:
    def test_prior_only_when_empty(self):
        ds = Dataset(features=np.zeros((0, 1)), targets=np.zeros(0),
                     base_predictions=np.zeros((0, 2)), base_names=("a", "b"))
        state = _flat2_state(np.zeros(0), np.zeros(0), np.zeros(0),
                             lam=0.8, noise_sd=0.2)
        priors = PriorConfig()
        got = joint_log_density(ds, state, priors)
        expect = (priors.temp_prior.log_pdf(0.8) + priors.noise_prior.log_pdf(0.2))
        assert got == pytest.approx(float(expect), rel=1e-12)

    def test_zero_residual_likelihood_term(self):
        # f(x) = y and sigma = 1 make the likelihood term exactly -0.5 log(2 pi)
        ds = Dataset(features=np.array([0.4]), targets=np.array([2.0]),
                     base_predictions=np.array([[1.0, 3.0]]), base_names=("a", "b"))
        state = _flat2_state([0.0], [0.0], [0.0], noise_sd=1.0)
        priors = PriorConfig()
        with_data = joint_log_density(ds, state, priors)
        empty = Dataset(features=np.zeros((0, 1)), targets=np.zeros(0),
                        base_predictions=np.zeros((0, 2)), base_names=("a", "b"))
        state0 = _flat2_state(np.zeros(0), np.zeros(0), np.zeros(0), noise_sd=1.0)
        prior_part = joint_log_density(empty, state0, priors)
        # remaining GP terms at a single point with amplitude + jitter
        kb = priors.weight_kernel
        var_w = kb.amplitude + kb.jitter
        kr = priors.residual_kernel
        var_r = kr.amplitude + kr.jitter
        gp_terms = 2 * stats.norm.logpdf(0.0, scale=np.sqrt(var_w)) + \
            stats.norm.logpdf(0.0, scale=np.sqrt(var_r))
        likelihood = with_data - prior_part - gp_terms
        assert likelihood == pytest.approx(-0.5 * np.log(2 * np.pi), rel=1e-9)

    def test_matches_term_by_term_oracle(self):
        rng = np.random.default_rng(21)
        n = 3
        x = rng.uniform(0, 1, n)
        P = rng.standard_normal((n, 2))
        y = rng.standard_normal(n)
        ds = Dataset(features=x, targets=y, base_predictions=P, base_names=("a", "b"))
        g_a = rng.standard_normal(n)
        g_b = rng.standard_normal(n)
        eps = 0.1 * rng.standard_normal(n)
        lam, sigma = 0.7, 0.25
        state = _flat2_state(g_a, g_b, eps, lam=lam, noise_sd=sigma)
        priors = PriorConfig(weight_kernel=KernelConfig(0.3, 1.2, jitter=1e-8),
                             residual_kernel=KernelConfig(0.5, 0.8, jitter=1e-8),
                             temp_prior=LogNormalParams(0.0, 1.0),
                             noise_prior=LogNormalParams(-2.0, 1.0))
        got = joint_log_density(ds, state, priors)

        # independent term-by-term computation via scipy.stats
        W = softmax_conditional(np.stack([g_a, g_b], axis=-1), lam)
        f = (P * W).sum(axis=1) + eps
        oracle = stats.norm.logpdf(y, loc=f, scale=sigma).sum()
        Kw = gram_matrix(x, priors.weight_kernel)
        Kr = gram_matrix(x, priors.residual_kernel)
        oracle += stats.multivariate_normal.logpdf(g_a, mean=np.zeros(n), cov=Kw)
        oracle += stats.multivariate_normal.logpdf(g_b, mean=np.zeros(n), cov=Kw)
        oracle += stats.multivariate_normal.logpdf(eps, mean=np.zeros(n), cov=Kr)
        oracle += stats.lognorm.logpdf(lam, s=1.0, scale=np.exp(0.0))
        oracle += stats.lognorm.logpdf(sigma, s=1.0, scale=np.exp(-2.0))
        assert got == pytest.approx(float(oracle), abs=1e-10)

    def test_non_finite_raises(self):
        ds = Dataset(features=np.array([0.4]), targets=np.array([2.0]),
                     base_predictions=np.array([[1.0, 3.0]]), base_names=("a", "b"))
        state = _flat2_state([0.0], [0.0], [1e200], noise_sd=1e-3)
        with pytest.raises(NonFiniteDensity):
            joint_log_density(ds, state, PriorConfig())


class TestDataset:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Dataset(features=np.array([np.nan]), targets=np.array([1.0]),
                    base_predictions=np.array([[1.0]]))

    def test_rejects_row_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(features=np.array([1.0, 2.0]), targets=np.array([1.0]),
                    base_predictions=np.array([[1.0], [2.0]]))

    def test_default_names(self):
        ds = Dataset(features=np.array([1.0]), targets=None,
                     base_predictions=np.array([[1.0, 2.0]]))
        assert ds.base_names == ("m0", "m1")

    def test_lognormal_params_match_scipy(self):
        p = LogNormalParams(-1.0, 0.7)
        xs = np.array([0.1, 0.5, 2.0])
        np.testing.assert_allclose(p.log_pdf(xs),
                                   stats.lognorm.logpdf(xs, s=0.7, scale=np.exp(-1.0)),
                                   rtol=1e-12)
