import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import logsumexp

from blockfilter.hmm_core import (
    ErgodicityError,
    FilterError,
    HmmModel,
    MixingInputs,
    ModelError,
    benchmark_model,
    choose_k,
    emission_ratio_bound,
    forward_filter,
    loglik,
    max_subsets_advisory,
    mixing_coefficient,
    one_block_conditional_loglik,
    pack_params,
    param_names,
    simulate,
    stationary_distribution,
    unpack_params,
)

from _oracles import enum_joint_last, enum_loglik, random_model


class TestModel:
    def test_rejects_non_stochastic_Q(self):
        with pytest.raises(ModelError, match="transition matrix"):
            HmmModel(Q=[[0.5, 0.4], [0.5, 0.5]], r=[0.5, 0.5], mu=[0, 1], sigma2=[1, 1])

    def test_rejects_bad_variance_and_shape(self):
        with pytest.raises(ModelError):
            HmmModel(Q=np.eye(2), r=[0.5, 0.5], mu=[0, 1], sigma2=[1, 0])
        with pytest.raises(ModelError, match="shape"):
            HmmModel(Q=np.eye(2), r=[1.0], mu=[0, 1], sigma2=[1, 1])

    def test_arrays_read_only(self):
        m = benchmark_model()
        with pytest.raises(ValueError):
            m.mu[0] = 5.0

    def test_pack_roundtrip(self):
        m = benchmark_model()
        theta = m.pack()
        assert theta.shape == (18,)
        assert param_names(3)[:4] == ["mu1", "mu2", "mu3", "sigma2_1"]
        back = HmmModel.unpack(theta, 3)
        np.testing.assert_array_equal(back.Q, m.Q)
        np.testing.assert_array_equal(back.r, m.r)

    def test_unpack_batch(self):
        m = benchmark_model()
        mu, sigma2, Q, r = unpack_params(np.vstack([m.pack(), m.pack()]), 3)
        assert Q.shape == (2, 3, 3) and r.shape == (2, 3)
        np.testing.assert_array_equal(pack_params(mu[1], sigma2[1], Q[1], r[1]), m.pack())

    def test_permuted_preserves_likelihood(self):
        rng = np.random.default_rng(3)
        m = HmmModel(*random_model(rng, 3))
        y = rng.normal(size=20)
        assert loglik(m.permuted([2, 0, 1]), y) == pytest.approx(loglik(m, y), abs=1e-10)

    def test_dict_roundtrip(self):
        m = benchmark_model()
        back = HmmModel.from_dict(m.to_dict())
        np.testing.assert_array_equal(back.pack(), m.pack())


class TestSimulate:
    def test_single_state(self):
        m = HmmModel(Q=[[1.0]], r=[1.0], mu=[0.0], sigma2=[1.0])
        x, y = simulate(m, 3, seed=1)
        np.testing.assert_array_equal(x, [0, 0, 0])
        _, y_big = simulate(m, 5000, seed=2)
        assert stats.kstest(y_big, "norm").pvalue > 0.001

    def test_state_frequencies(self):
        x, _ = simulate(benchmark_model(), 100_000, seed=11)
        freq = np.bincount(x, minlength=3) / x.size
        np.testing.assert_allclose(freq, [0.2, 0.6, 0.2], atol=0.02)

    def test_deterministic(self):
        a = simulate(benchmark_model(), 500, seed=5)
        b = simulate(benchmark_model(), 500, seed=5)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


class TestStationary:
    def test_benchmark(self):
        np.testing.assert_allclose(stationary_distribution(benchmark_model().Q), [0.2, 0.6, 0.2], atol=1e-12)

    @pytest.mark.parametrize("S", [2, 3, 5])
    def test_doubly_stochastic_is_uniform(self, S):
        rng = np.random.default_rng(S)
        # convex combination of permutation matrices
        Q = sum(w * np.eye(S)[rng.permutation(S)] for w in rng.dirichlet(np.ones(4)))
        Q = 0.5 * Q + 0.5 / S
        np.testing.assert_allclose(stationary_distribution(Q), np.full(S, 1 / S), atol=1e-12)

    def test_power_iteration_oracle(self):
        rng = np.random.default_rng(42)
        Q = rng.dirichlet(np.ones(4), size=4)
        oracle = np.linalg.matrix_power(Q, 1000)[0]
        np.testing.assert_allclose(stationary_distribution(Q), oracle, atol=1e-10)

    def test_reducible_raises(self):
        with pytest.raises(ErgodicityError, match="ergodic"):
            stationary_distribution(np.eye(2))
        with pytest.raises(ErgodicityError):
            stationary_distribution([[0.0, 1.0], [1.0, 0.0]])  # periodic


class TestForwardFilter:
    def test_single_observation(self):
        m = benchmark_model()
        y = 0.7
        expected = math.log(sum(m.r[a] * stats.norm.pdf(y, m.mu[a], math.sqrt(m.sigma2[a])) for a in range(3)))
        assert loglik(m, [y]) == pytest.approx(expected, abs=1e-12)

    def test_single_state(self):
        m = HmmModel(Q=[[1.0]], r=[1.0], mu=[0.3], sigma2=[2.0])
        y = np.random.default_rng(0).normal(size=50)
        assert loglik(m, y) == pytest.approx(stats.norm.logpdf(y, 0.3, math.sqrt(2.0)).sum(), abs=1e-10)

    @pytest.mark.parametrize("S,n", [(1, 5), (2, 1), (2, 6), (2, 8), (3, 4), (3, 7)])
    def test_matches_enumeration(self, S, n):
        rng = np.random.default_rng(100 * S + n)
        for _ in range(3):
            Q, r, mu, sigma2 = random_model(rng, S)
            y = rng.normal(scale=2.0, size=n)
            got = loglik(HmmModel(Q=Q, r=r, mu=mu, sigma2=sigma2), y)
            assert got == pytest.approx(enum_loglik(Q, r, mu, sigma2, y), abs=1e-10)

    def test_filter_is_enumerated_posterior_of_last_state(self):
        rng = np.random.default_rng(8)
        Q, r, mu, sigma2 = random_model(rng, 3)
        y = rng.normal(size=5)
        res = forward_filter(HmmModel(Q=Q, r=r, mu=mu, sigma2=sigma2), y)
        lj = enum_joint_last(Q, r, mu, sigma2, y)
        np.testing.assert_allclose(res.filtered[-1], np.exp(lj - logsumexp(lj)), atol=1e-12)
        np.testing.assert_allclose(res.next_prediction, np.exp(lj - logsumexp(lj)) @ Q, atol=1e-12)
        np.testing.assert_array_equal(res[0].probs, r)
        assert res.cumulative[-1] == res.loglik

    def test_far_observations_stay_finite(self):
        m = benchmark_model()
        y = np.array([0.0, 40.0, -60.0, 1e3, 0.5, 1e6, -1e6, 2.0])
        res = forward_filter(m, y)
        assert np.isfinite(res.loglik)
        assert np.all(np.isfinite(res.filtered))
        np.testing.assert_allclose(res.filtered.sum(axis=1), 1.0)

    def test_all_zero_emission_reports_index(self):
        m = benchmark_model()
        with pytest.raises(FilterError) as info:
            forward_filter(m, [0.0, 0.1, np.inf, 0.0])
        assert info.value.t == 2
        assert "time index 2" in str(info.value)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            forward_filter(benchmark_model(), [])


class TestOneBlock:
    def test_empty_prev_is_plain_loglik(self):
        m = benchmark_model()
        y = np.array([0.1, -1.9, 2.2])
        assert one_block_conditional_loglik(m, y) == forward_filter(m, y, m.r).loglik

    def test_matches_enumeration(self):
        rng = np.random.default_rng(21)
        Q, r, mu, sigma2 = random_model(rng, 2)
        prev, blk = rng.normal(size=4), rng.normal(size=4)
        expected = enum_loglik(Q, r, mu, sigma2, np.r_[prev, blk]) - enum_loglik(Q, r, mu, sigma2, prev)
        got = one_block_conditional_loglik(HmmModel(Q=Q, r=r, mu=mu, sigma2=sigma2), blk, prev)
        assert got == pytest.approx(expected, abs=1e-10)

    def test_long_context_forgets_history(self):
        m = benchmark_model()
        _, y = simulate(m, 3000, seed=4)
        blk = y[-100:]
        full = loglik(m, y) - loglik(m, y[:-100])
        assert abs(one_block_conditional_loglik(m, blk, y[-600:-100]) - full) < 1e-6


class TestMixing:
    def test_single_state(self):
        assert mixing_coefficient(MixingInputs(1, 0.5, 3.0)) == pytest.approx(math.exp(-2))

    def test_arithmetic(self):
        assert mixing_coefficient(MixingInputs(3, 0.1, 10.0)) == pytest.approx(math.exp(-2 / 2001), rel=1e-14)
        assert mixing_coefficient(MixingInputs(3, 0.1, 10.0)) == pytest.approx(0.999001, abs=1e-6)

    def test_monotone_in_M(self):
        rhos = [mixing_coefficient(MixingInputs(3, 0.1, M)) for M in (1.0, 10.0, 1e3, 1e6)]
        assert all(a < b < 1 for a, b in zip(rhos, rhos[1:]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 6), st.floats(0.01, 0.5), st.floats(1.0, 1e4))
    def test_monotone_in_S_eps(self, S, eps, M):
        rho = mixing_coefficient(MixingInputs(S, eps, M))
        assert mixing_coefficient(MixingInputs(S + 1, eps, M)) > rho
        assert mixing_coefficient(MixingInputs(S, eps * 1.5, M)) < rho
        assert mixing_coefficient(MixingInputs(S, eps, M * 2.0)) > rho

    def test_invalid_epsilon(self):
        with pytest.raises(ValueError):
            MixingInputs(3, 0.0, 10.0)

    def test_from_model(self):
        m = benchmark_model()
        inp = MixingInputs.from_model(m, y=[0.0, 2.0])
        assert inp.epsilon == pytest.approx(0.1)
        assert inp.M == pytest.approx(emission_ratio_bound(m, [0.0, 2.0]))
        assert emission_ratio_bound(m, [100.0]) == 1e6  # clipped


class TestAdvisory:
    def test_log_n(self):
        adv = max_subsets_advisory(10_000, 0.5, "log_n")
        assert (adv.K, adv.m, adv.warning) == (10, 1000, None)

    def test_cube_root_exact_power(self):
        assert choose_k(10**6, "n_third") == 100
        adv = max_subsets_advisory(10**6, 0.5, "n_third")
        assert (adv.K, adv.m) == (100, 10_000)
        assert choose_k(10**4, "n_quarter") == 10

    def test_warns_when_blocks_too_short(self):
        with pytest.warns(RuntimeWarning, match="K=5"):
            adv = max_subsets_advisory(100, 0.9999, "n_third")
        assert (adv.K, adv.m) == (5, 20)
        assert adv.warning is not None

    def test_unknown_policy(self):
        with pytest.raises(ValueError, match="policy"):
            choose_k(100, "sqrt")


class TestForgetting:
    def test_filters_from_distinct_starts_merge_geometrically(self):
        m = benchmark_model()
        _, y = simulate(m, 200, seed=9)
        a = forward_filter(m, y, [1.0, 0.0, 0.0]).filtered
        b = forward_filter(m, y, [0.0, 0.0, 1.0]).filtered
        tv = 0.5 * np.abs(a - b).sum(axis=1)
        assert tv[-1] < 1e-6
        keep = tv > 1e-15
        slope = np.polyfit(np.arange(200)[keep], np.log(tv[keep]), 1)[0]
        assert slope < 0
