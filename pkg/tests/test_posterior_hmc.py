import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from varsel_engine.errors import ConfigError, SamplerFailure
from varsel_engine.net_core import Dataset, NetworkArch, NetworkWeights
from varsel_engine.posterior_hmc import (
    DualAveragingState,
    HamiltonianSampler,
    HmcConfig,
    NetworkPosterior,
    OutputLayerPosterior,
    PosteriorChain,
    PriorSpec,
    adapt_step,
    hmc_sample,
    leapfrog,
    log_posterior_and_grad,
    posterior_mean_prediction,
    sample_chains,
)

from conftest import random_inputs


def gaussian_target(mean, precision):
    def log_prob(theta):
        d = theta - mean
        return -0.5 * float(d @ precision @ d), -precision @ d
    return log_prob


class TestLogPosterior:
    def test_zero_network_zero_data(self):
        arch = NetworkArch(2, 3, 2)
        data = Dataset(X=random_inputs(4, 2), y=np.zeros(4), noise_sd=1.0)
        value, grad = log_posterior_and_grad(NetworkWeights.zeros(arch), data, PriorSpec())
        assert value == 0.0
        assert not grad.any()

    def test_single_unit_by_hand(self):
        weights = NetworkWeights(W1=[[1.0]], beta=[2.0], b0=0.5)
        data = Dataset(X=[[0.5]], y=[1.0], noise_sd=1.0)
        value, grad = log_posterior_and_grad(weights, data, PriorSpec(weight_sd=1.0))
        assert value == pytest.approx(-2.75, abs=1e-12)
        assert_allclose(grad, [-1.5, -2.25, -1.0], atol=1e-12)

    def test_gradient_matches_finite_differences(self, small_net, small_data):
        target = NetworkPosterior(small_net.arch, small_data, PriorSpec())
        theta = small_net.flatten()
        _, grad = target(theta)
        h = 1e-6
        for j in range(theta.size):
            e = np.zeros_like(theta)
            e[j] = h
            fd = (target(theta + e)[0] - target(theta - e)[0]) / (2 * h)
            assert grad[j] == pytest.approx(fd, rel=1e-5, abs=1e-5)

    def test_prior_only(self, small_net):
        value, grad = log_posterior_and_grad(small_net, None, PriorSpec(weight_sd=2.0))
        theta = small_net.flatten()
        assert value == pytest.approx(-0.5 * theta @ theta / 4.0)
        assert_allclose(grad, -theta / 4.0)

    def test_zero_noise_rejected(self, small_net):
        data = Dataset(X=random_inputs(3, 3), y=np.zeros(3), noise_sd=0.0)
        with pytest.raises(ConfigError):
            NetworkPosterior(small_net.arch, data, PriorSpec())


class TestLeapfrog:
    def test_zero_steps_is_identity(self):
        q, p = leapfrog(np.array([1.0, 2.0]), np.array([0.5, -0.5]), 0.1, 0, lambda q: -q)
        assert q.tolist() == [1.0, 2.0]
        assert p.tolist() == [0.5, -0.5]

    def test_reversible(self):
        grad = lambda q: -q
        q0, p0 = np.array([0.3, -1.2]), np.array([0.8, 0.1])
        q1, p1 = leapfrog(q0, p0, 0.1, 25, grad)
        q2, p2 = leapfrog(q1, -p1, 0.1, 25, grad)
        assert_allclose(q2, q0, atol=1e-12)
        assert_allclose(-p2, p0, atol=1e-12)

    def test_energy_error_shrinks_with_step(self):
        grad = lambda q: -q
        energy = lambda q, p: 0.5 * (q @ q + p @ p)
        q0, p0 = np.array([1.0]), np.array([0.0])
        errors = []
        for step in (0.2, 0.1, 0.05):
            q, p = leapfrog(q0, p0, step, int(round(1.0 / step)), grad)
            errors.append(abs(energy(q, p) - energy(q0, p0)))
        assert errors[0] > errors[1] > errors[2]

    def test_non_finite_trajectory(self):
        q, p = leapfrog(np.array([1.0]), np.array([1.0]), 0.1, 5, lambda q: np.array([np.inf]))
        assert not np.all(np.isfinite(p))


class TestDualAveraging:
    def test_fixed_point_at_target(self):
        state = DualAveragingState.start(0.01, 0.75)
        steps = []
        for _ in range(500):
            state, step = adapt_step(state, 0.75)
            steps.append(step)
        assert abs(steps[-1] - steps[-2]) / steps[-2] < 1e-3

    @pytest.mark.parametrize("accept, direction", [(0.0, -1), (1.0, 1)])
    def test_monotone(self, accept, direction):
        state = DualAveragingState.start(0.01, 0.75)
        steps = []
        for _ in range(50):
            state, step = adapt_step(state, accept)
            steps.append(step)
        assert np.all(direction * np.diff(steps) > 0)

    def test_invalid_probability(self):
        with pytest.raises(ConfigError):
            adapt_step(DualAveragingState.start(0.01, 0.75), 1.5)


class TestSampler:
    def test_gaussian_moments(self):
        """共轭高斯后验：β | y ~ N(μ, Σ)"""
        X = random_inputs(50, 2, seed=13)
        beta_true = np.array([1.0, -2.0])
        y = X @ beta_true + 0.3 * np.random.default_rng(0).standard_normal(50)
        precision = X.T @ X / 0.3 ** 2 + np.eye(2)
        mean = np.linalg.solve(precision, X.T @ y / 0.3 ** 2)
        sd = np.sqrt(np.diag(np.linalg.inv(precision)))

        config = HmcConfig(n_draws=2000, warmup=500, leapfrog_steps=10, seed=5)
        result = HamiltonianSampler(gaussian_target(mean, precision), config).run(np.zeros(2))
        assert result.draws.shape == (2000, 2)
        assert_allclose(result.draws.mean(axis=0), mean, atol=0.15 * sd.max())
        assert_allclose(result.draws.std(axis=0), sd, rtol=0.1)
        assert 0.3 < result.accept_rate <= 1.0

    def test_all_divergent_raises(self):
        config = HmcConfig(n_draws=5, warmup=0, init_step=1e6, leapfrog_steps=3)
        sampler = HamiltonianSampler(gaussian_target(np.zeros(2), np.eye(2)), config)
        with pytest.raises(SamplerFailure):
            sampler.run(np.ones(2))

    def test_thinning(self):
        config = HmcConfig(n_draws=7, warmup=5, thin=3, leapfrog_steps=2)
        result = HamiltonianSampler(gaussian_target(np.zeros(1), np.eye(1)), config).run(np.zeros(1))
        assert result.draws.shape == (7, 1)
        assert result.n_iterations == 5 + 21

    def test_default_warmup_is_half(self):
        config = HmcConfig(n_draws=100)
        assert config.n_warmup == 100
        assert config.total_iterations == 200


class TestNetworkChains:
    @pytest.fixture
    def config(self):
        return HmcConfig(n_draws=15, warmup=15, leapfrog_steps=5, seed=42)

    def test_seed_determinism(self, small_data, config):
        arch = NetworkArch(2, 4, 3)
        a = hmc_sample(None, small_data, PriorSpec(), config, arch=arch)
        b = hmc_sample(None, small_data, PriorSpec(), config, arch=arch)
        assert np.array_equal(a.flat_draws(), b.flat_draws())
        assert a.M == 15

    def test_init_required(self, small_data, config):
        with pytest.raises(ConfigError):
            hmc_sample(None, small_data, PriorSpec(), config)

    def test_init_must_match_arch(self, small_net, small_data, config):
        with pytest.raises(ConfigError):
            hmc_sample(small_net, small_data, PriorSpec(), config, arch=NetworkArch(1, 3, 3))

    def test_chain_checkpoint(self, small_data, config, tmp_path):
        chain = hmc_sample(None, small_data, PriorSpec(), config, arch=NetworkArch(1, 3, 3))
        path = tmp_path / "chain.ndjson"
        chain.save(str(path))
        loaded = PosteriorChain.load(str(path))
        assert loaded.M == chain.M
        assert loaded.config == config
        assert_allclose(loaded.flat_draws(), chain.flat_draws())
        assert_allclose(loaded.log_posts, chain.log_posts)

    def test_sample_chains_parallel_matches_serial(self, small_data, config):
        arch = NetworkArch(1, 3, 3)
        serial = sample_chains(arch, small_data, PriorSpec(), config, n_chains=2, workers=1)
        threaded = sample_chains(arch, small_data, PriorSpec(), config, n_chains=2, workers=2)
        for a, b in zip(serial, threaded):
            assert np.array_equal(a.flat_draws(), b.flat_draws())
        assert serial[0].seed != serial[1].seed

        merged = PosteriorChain.merge(serial)
        assert merged.M == 30
        assert np.array_equal(merged.flat_draws()[:15], serial[0].flat_draws())

    def test_posterior_mean_prediction(self, small_data, config):
        chain = hmc_sample(None, small_data, PriorSpec(), config, arch=NetworkArch(1, 3, 3))
        pred = posterior_mean_prediction(chain, small_data.X)
        assert pred.shape == (small_data.n,)
        assert np.all(np.isfinite(pred))


class TestOutputLayerPosterior:
    def test_agrees_with_full_posterior_on_output_coordinates(self, small_net, small_data):
        prior = PriorSpec()
        full = NetworkPosterior(small_net.arch, small_data, prior)
        target = OutputLayerPosterior(small_net, small_data, prior)
        theta_full = small_net.flatten()
        value_full, grad_full = full(theta_full)
        value, grad = target(target.initial_theta())
        hidden = theta_full[:-target.dim]
        assert value_full == pytest.approx(value - 0.5 * hidden @ hidden / prior.weight_sd ** 2, rel=1e-12)
        assert_allclose(grad, grad_full[-target.dim:], rtol=1e-12, atol=1e-12)

    def test_gradient_vanishes_at_gaussian_mean(self, small_net, small_data):
        target = OutputLayerPosterior(small_net, small_data, PriorSpec())
        mean, cov = target.gaussian_posterior()
        _, grad = target(mean)
        assert_allclose(grad, 0.0, atol=1e-9)
        assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_prior_only_is_prior(self, small_net):
        mean, cov = OutputLayerPosterior(small_net, None, PriorSpec(weight_sd=2.0)).gaussian_posterior()
        assert not mean.any()
        assert_allclose(cov, 4.0 * np.eye(small_net.width + 1))

    def test_sampling_keeps_hidden_layers_fixed(self, small_net, small_data):
        config = HmcConfig(n_draws=2000, warmup=1000, seed=5)
        chain = hmc_sample(small_net, small_data, PriorSpec(), config, train_hidden=False)
        assert chain.M == 2000
        for weights in chain.draws[::100]:
            assert np.array_equal(weights.W1, small_net.W1)
            assert all(np.array_equal(a, b) for a, b in zip(weights.hidden, small_net.hidden))
        mean, cov = OutputLayerPosterior(small_net, small_data, PriorSpec()).gaussian_posterior()
        draws = np.array([np.append(w.beta, w.b0) for w in chain.draws])
        se = np.sqrt(np.diag(cov) * 10 / chain.M)
        assert np.all(np.abs(draws.mean(axis=0) - mean) <= 4 * se)
        assert_allclose(draws.std(axis=0), np.sqrt(np.diag(cov)), rtol=0.15)


def test_prior_spec_from_variance():
    assert PriorSpec.from_variance(0.1).weight_sd == pytest.approx(math.sqrt(0.1))
    with pytest.raises(ConfigError):
        PriorSpec.from_variance(0.0)


class TestPriorOnlyTarget:
    """无数据时链应当还原先验 N(0, 0.1)"""

    @pytest.fixture(scope="class")
    def chain(self):
        config = HmcConfig(n_draws=4000, seed=3)
        return hmc_sample(None, None, PriorSpec(), config, arch=NetworkArch(2, 4, 3))

    def test_mean_near_zero(self, chain):
        theta = chain.flat_draws()
        sd = PriorSpec().weight_sd
        z = theta.mean(axis=0) / (sd / math.sqrt(chain.M))
        assert np.mean(np.abs(z) > 3.0) <= 0.1
        assert np.max(np.abs(z)) <= 5.0

    def test_spread_matches_prior(self, chain):
        sd = chain.flat_draws().std(axis=0)
        assert_allclose(np.median(sd), PriorSpec().weight_sd, rtol=0.1)

    def test_acceptance_near_target(self, chain):
        assert abs(chain.accept_rate - 0.75) <= 0.15

    def test_no_divergences(self, chain):
        assert chain.n_divergent == 0
        assert chain.divergent_fraction == 0.0

    def test_draws_are_not_stuck(self, chain):
        theta = chain.flat_draws()
        centered = theta - theta.mean(axis=0)
        lag1 = np.sum(centered[1:] * centered[:-1], axis=0) / np.sum(centered ** 2, axis=0)
        assert np.median(lag1) < 0.4


def test_standard_normal_second_moments():
    config = HmcConfig(n_draws=20_000, seed=8)
    result = HamiltonianSampler(gaussian_target(np.zeros(2), np.eye(2)), config).run(np.zeros(2))
    second = result.draws.T @ result.draws / result.draws.shape[0]
    assert_allclose(second, np.eye(2), atol=0.05)
    assert result.n_divergent == 0
