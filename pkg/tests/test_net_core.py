import numpy as np
import pytest
from numpy.testing import assert_allclose

from varsel_engine.errors import ConfigError, NumericError
from varsel_engine.net_core import (
    NetworkArch,
    NetworkWeights,
    Dataset,
    activation_pattern,
    build_feature_bundle,
    check_constraints,
    embed_inputs,
    forward,
    forward_batch,
    gradient,
    gradient_batch,
    kernel_matrix,
    regularized_inverse,
)

from conftest import random_inputs, random_network


def scalar_forward(weights, x):
    """逐元素循环的参照实现"""
    h = list(x)
    for W in weights.layers:
        h = [max(0.0, sum(W[k][j] * h[j] for j in range(len(h)))) for k in range(W.shape[0])]
    return weights.b0 + sum(b * v for b, v in zip(weights.beta, h))


class TestForward:
    def test_toy_network(self, toy_net):
        assert forward(toy_net, [0.5, 0.5]) == pytest.approx(0.5)

    def test_zero_network_returns_bias(self):
        arch = NetworkArch(depth=3, width=4, input_dim=2)
        weights = NetworkWeights.zeros(arch, b0=3.0)
        assert forward(weights, [0.2, 0.9]) == 3.0

    def test_matches_scalar_recursion(self):
        weights = random_network(2, 5, 3, seed=11)
        for x in random_inputs(20, 3, seed=5):
            assert forward(weights, x) == pytest.approx(scalar_forward(weights, x), abs=1e-12)

    def test_batch_matches_pointwise(self, small_net):
        X = random_inputs(8, 3, seed=1)
        assert_allclose(forward_batch(small_net, X), [forward(small_net, x) for x in X], rtol=1e-14)

    def test_shape_mismatch(self, toy_net):
        with pytest.raises(ConfigError):
            forward(toy_net, [0.1, 0.2, 0.3])


class TestActivationPattern:
    def test_toy_pattern(self, toy_net):
        pattern = activation_pattern(toy_net, [0.5, 0.5])
        assert pattern.masks[0].tolist() == [True, False]

    def test_zero_weights_all_inactive(self):
        weights = NetworkWeights.zeros(NetworkArch(2, 3, 2))
        pattern = activation_pattern(weights, [0.4, 0.6])
        assert not any(m.any() for m in pattern.masks)

    def test_linearization_is_exact_at_the_point(self):
        weights = random_network(3, 6, 4, seed=2)
        for x in random_inputs(10, 4, seed=9):
            pattern = activation_pattern(weights, x)
            assert pattern.linearized_forward(weights, x) == pytest.approx(forward(weights, x), abs=1e-12)

    def test_linear_between_points_with_same_pattern(self):
        weights = random_network(3, 6, 4, seed=14)
        rng = np.random.default_rng(14)
        checked = 0
        for x in random_inputs(200, 4, seed=14):
            z = np.clip(x + 0.01 * rng.normal(size=4), 0.0, 1.0)
            masks_x = activation_pattern(weights, x).masks
            masks_z = activation_pattern(weights, z).masks
            if not all(np.array_equal(a, b) for a, b in zip(masks_x, masks_z)):
                continue
            mid = forward(weights, 0.5 * (x + z))
            expected = 0.5 * (forward(weights, x) + forward(weights, z))
            assert mid == pytest.approx(expected, rel=1e-10, abs=1e-10)
            checked += 1
        assert checked > 50


class TestGradient:
    def test_toy_gradient(self, toy_net):
        assert gradient(toy_net, [0.5, 0.5], 0) == pytest.approx(1.0)

    def test_dead_input(self):
        weights = random_network(2, 4, 3, seed=4)
        W1 = weights.W1.copy()
        W1[:, 1] = 0.0
        dead = NetworkWeights(W1=W1, hidden=weights.hidden, beta=weights.beta, b0=weights.b0)
        assert gradient(dead, [0.3, 0.3, 0.3], 1) == 0.0

    def test_matches_finite_differences(self):
        weights = random_network(2, 6, 3, seed=8)
        h = 1e-6
        for x in random_inputs(25, 3, seed=6):
            grad = gradient_batch(weights, x)[0]
            for p in range(3):
                e = np.zeros(3)
                e[p] = h
                fd = (forward(weights, x + e) - forward(weights, x - e)) / (2 * h)
                assert grad[p] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_index_out_of_range(self, toy_net):
        with pytest.raises(ConfigError):
            gradient(toy_net, [0.5, 0.5], 2)


class TestFeatureBundle:
    def test_toy_features(self, toy_net):
        bundle = build_feature_bundle(toy_net, [[0.5, 0.5], [1.0, 0.0]])
        assert_allclose(bundle.Phi, [[0.5, 0.0], [1.0, 0.0]])
        assert_allclose(kernel_matrix(bundle), [[0.25, 0.5], [0.5, 1.0]])

    def test_zero_network(self):
        weights = NetworkWeights.zeros(NetworkArch(2, 3, 2))
        bundle = build_feature_bundle(weights, random_inputs(5, 2), ridge=1e-8)
        assert not bundle.Phi.any()
        assert not bundle.dPhi.any()
        assert bundle.ridge_eff == 1e-8
        assert_allclose(bundle.gram_inv, np.eye(3) / 1e-8)
        assert not kernel_matrix(bundle).any()
        assert bundle.rank_deficient

    def test_grad_features_match_gradients(self):
        weights = random_network(3, 5, 4, seed=21)
        X = random_inputs(15, 4, seed=2)
        bundle = build_feature_bundle(weights, X)
        grads = gradient_batch(weights, X)
        for p in range(4):
            assert_allclose(bundle.grad_features(p) @ weights.beta, grads[:, p], rtol=1e-10, atol=1e-12)

    def test_non_finite_weights(self, toy_net):
        bad = NetworkWeights(W1=[[np.nan, 0.0], [0.0, 1.0]], beta=[1.0, 1.0])
        with pytest.raises(NumericError):
            build_feature_bundle(bad, [[0.5, 0.5]])

    def test_augmented_shapes(self, small_net):
        bundle = build_feature_bundle(small_net, random_inputs(6, 3))
        Phi_aug, dPhi_aug = bundle.augmented()
        assert Phi_aug.shape == (6, 5)
        assert dPhi_aug.shape == (3, 6, 5)
        assert not dPhi_aug[:, :, -1].any()

    @pytest.mark.parametrize("seed", range(10))
    def test_kernel_is_positive_semidefinite(self, seed):
        weights = random_network(1 + seed % 3, 2 + seed, 3, seed=seed)
        K = kernel_matrix(build_feature_bundle(weights, random_inputs(25, 3, seed=seed)))
        assert_allclose(K, K.T, rtol=0, atol=1e-12 * (1.0 + np.abs(K).max()))
        eig = np.linalg.eigvalsh(K)
        assert eig.min() >= -1e-10 * (1.0 + eig.max())

    def test_regularized_inverse_of_identity(self):
        inv, lam, rank = regularized_inverse(np.eye(3), 0.0)
        assert lam == 0.0
        assert rank == 3
        assert_allclose(inv, np.eye(3))

    def test_full_rank_matches_ridge_formula(self):
        Phi = random_inputs(20, 4, seed=6)
        gram = Phi.T @ Phi
        inv, lam, rank = regularized_inverse(gram, 1e-3)
        assert rank == 4
        assert lam == pytest.approx(1e-3 * np.trace(gram) / 4)
        assert_allclose(inv, np.linalg.inv(gram + lam * np.eye(4)), rtol=1e-10)

    def test_rank_deficient_is_pseudo_inverse(self):
        # 两列共线加一列死单元：秩 1，(vvᵀ)⁺ = vvᵀ/‖v‖⁴
        v = np.array([1.0, 2.0, 0.0])
        gram = np.outer(v, v)
        inv, _, rank = regularized_inverse(gram, 0.0)
        assert rank == 1
        assert_allclose(inv, gram / 25.0, rtol=1e-10, atol=1e-14)
        inv_ridge, _, rank_ridge = regularized_inverse(gram, 1e-8)
        assert rank_ridge == 1
        assert_allclose(inv_ridge, gram / 25.0, rtol=1e-7, atol=1e-14)


class TestConstraints:
    def test_zero_weights(self):
        arch = NetworkArch(2, 3, 2, sparsity_bound=0, norm_bound=1.0)
        report = check_constraints(NetworkWeights.zeros(arch), arch)
        assert report.sparsity_total == 0
        assert report.sparsity_ok and report.norm_ok

    def test_sparsity_violation(self, toy_net):
        arch = NetworkArch(1, 2, 2, sparsity_bound=1)
        report = check_constraints(toy_net, arch)
        assert report.sparsity_total == 2
        assert not report.sparsity_ok

    def test_norm_violation(self):
        weights = NetworkWeights(W1=[[1.5]], beta=[1.0])
        report = check_constraints(weights, NetworkArch(1, 1, 1, norm_bound=1.0))
        assert not report.norm_ok


class TestWeightsAndData:
    def test_flatten_order(self):
        weights = NetworkWeights(W1=[[1.0, 2.0]], hidden=([[3.0]],), beta=[4.0], b0=5.0)
        assert weights.flatten().tolist() == [1.0, 2.0, 3.0, 4.0, 5.0]
        restored = NetworkWeights.unflatten(weights.flatten(), weights.arch)
        assert restored.flatten().tolist() == weights.flatten().tolist()

    def test_save_load(self, small_net, tmp_path):
        path = tmp_path / "w.json"
        small_net.save(str(path))
        loaded = NetworkWeights.load(str(path))
        assert_allclose(loaded.flatten(), small_net.flatten())

    def test_embed_inputs_ignores_new_coordinates(self):
        weights = random_network(2, 4, 5, seed=3)
        wide = embed_inputs(weights, 8)
        X = random_inputs(10, 8, seed=4)
        assert_allclose(forward_batch(wide, X), forward_batch(weights, X[:, :5]))
        assert not gradient_batch(wide, X)[:, 5:].any()

    def test_dataset_rejects_out_of_cube_inputs(self):
        with pytest.raises(ConfigError):
            Dataset(X=[[1.5, 0.2]], y=[0.0])

    def test_dataset_csv(self, small_data, tmp_path):
        path = tmp_path / "d.csv"
        small_data.to_frame().to_csv(path, index=False)
        loaded = Dataset.from_csv(str(path), noise_sd=0.5)
        assert loaded.n == small_data.n and loaded.P == small_data.P
        assert_allclose(loaded.y, small_data.y)
