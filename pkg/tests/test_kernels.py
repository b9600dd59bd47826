"""Tests for the numerical primitives: Gram/HSIC/CKA, KL, CE, Dice, cosine."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from reprog.kernels import (
    DegenerateFeaturesError,
    ZeroVectorError,
    center_gram,
    cka_loss,
    cosine_similarity,
    cross_entropy,
    dice_loss,
    gram,
    hsic,
    kl_divergence,
)


def hsic_brute(k: np.ndarray, l: np.ndarray) -> float:
    """Brute-force HSIC: explicit H, two matrix products, elementwise sum."""
    n = k.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    kc = h @ k @ h
    lc = h @ l @ h
    return float((kc * lc).sum() / (n - 1) ** 2)


def t(a, dtype=torch.float64):
    return torch.tensor(a, dtype=dtype)


class TestGram:
    def test_orthonormal_rows_give_identity(self):
        k = gram(torch.eye(2, dtype=torch.float64))
        assert torch.allclose(k, torch.eye(2, dtype=torch.float64))

    def test_direct_dot_products(self):
        k = gram(t([[1.0, 0.0], [0.0, 2.0]]))
        assert torch.allclose(k, t([[1.0, 0.0], [0.0, 4.0]]))

    def test_duplicated_row_rank_one(self):
        k = gram(t([[1.0, 2.0], [1.0, 2.0]]))
        assert torch.allclose(k, torch.full((2, 2), 5.0, dtype=torch.float64))

    def test_symmetric(self):
        x = torch.randn(5, 7, dtype=torch.float64)
        k = gram(x)
        assert torch.allclose(k, k.T)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            gram(torch.empty(0, 3))
        with pytest.raises(ValueError):
            gram(torch.randn(3))


class TestCenterGram:
    def test_identity_case(self):
        # H K H for K = I_2 equals H itself.
        out = center_gram(torch.eye(2, dtype=torch.float64))
        assert torch.allclose(out, t([[0.5, -0.5], [-0.5, 0.5]]))

    def test_matches_explicit_h_product(self):
        rng = np.random.default_rng(0)
        for n in (2, 3, 5):
            x = rng.normal(size=(n, 4))
            k = x @ x.T
            h = np.eye(n) - np.ones((n, n)) / n
            expected = h @ k @ h
            out = center_gram(torch.from_numpy(k))
            assert np.allclose(out.numpy(), expected, atol=1e-12)

    def test_all_ones_annihilated(self):
        out = center_gram(torch.ones(3, 3, dtype=torch.float64))
        assert torch.allclose(out, torch.zeros(3, 3, dtype=torch.float64), atol=1e-12)

    def test_row_col_sums_zero(self):
        x = torch.randn(6, 4, dtype=torch.float64)
        out = center_gram(gram(x))
        assert out.sum(dim=0).abs().max() < 1e-9
        assert out.sum(dim=1).abs().max() < 1e-9

    def test_small_n_rejected(self):
        with pytest.raises(ValueError):
            center_gram(torch.ones(1, 1))


class TestHsic:
    def test_constant_features_give_zero(self):
        x = torch.ones(4, 3, dtype=torch.float64)
        assert abs(float(hsic(gram(x), gram(torch.randn(4, 3, dtype=torch.float64))))) < 1e-12

    def test_scaled_identity_case(self):
        val = hsic(torch.eye(2, dtype=torch.float64), 4.0 * torch.eye(2, dtype=torch.float64))
        assert abs(float(val) - 4.0) < 1e-12

    def test_symmetry_on_random_psd(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            x = torch.from_numpy(rng.normal(size=(4, 5)))
            y = torch.from_numpy(rng.normal(size=(4, 6)))
            k, l = gram(x), gram(y)
            assert abs(float(hsic(k, l)) - float(hsic(l, k))) < 1e-12

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for n in (2, 3, 4):
            for _ in range(10):
                x = rng.normal(size=(n, 5))
                y = rng.normal(size=(n, 7))
                k, l = x @ x.T, y @ y.T
                ours = float(hsic(torch.from_numpy(k), torch.from_numpy(l)))
                assert abs(ours - hsic_brute(k, l)) < 1e-9

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError):
            hsic(torch.eye(2), torch.eye(3))


class TestCkaLoss:
    def test_self_similarity_is_minus_one(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = torch.from_numpy(rng.normal(size=(5, 8)))
            k = gram(x)
            assert abs(float(cka_loss(k, k)) + 1.0) < 1e-6

    def test_scaled_identity_case(self):
        val = cka_loss(torch.eye(2, dtype=torch.float64), 4.0 * torch.eye(2, dtype=torch.float64))
        assert abs(float(val) + 1.0) < 1e-12

    def test_isotropic_scaling_invariance(self):
        rng = np.random.default_rng(4)
        x = torch.from_numpy(rng.normal(size=(6, 10)))
        y = torch.from_numpy(rng.normal(size=(6, 4)))
        base = float(cka_loss(gram(x), gram(y)))
        for c in (0.01, 3.7, 250.0):
            assert abs(float(cka_loss(gram(c * x), gram(y))) - base) < 1e-6
            assert abs(float(cka_loss(gram(x), gram(c * y))) - base) < 1e-6

    def test_orthogonal_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 8))
        y = rng.normal(size=(6, 8))
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        base = float(cka_loss(gram(torch.from_numpy(x)), gram(torch.from_numpy(y))))
        rotated = float(cka_loss(gram(torch.from_numpy(x)), gram(torch.from_numpy(y @ q))))
        assert abs(base - rotated) < 1e-5

    def test_range(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            x = torch.from_numpy(rng.normal(size=(4, 6)))
            y = torch.from_numpy(rng.normal(size=(4, 6)))
            v = float(cka_loss(gram(x), gram(y)))
            assert -1.0 - 1e-9 <= v <= 1e-9

    def test_degenerate_features_raise(self):
        const = gram(torch.ones(4, 3, dtype=torch.float64))
        ok = gram(torch.randn(4, 3, dtype=torch.float64))
        with pytest.raises(DegenerateFeaturesError):
            cka_loss(const, ok)
        with pytest.raises(DegenerateFeaturesError):
            cka_loss(ok, const)

    def test_gradient_matches_finite_differences(self):
        # Central differences with step 1e-4 on a random 4x6 input.
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(4, 6))
        y = torch.from_numpy(rng.normal(size=(4, 6)))
        ky = gram(y)

        def loss_of(x_np):
            return float(cka_loss(gram(torch.from_numpy(x_np)), ky))

        x = torch.from_numpy(x0.copy()).requires_grad_(True)
        (g,) = torch.autograd.grad(cka_loss(gram(x), ky), x)
        g = g.numpy()

        h = 1e-4
        g_fd = np.zeros_like(x0)
        for i in range(x0.shape[0]):
            for j in range(x0.shape[1]):
                xp, xm = x0.copy(), x0.copy()
                xp[i, j] += h
                xm[i, j] -= h
                g_fd[i, j] = (loss_of(xp) - loss_of(xm)) / (2 * h)
        rel = np.linalg.norm(g - g_fd) / np.linalg.norm(g_fd)
        assert rel < 1e-4


class TestKlDivergence:
    def test_identical_logits_zero(self):
        z = torch.randn(5, dtype=torch.float64)
        assert float(kl_divergence(z, z)) == 0.0

    def test_one_hot_vs_uniform(self):
        # softmax([40, -40]) is one-hot to double precision; KL = ln 2.
        p = t([40.0, -40.0])
        q = t([0.0, 0.0])
        assert abs(float(kl_divergence(p, q)) - math.log(2)) < 1e-9

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-20, 20), min_size=2, max_size=8),
        st.lists(st.floats(-20, 20), min_size=2, max_size=8),
    )
    def test_nonnegative(self, a, b):
        m = min(len(a), len(b))
        v = float(kl_divergence(t(a[:m]), t(b[:m])))
        assert v >= 0.0

    def test_batched_mean(self):
        p = t([[40.0, -40.0], [0.0, 0.0]])
        q = t([[0.0, 0.0], [0.0, 0.0]])
        assert abs(float(kl_divergence(p, q)) - math.log(2) / 2) < 1e-9

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            kl_divergence(torch.zeros(3), torch.zeros(4))


class TestCrossEntropy:
    def test_confident_correct_is_zero(self):
        logits = t([[40.0, -40.0]])
        labels = torch.tensor([0])
        assert float(cross_entropy(logits, labels)) < 1e-9

    def test_uniform_two_class(self):
        logits = torch.zeros(3, 2, dtype=torch.float64)
        labels = torch.tensor([0, 1, 0])
        assert abs(float(cross_entropy(logits, labels)) - math.log(2)) < 1e-12

    def test_batch_mean(self):
        logits = t([[40.0, -40.0], [0.0, 0.0]])
        labels = torch.tensor([0, 1])
        assert abs(float(cross_entropy(logits, labels)) - math.log(2) / 2) < 1e-9

    def test_nonnegative_random(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            logits = torch.from_numpy(rng.normal(size=(4, 5)))
            labels = torch.from_numpy(rng.integers(0, 5, size=4))
            assert float(cross_entropy(logits, labels)) >= 0.0

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy(torch.zeros(2, 3), torch.tensor([0, 3]))
        with pytest.raises(ValueError):
            cross_entropy(torch.zeros(2, 3), torch.tensor([-1, 0]))


class TestDiceLoss:
    def test_identical_masks(self):
        m = torch.zeros(1, 64, 64, dtype=torch.float64)
        m[0, 10:50, 10:50] = 1.0  # 1600 positive pixels
        assert float(dice_loss(m, m)) < 1e-3

    def test_disjoint_masks(self):
        a = torch.zeros(1, 64, 64, dtype=torch.float64)
        b = torch.zeros(1, 64, 64, dtype=torch.float64)
        a[0, :20, :] = 1.0
        b[0, 40:, :] = 1.0
        assert float(dice_loss(a, b)) > 0.99

    def test_half_coverage(self):
        # |target| = 1600, pred covers 800 of it, no false positives:
        # coefficient (2*800+1)/(800+1600+1) ~= 2/3, loss ~= 1/3.
        target = torch.zeros(1, 64, 64, dtype=torch.float64)
        target[0, :40, :40] = 1.0
        pred = torch.zeros(1, 64, 64, dtype=torch.float64)
        pred[0, :20, :40] = 1.0
        assert abs(float(dice_loss(pred, target)) - 1.0 / 3.0) < 1e-3

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        pred = torch.from_numpy(rng.uniform(size=(2, 8, 8)))
        target = torch.from_numpy(rng.integers(0, 2, size=(2, 8, 8)).astype(float))
        v = float(dice_loss(pred, target))
        assert 0.0 <= v <= 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dice_loss(torch.zeros(1, 4, 4), torch.zeros(1, 4, 5))


class TestCosineSimilarity:
    def test_parallel(self):
        u = torch.randn(10, dtype=torch.float64)
        assert abs(float(cosine_similarity(u, u)) - 1.0) < 1e-12

    def test_orthogonal(self):
        assert abs(float(cosine_similarity(t([1.0, 0.0]), t([0.0, 1.0])))) < 1e-12

    def test_antiparallel(self):
        u = torch.randn(10, dtype=torch.float64)
        assert abs(float(cosine_similarity(u, -u)) + 1.0) < 1e-12

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroVectorError):
            cosine_similarity(torch.zeros(3), torch.ones(3))
