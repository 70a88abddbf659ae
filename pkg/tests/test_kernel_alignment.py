import numpy as np
import pytest
import torch

from conceptproto.errors import BatchTooSmallError, DegenerateSegmentError, NonFiniteInputError, ShapeMismatchError
from conceptproto.kernel_alignment import (
    cka,
    cka_loss_layer,
    cka_similarity_matrix,
    gram_linear,
    hsic_unbiased,
)

from conftest import cka_oracle, hsic_unbiased_oracle


class TestGramLinear:
    def test_single_row(self):
        assert gram_linear([[1.0, 0.0]]).tolist() == [[1.0]]

    def test_orthonormal_rows(self):
        g = gram_linear([[1.0, 0.0], [0.0, 1.0]])
        assert g.tolist() == [[1.0, 0.0], [0.0, 1.0]]

    def test_matches_brute_force_double_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 8))
        g = gram_linear(x).numpy()
        expected = np.empty((5, 5))
        for i in range(5):
            for j in range(5):
                expected[i, j] = float(np.dot(x[i], x[j]))
        assert np.max(np.abs(g - expected)) <= 1e-12 * np.max(np.abs(expected))

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        g = gram_linear(rng.normal(size=(6, 3))).numpy()
        assert np.array_equal(g, g.T)

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteInputError):
            gram_linear([[1.0, float("nan")], [0.0, 1.0]])
        with pytest.raises(NonFiniteInputError):
            gram_linear([[1.0, float("inf")]])


class TestHsicUnbiased:
    def test_constant_features_all_ones_gram(self):
        # Hand evaluation: trace term 12, correction 144/6 = 24, cross term
        # 2/2 * 36 = 36, so (12 + 24 - 36) / (4 * 1) = 0.
        k = torch.ones(4, 4, dtype=torch.float64)
        assert float(hsic_unbiased(k, k)) == pytest.approx(0.0, abs=1e-12)

    def test_matches_literal_transcription(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(6, 5))
        y = rng.normal(size=(6, 7))
        k, l = gram_linear(x), gram_linear(y)
        mine = float(hsic_unbiased(k, l))
        expected = hsic_unbiased_oracle(k.numpy(), l.numpy())
        assert mine == pytest.approx(expected, rel=1e-10)

    def test_symmetric_under_swap_exactly(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            k = gram_linear(rng.normal(size=(5, 4)))
            l = gram_linear(rng.normal(size=(5, 6)))
            assert float(hsic_unbiased(k, l)) == float(hsic_unbiased(l, k))

    def test_batch_below_four_rejected(self):
        k = torch.eye(3)
        with pytest.raises(BatchTooSmallError, match=r"B\(B-3\)"):
            hsic_unbiased(k, k)

    def test_mismatched_batch_sizes_rejected(self):
        with pytest.raises(ShapeMismatchError):
            hsic_unbiased(torch.eye(4), torch.eye(5))

    def test_can_be_negative(self):
        # the unbiased estimator admits small negatives on independent data
        rng = np.random.default_rng(13)
        seen_negative = False
        for trial in range(50):
            k = gram_linear(rng.normal(size=(4, 2)))
            l = gram_linear(rng.normal(size=(4, 2)))
            if float(hsic_unbiased(k, l)) < 0:
                seen_negative = True
                break
        assert seen_negative


class TestCka:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            x = rng.normal(size=(rng.integers(4, 9), rng.integers(2, 12)))
            assert float(cka(x, x)) == pytest.approx(1.0, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(22)
        x = rng.normal(size=(7, 5))
        y = rng.normal(size=(7, 9))
        assert float(cka(x, y)) == pytest.approx(float(cka(y, x)), abs=1e-12)

    def test_orthogonal_and_scale_invariance(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            x = rng.normal(size=(6, 8))
            y = rng.normal(size=(6, 8))
            q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
            base = float(cka(x, y))
            assert float(cka(x, y @ q)) == pytest.approx(base, abs=1e-8)
            alpha = float(rng.uniform(0.1, 10.0))
            assert float(cka(x, alpha * y)) == pytest.approx(base, abs=1e-8)

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(24)
        for _ in range(50):
            x = rng.normal(size=(5, 4))
            y = rng.normal(size=(5, 4))
            v = float(cka(x, y))
            assert -1.0 - 1e-9 <= v <= 1.0 + 1e-9

    def test_matches_oracle(self):
        rng = np.random.default_rng(25)
        x = rng.normal(size=(8, 6))
        y = rng.normal(size=(8, 10))
        assert float(cka(x, y)) == pytest.approx(cka_oracle(x, y), rel=1e-10)

    def test_degenerate_segment_rejected(self):
        constant = np.ones((6, 4))
        varying = np.random.default_rng(26).normal(size=(6, 4))
        with pytest.raises(DegenerateSegmentError):
            cka(constant, varying)


class TestCkaLossLayer:
    def test_two_segments_equals_single_cka(self):
        rng = np.random.default_rng(31)
        a, b = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        assert float(cka_loss_layer([a, b])) == pytest.approx(float(cka(a, b)), abs=1e-12)

    def test_identical_segments_give_one(self):
        rng = np.random.default_rng(32)
        s = rng.normal(size=(5, 7))
        assert float(cka_loss_layer([s, s.copy(), s.copy()])) == pytest.approx(1.0, abs=1e-9)

    def test_matches_brute_force_pair_mean(self):
        rng = np.random.default_rng(33)
        segments = [rng.normal(size=(6, 4)) for _ in range(4)]
        pair_values = [
            cka_oracle(segments[i], segments[j])
            for i in range(4)
            for j in range(i + 1, 4)
        ]
        assert len(pair_values) == 6
        assert float(cka_loss_layer(segments)) == pytest.approx(np.mean(pair_values), rel=1e-10)

    def test_mean_equivalence_up_to_six_segments(self):
        rng = np.random.default_rng(34)
        for m in (2, 3, 5, 6):
            segments = [rng.normal(size=(5, 3)) for _ in range(m)]
            pair_values = [
                cka_oracle(segments[i], segments[j]) for i in range(m) for j in range(i + 1, m)
            ]
            assert float(cka_loss_layer(segments)) == pytest.approx(np.mean(pair_values), rel=1e-9)

    def test_single_segment_rejected(self):
        with pytest.raises(ShapeMismatchError):
            cka_loss_layer([np.random.default_rng(0).normal(size=(5, 3))])

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(35)
        segments = [torch.tensor(rng.normal(size=(8, 8)), requires_grad=True) for _ in range(3)]
        loss = cka_loss_layer(segments)
        grads = torch.autograd.grad(loss, segments)

        step = 1e-4
        checked = 0
        for si in (0, 1, 2):
            flat = segments[si].detach().clone().view(-1)
            for offset in rng.choice(flat.numel(), size=6, replace=False):
                def value(delta):
                    perturbed = [s.detach().clone() for s in segments]
                    perturbed[si].view(-1)[offset] += delta
                    return float(cka_loss_layer(perturbed))

                numeric = (value(step) - value(-step)) / (2 * step)
                analytic = float(grads[si].view(-1)[offset])
                denom = max(abs(analytic), abs(numeric), 1e-8)
                assert abs(analytic - numeric) / denom < 1e-4
                checked += 1
        assert checked == 18


class TestSimilarityMatrix:
    def test_identical_segments_all_ones(self):
        rng = np.random.default_rng(41)
        s = rng.normal(size=(6, 4))
        mat, mean = cka_similarity_matrix([s, s.copy(), s.copy()])
        assert np.allclose(mat.numpy(), 1.0, atol=1e-9)
        assert float(mean) == pytest.approx(1.0, abs=1e-9)

    def test_unit_diagonal_and_symmetry(self):
        rng = np.random.default_rng(42)
        segments = [rng.normal(size=(6, 5)) for _ in range(4)]
        mat, _ = cka_similarity_matrix(segments)
        m = mat.numpy()
        assert np.allclose(np.diag(m), 1.0)
        assert np.array_equal(m, m.T)

    def test_independent_segments_mean_near_zero(self):
        rng = np.random.default_rng(43)
        segments = [rng.normal(size=(64, 6)) for _ in range(4)]
        _, mean = cka_similarity_matrix(segments)
        assert abs(float(mean)) < 0.2

    def test_mean_covers_strict_upper_triangle(self):
        rng = np.random.default_rng(44)
        segments = [rng.normal(size=(5, 3)) for _ in range(3)]
        mat, mean = cka_similarity_matrix(segments)
        m = mat.numpy()
        expected = np.mean([m[0, 1], m[0, 2], m[1, 2]])
        assert float(mean) == pytest.approx(expected, abs=1e-12)
