import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference
from vsl.checks import hinge_safe, ratio_safe
from vsl.losses import LossConfig, cosine_similarity_matrix, total_loss, triplet_loss, tsl_loss, vsl_loss
from vsl.smooth_rank import rank_matrix


class TestCosine:
    def test_self(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_allclose(np.diag(cosine_similarity_matrix(x, x)), 1.0, atol=1e-15)

    def test_orthogonal(self):
        np.testing.assert_array_equal(cosine_similarity_matrix(np.eye(3), np.eye(3)), np.eye(3))

    def test_closed_form(self):
        s = cosine_similarity_matrix([[1.0, 0.0]], [[1.0, 1.0]])
        assert s[0, 0] == pytest.approx(1 / math.sqrt(2), abs=1e-15)

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate embedding"):
            cosine_similarity_matrix([[0.0, 0.0]], [[1.0, 0.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


class TestTriplet:
    def test_inactive_hinges(self):
        loss, grad = triplet_loss(np.eye(4), LossConfig(margin=0.2))
        assert loss == 0.0
        assert not np.any(grad)

    def test_hand_example(self):
        S = np.array([[0.5, 0.6], [0.1, 0.7]])
        loss, grad = triplet_loss(S, LossConfig(margin=0.2))
        assert loss == pytest.approx(0.2, abs=1e-15)
        # both active hinges (image 0 vs text 1, text 1 vs image 0) run through s_01
        np.testing.assert_allclose(grad, [[-0.5, 1.0], [0.0, -0.5]], atol=1e-15)

    def test_sum_all_counts_every_negative(self):
        S = np.array([[0.5, 0.6, 0.4], [0.1, 0.7, 0.0], [0.2, 0.3, 0.9]])
        loss, _ = triplet_loss(S, LossConfig(margin=0.2, negative_mining="sum_all"))
        hinges = [max(0.0, 0.2 - S[i, i] + S[k, i]) + max(0.0, 0.2 - S[i, i] + S[i, k])
                  for i in range(3) for k in range(3) if k != i]
        assert loss == pytest.approx(sum(hinges) / 3, abs=1e-15)

    def test_single_pair(self):
        with pytest.raises(ValueError, match="at least one negative"):
            triplet_loss(np.ones((1, 1)), LossConfig())

    @pytest.mark.parametrize("mining", ["hardest", "sum_all"])
    def test_finite_difference(self, mining):
        rng = np.random.default_rng(5)
        cfg = LossConfig(negative_mining=mining)
        done = 0
        while done < 5:
            S = rng.uniform(-1, 1, (4, 4))
            if not hinge_safe(S, cfg.margin):
                continue
            numeric = central_difference(lambda x: triplet_loss(x, cfg)[0], S)
            np.testing.assert_allclose(triplet_loss(S, cfg)[1], numeric, rtol=1e-4, atol=1e-8)
            done += 1

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 6).flatmap(lambda n: arrays(np.float64, (n, n), elements=st.floats(-1, 0.4))))
    def test_dominant_diagonal_zero_margin(self, S):
        np.fill_diagonal(S, 0.5)
        loss, grad = triplet_loss(S, LossConfig(margin=0.0))
        assert loss == 0.0 and not np.any(grad)


class TestVSL:
    def test_identity(self):
        A = rank_matrix(np.random.default_rng(1).standard_normal((5, 5)), 0.001)
        loss, grad = vsl_loss(A, A)
        assert loss == 0.0
        assert not np.any(grad)

    def test_single_entry(self):
        assert vsl_loss([[1.5]], [[3.0]])[0] == pytest.approx(0.5, abs=1e-15)
        assert tsl_loss([[1.5]], [[3.0]])[0] == pytest.approx(0.5, abs=1e-15)

    def test_gradient_cases(self):
        loss, grad = vsl_loss([[1.5, 3.0, 2.0]], [[3.0, 1.5, 2.0]])
        np.testing.assert_allclose(grad, [[-1 / 3.0 / 3, 1.5 / 9.0 / 3, 0.0]], atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            vsl_loss(np.ones((2, 2)), np.ones((3, 3)))

    def test_finite_difference(self):
        rng = np.random.default_rng(6)
        A = rng.uniform(1.1, 4.9, (4, 4))
        B = rng.uniform(1.1, 4.9, (4, 4))
        assert ratio_safe(A, B)
        numeric = central_difference(lambda x: vsl_loss(x, B)[0], A)
        np.testing.assert_allclose(vsl_loss(A, B)[1], numeric, rtol=1e-4, atol=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5).flatmap(
        lambda n: st.tuples(*[arrays(np.float64, (n, n), elements=st.floats(1.01, 8.0))] * 2)))
    def test_swap_symmetric_and_bounded(self, pair):
        A, B = pair
        loss = vsl_loss(A, B)[0]
        assert loss == vsl_loss(B, A)[0]
        assert 0.0 <= loss < 1.0

    def test_tsl_on_symmetric_input(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((4, 4))
        S = (X + X.T) / 2
        C = rng.uniform(0, 1, (4, 4))
        C = (C + C.T) / 2
        out = total_loss(S, C, C, LossConfig(include_tsl=True, tau=0.1))
        assert out.tsl == pytest.approx(out.vsl, abs=1e-15)


class TestTotal:
    def setup_method(self):
        rng = np.random.default_rng(8)
        self.S = rng.uniform(-1, 1, (5, 5))
        self.C = rng.uniform(0, 1, (5, 5))

    def test_beta_zero(self):
        cfg = LossConfig(alpha=1.7, beta=0.0)
        out = total_loss(self.S, self.C, None, cfg)
        trip, grad = triplet_loss(self.S, cfg)
        assert out.total == pytest.approx(1.7 * trip, abs=1e-12)
        np.testing.assert_allclose(out.grad_S, 1.7 * grad, atol=1e-12)
        assert out.vsl > 0  # still reported

    def test_alpha_zero_matching_ranks(self):
        out = total_loss(self.S, self.S, None, LossConfig(alpha=0.0))
        assert out.total == 0.0

    def test_needs_text_matrix_for_tsl(self):
        with pytest.raises(ValueError):
            total_loss(self.S, self.C, None, LossConfig(include_tsl=True))

    @pytest.mark.parametrize("include_tsl", [False, True])
    def test_finite_difference(self, include_tsl):
        rng = np.random.default_rng(9)
        cfg = LossConfig(tau=0.1, include_tsl=include_tsl)
        done = 0
        while done < 3:
            S = rng.uniform(-1, 1, (4, 4))
            C = rng.uniform(0, 1, (4, 4))
            TC = rng.uniform(0, 1, (4, 4))
            if not hinge_safe(S, cfg.margin):
                continue
            if not ratio_safe(rank_matrix(S, 0.1), rank_matrix(C, 0.1)):
                continue
            if not ratio_safe(rank_matrix(S.T, 0.1), rank_matrix(TC, 0.1)):
                continue
            numeric = central_difference(lambda x: total_loss(x, C, TC, cfg).total, S)
            np.testing.assert_allclose(total_loss(S, C, TC, cfg).grad_S, numeric, rtol=1e-4, atol=1e-8)
            done += 1

    def test_config_validation(self):
        with pytest.raises(ValueError, match="non-positive temperature"):
            LossConfig(tau=0.0)
        with pytest.raises(ValueError):
            LossConfig(negative_mining="softest")


class TestOrderRecovery:
    @pytest.mark.parametrize("seed", range(3))
    def test_minimising_vsl_recovers_semantic_order(self, seed):
        # start inside the sigmoid window; from far apart scores the gradient vanishes at small tau
        from vsl.checks import gapped_rows
        from vsl.smooth_rank import rank_matrix_vjp

        tau = 0.01
        rng = np.random.default_rng(seed)
        C = gapped_rows(rng, 5, 10 * tau)
        CR = rank_matrix(C, tau)
        S = rng.uniform(-tau, tau, (5, 5))
        m, v = np.zeros_like(S), np.zeros_like(S)
        for t in range(1, 2001):
            SR, vjp = rank_matrix_vjp(S, tau)
            loss, g = vsl_loss(SR, CR)
            G = vjp(g)
            m = 0.9 * m + 0.1 * G
            v = 0.999 * v + 0.001 * G * G
            S -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert loss < 1e-3
        np.testing.assert_array_equal(np.argsort(S, axis=1), np.argsort(C, axis=1))
