import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from resage import embedding as emb
from resage.embedding import PatParameters
from resage.networks import build_estimator_head


def dist(*values):
    return torch.tensor(values, dtype=torch.float64)


class TestDistributionStats:
    def test_one_hot(self):
        stats = emb.distribution_stats(dist(0, 0, 0, 0, 0, 0, 0, 1.0, 0, 0))
        assert stats.mean.item() == pytest.approx(7.0)
        assert stats.variance.item() == pytest.approx(0.0, abs=1e-12)
        assert stats.rounded.item() == 7

    def test_worked_example(self):
        # independent scalar computation: m = 0.5 + 0.6 = 1.1,
        # v = 0.2*1.21 + 0.5*0.01 + 0.3*0.81 = 0.49
        stats = emb.distribution_stats(dist(0.2, 0.5, 0.3))
        assert stats.mean.item() == pytest.approx(1.1)
        assert stats.variance.item() == pytest.approx(0.49)
        assert stats.rounded.item() == 1

    def test_uniform_rounds_half_up(self):
        stats = emb.distribution_stats(torch.full((100,), 0.01, dtype=torch.float64))
        assert stats.mean.item() == pytest.approx(49.5)
        assert stats.rounded.item() == 50

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            emb.distribution_stats(dist(0.5, 0.2))

    @given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_variance_nonnegative(self, raw):
        p = torch.tensor(raw, dtype=torch.float64)
        p = p / p.sum()
        stats = emb.distribution_stats(p)
        assert stats.variance.item() >= -1e-12


class TestEstimateDistribution:
    def test_zero_encoding_uniform(self, tiny_profile):
        head = build_estimator_head(tiny_profile, seed=0)
        e = torch.zeros(1, 16, 4, 4)
        p = emb.estimate_distribution(e, head)
        assert torch.allclose(p, torch.full_like(p, 1.0 / 10), atol=1e-7)

    def test_sums_to_one(self, tiny_profile):
        head = build_estimator_head(tiny_profile, seed=0)
        p = emb.estimate_distribution(torch.randn(5, 16, 4, 4), head)
        assert torch.allclose(p.sum(dim=-1), torch.ones(5), atol=1e-6)

    def test_hand_evaluated_softmax(self):
        # K=3 logits (ln2, 0, 0): softmax = (2,1,1)/4, checked by hand
        logits = torch.tensor([math.log(2.0), 0.0, 0.0], dtype=torch.float64)
        p = torch.softmax(logits, dim=-1)
        assert torch.allclose(p, dist(0.5, 0.25, 0.25), atol=1e-12)

    def test_spatial_permutation_invariance(self, tiny_profile):
        head = build_estimator_head(tiny_profile, seed=3)
        e = torch.randn(1, 16, 4, 4)
        perm = torch.randperm(16)
        shuffled = e.reshape(1, 16, -1)[:, :, perm].reshape(1, 16, 4, 4)
        assert torch.allclose(emb.estimate_distribution(e, head),
                              emb.estimate_distribution(shuffled, head), atol=1e-6)


class TestBases:
    def test_row_extraction(self):
        w = torch.eye(2)
        assert torch.equal(emb.aging_basis(w, 1), torch.tensor([0.0, 1.0]))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            emb.aging_basis(torch.eye(2), 2)

    def test_no_aliasing(self):
        w = torch.eye(2)
        row = emb.aging_basis(w, 0)
        row += 99.0
        assert torch.equal(w, torch.eye(2))

    def test_fractional_midpoint(self):
        w = torch.arange(64, dtype=torch.float64).reshape(32, 2)
        mid = emb.fractional_basis(w, 30.5)
        assert torch.allclose(mid, 0.5 * w[30] + 0.5 * w[31])

    def test_fractional_integral_exact(self):
        w = torch.randn(32, 4, dtype=torch.float64)
        assert torch.equal(emb.fractional_basis(w, 30.0), w[30])

    def test_fractional_scalar_interp(self):
        # a0=(0), a1=(4), t=0.25 -> 0.75*0 + 0.25*4 = 1.0
        w = torch.tensor([[0.0], [4.0]], dtype=torch.float64)
        assert emb.fractional_basis(w, 0.25).item() == pytest.approx(1.0)

    def test_fractional_out_of_range(self):
        with pytest.raises(ValueError):
            emb.fractional_basis(torch.eye(2), 1.5)

    @given(st.floats(0.0, 30.0), st.floats(1e-6, 0.99))
    @settings(max_examples=40, deadline=None)
    def test_continuity(self, t, eps):
        torch.manual_seed(0)
        w = torch.randn(32, 3, dtype=torch.float64)
        if t + eps > 31:
            eps = 31 - t
        gap = max((w[j] - w[j + 1]).norm().item() for j in range(31))
        delta = (emb.fractional_basis(w, t + eps) - emb.fractional_basis(w, t)).norm()
        assert delta.item() <= eps * gap + 1e-9


class TestPersonalizedEmbedding:
    def test_one_hot_degeneracy(self):
        w = torch.randn(10, 4, dtype=torch.float64)
        p = torch.zeros(10, dtype=torch.float64)
        p[3] = 1.0
        for t in (0, 5, 9):
            a = emb.personalized_target_embedding(p, w, float(t))
            assert torch.allclose(a, w[t], atol=1e-6)

    def test_self_target_degeneracy(self):
        w = torch.randn(10, 4, dtype=torch.float64)
        p = torch.softmax(torch.randn(10, dtype=torch.float64), dim=-1)
        m_rounded = emb.distribution_stats(p).rounded.item()
        a = emb.personalized_target_embedding(p, w, float(m_rounded))
        assert torch.allclose(a, p @ w, atol=1e-6)

    def test_worked_example(self):
        # hand evaluation: (0.75, 0.5) - (0, 1) + (1, 1) = (1.75, 0.5)
        w = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
        p = dist(0.5, 0.25, 0.25)
        a = emb.personalized_target_embedding(p, w, 2.0)
        assert torch.allclose(a, torch.tensor([1.75, 0.5], dtype=torch.float64))

    def test_ablation_mode_bypasses_residual(self):
        w = torch.randn(10, 4, dtype=torch.float64)
        p = torch.softmax(torch.randn(10, dtype=torch.float64), dim=-1)
        a = emb.personalized_target_embedding(p, w, 4.0, residual_enabled=False)
        assert torch.equal(a, emb.fractional_basis(w, 4.0))

    @given(st.integers(0, 9), st.floats(1.0, 3.0))
    @settings(max_examples=30, deadline=None)
    def test_linearity_in_bases(self, t, c):
        torch.manual_seed(42)
        w = torch.randn(10, 4, dtype=torch.float64)
        p = torch.softmax(torch.randn(10, dtype=torch.float64), dim=-1)
        a1 = emb.personalized_target_embedding(p, w, float(t))
        a2 = emb.personalized_target_embedding(p, c * w, float(t))
        assert torch.allclose(a2, c * a1, rtol=1e-6, atol=1e-9)

    @given(st.floats(0.0, 9.0), st.floats(0.0, 9.0))
    @settings(max_examples=30, deadline=None)
    def test_residual_independent_of_target(self, t1, t2):
        torch.manual_seed(7)
        w = torch.randn(10, 4, dtype=torch.float64)
        p = torch.softmax(torch.randn(10, dtype=torch.float64), dim=-1)
        r1 = emb.personalized_target_embedding(p, w, t1) - emb.fractional_basis(w, t1)
        r2 = emb.personalized_target_embedding(p, w, t2) - emb.fractional_basis(w, t2)
        assert torch.allclose(r1, r2, atol=1e-12)


class TestPat:
    def test_identity_at_initialization(self):
        pat = PatParameters(8)
        e = torch.randn(2, 8, 4, 4)
        a = torch.randn(2, 8)
        assert torch.equal(emb.apply_pat(e, a, pat), e)

    def test_broadcast_scaling(self):
        pat = PatParameters(4)
        with torch.no_grad():
            pat.gamma_projection.bias.fill_(1.0)   # gamma = 2
        e = torch.ones(1, 4, 3, 3)
        out = emb.apply_pat(e, torch.zeros(1, 4), pat)
        assert torch.allclose(out, torch.full_like(e, 2.0))

    def test_scalar_affine(self):
        # gamma=(1,-1), beta=(0.5,0), e=(3,4) -> (3.5,-4)
        pat = PatParameters(2)
        with torch.no_grad():
            pat.gamma_projection.bias.copy_(torch.tensor([0.0, -2.0]))
            pat.beta_projection.bias.copy_(torch.tensor([0.5, 0.0]))
        e = torch.tensor([[[[3.0]], [[4.0]]]])
        out = emb.apply_pat(e, torch.zeros(1, 2), pat)
        assert torch.allclose(out.reshape(-1), torch.tensor([3.5, -4.0]))

    def test_beta_disabled_skips_shift(self):
        pat = PatParameters(2, beta_enabled=False)
        with torch.no_grad():
            pat.beta_projection.bias.fill_(5.0)
        e = torch.randn(1, 2, 2, 2)
        assert torch.equal(emb.apply_pat(e, torch.zeros(1, 2), pat), e)

    def test_dimension_mismatch(self):
        pat = PatParameters(4)
        with pytest.raises(ValueError):
            emb.apply_pat(torch.randn(1, 8, 2, 2), torch.randn(1, 4), pat)


class TestAnchorInterpolation:
    def test_center_is_anchor(self):
        w = torch.randn(10, 3, dtype=torch.float64)
        groups = [(0, 4), (5, 9)]
        a = emb.anchor_interpolation_embedding(w, groups, 2.0)
        assert torch.allclose(a, w[0:5].mean(dim=0))

    def test_midpoint(self):
        w = torch.randn(40, 3, dtype=torch.float64)
        groups = [(20, 30), (31, 39)]
        anchor_a = w[20:31].mean(dim=0)   # center 25
        anchor_b = w[31:40].mean(dim=0)   # center 35
        a = emb.anchor_interpolation_embedding(w, groups, 30.0)
        assert torch.allclose(a, 0.5 * anchor_a + 0.5 * anchor_b)

    def test_scalar_worked_example(self):
        # rows (0),(2),(10),(14), groups {0-1},{2-3}: anchors 1@0.5, 12@2.5;
        # t=1.5 -> 1 + 0.5*(12-1) = 6.5
        w = torch.tensor([[0.0], [2.0], [10.0], [14.0]], dtype=torch.float64)
        a = emb.anchor_interpolation_embedding(w, [(0, 1), (2, 3)], 1.5)
        assert a.item() == pytest.approx(6.5)

    def test_clamps_outside_span(self):
        w = torch.tensor([[0.0], [2.0], [10.0], [14.0]], dtype=torch.float64)
        a = emb.anchor_interpolation_embedding(w, [(0, 1), (2, 3)], 0.0)
        assert a.item() == pytest.approx(1.0)

    def test_malformed_groups(self):
        w = torch.randn(10, 2)
        with pytest.raises(ValueError):
            emb.anchor_interpolation_embedding(w, [(0, 4), (6, 9)], 5.0)
        with pytest.raises(ValueError):
            emb.anchor_interpolation_embedding(w, [(0, 9)], 11.0)
