import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_expert
from moecompress.analysis import (COLLAPSE_CAP, alignment_report, expert_distance, functional_subspace, jsd,
                                  ngram_diversity, relative_l2, sv_alignment)
from moecompress.calibration import CalibStats, select_experts
from moecompress.errors import DomainError
from moecompress.merge import apply_permutation
from moecompress.moe import ExpertWeights, MoeLayer, RouterConfig


def mean_stats(points):
    points = np.asarray(points, dtype=float)
    K, d = points.shape
    return CalibStats(num_experts=K, d=d, top_k=1, gate_mode="renormalized", token_count=K,
                      nu=np.ones(K, dtype=np.int64), sum_gate_norm=np.zeros(K), sum_norm=np.zeros(K),
                      act_sum=None, act_active_sum=points, gate_trace=np.zeros((K, K)))


def planted_points(rng, groups=4, per_group=2, d=6, spread=10.0):
    centres = rng.standard_normal((groups, d)) * spread
    return np.repeat(centres, per_group, axis=0) + 0.1 * rng.standard_normal((groups * per_group, d))


class TestFunctionalSubspace:
    def test_pruned_points_are_exact_subset(self):
        orig = mean_stats(planted_points(np.random.default_rng(0)))
        keep = [0, 3, 4, 6]
        rep = functional_subspace(orig, select_experts(orig, keep), orig)
        for i, k in enumerate(keep):
            assert rep.projected["pruned"][i].tobytes() == rep.projected["original"][k].tobytes()

    def test_total_collapse_sentinel(self):
        pts = planted_points(np.random.default_rng(1))
        centre = np.tile(pts.mean(axis=0), (4, 1))
        rep = functional_subspace(mean_stats(pts), mean_stats(pts[:4]), mean_stats(centre))
        assert rep.total_variance["merged"] == pytest.approx(0.0, abs=1e-20)
        assert rep.collapse_ratio == COLLAPSE_CAP

    def test_merging_across_groups_collapses(self):
        pts = planted_points(np.random.default_rng(2))
        pruned = pts[[0, 2, 4, 6]]  # one survivor per group
        merged = np.array([(pts[0] + pts[2]) / 2, (pts[1] + pts[3]) / 2, (pts[4] + pts[6]) / 2,
                           (pts[5] + pts[7]) / 2])
        rep = functional_subspace(mean_stats(pts), mean_stats(pruned), mean_stats(merged))
        centred = pts - pts.mean(axis=0)
        basis = np.linalg.svd(centred, full_matrices=False)[2][:2]

        def direct(p):
            return float(np.sum(np.var((p - pts.mean(axis=0)) @ basis.T, axis=0)))

        assert rep.total_variance["pruned"] == pytest.approx(direct(pruned), rel=1e-10)
        assert rep.total_variance["merged"] == pytest.approx(direct(merged), rel=1e-10)
        assert rep.total_variance["merged"] < rep.total_variance["pruned"]
        assert rep.collapse_ratio == pytest.approx(direct(pts) / direct(merged), rel=1e-10)

    def test_too_few_experts(self):
        s = mean_stats(np.eye(2))
        with pytest.raises(DomainError):
            functional_subspace(s, s, s)

    def test_report_formats(self):
        pts = planted_points(np.random.default_rng(3))
        rep = functional_subspace(mean_stats(pts), mean_stats(pts[:3]), mean_stats(pts[:5]))
        rows = list(rep.csv_rows())
        assert rows[0] == "variant,expert_id,pc1,pc2"
        assert len(rows) == 1 + 8 + 3 + 5
        out = rep.to_json()
        assert out["counts"] == {"original": 8, "pruned": 3, "merged": 5}
        assert all(v >= 0 for v in out["total_variance"].values())


class TestDistance:
    def test_self(self):
        e = random_expert(np.random.default_rng(4), 4, 6)
        layer = MoeLayer(RouterConfig(np.ones((2, 4)), top_k=1), (e, e))
        assert expert_distance(layer, 0, 0) == 0.0 and expert_distance(layer, 0, 1) == 0.0

    def test_scaled(self):
        e = random_expert(np.random.default_rng(5), 4, 6)
        twice = ExpertWeights(2 * e.w_up, 2 * e.w_gate, 2 * e.w_down)
        assert relative_l2(e, twice) == pytest.approx(1.0, abs=1e-15)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(6)
        a, b = random_expert(rng, 4, 6), random_expert(rng, 4, 6)
        vals = []
        for name in ("w_up", "w_gate", "w_down"):
            wa, wb = getattr(a, name), getattr(b, name)
            vals.append(np.sqrt(sum((x - y) ** 2 for x, y in zip(wa.ravel(), wb.ravel())))
                        / np.sqrt(sum(x**2 for x in wa.ravel())))
        assert relative_l2(a, b) == pytest.approx(np.mean(vals), abs=1e-12)

    def test_zero_reference(self):
        z = ExpertWeights(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(DomainError):
            relative_l2(z, random_expert(np.random.default_rng(7), 2, 2))


class TestAlignment:
    def test_self(self):
        e = random_expert(np.random.default_rng(8), 8, 12)
        assert sv_alignment(e, e, 4) == pytest.approx(1.0, abs=1e-8)

    def test_shuffled_with_matching(self):
        rng = np.random.default_rng(9)
        e = random_expert(rng, 8, 12)
        shuffled = apply_permutation(e, rng.permutation(12))
        assert sv_alignment(e, shuffled, 4, permute_first=True) == pytest.approx(1.0, abs=1e-8)

    def test_random_pairs_below_half(self):
        rng = np.random.default_rng(10)
        vals = [sv_alignment(random_expert(rng, 16, 16), random_expert(rng, 16, 16), 4) for _ in range(100)]
        assert np.mean(vals) < 0.5 and max(vals) < 0.5

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(11)
        a, b = random_expert(rng, 6, 10), random_expert(rng, 6, 10)
        p = rng.permutation(10)
        assert sv_alignment(apply_permutation(a, p), apply_permutation(b, p), 3) == pytest.approx(
            sv_alignment(a, b, 3), abs=1e-10)

    def test_degenerate_flag(self):
        e = ExpertWeights(np.eye(4), np.eye(4), np.eye(4))
        rep = alignment_report(e, e, 2)
        assert rep.degenerate and 0.0 <= rep.sv_alignment <= 1.0
        assert not alignment_report(*[random_expert(np.random.default_rng(12), 5, 7)] * 2, 2).degenerate

    def test_rank_range(self):
        e = random_expert(np.random.default_rng(13), 3, 5)
        with pytest.raises(DomainError):
            sv_alignment(e, e, 4)


class TestNgram:
    def test_examples(self):
        assert ngram_diversity("a a a a", 1) == 0.25
        assert ngram_diversity("a b c d e", 3) == 1.0
        assert ngram_diversity("a b a b", 2) == pytest.approx(2 / 3)
        assert ngram_diversity([1, 2, 3], 1) == 1.0

    def test_too_short(self):
        with pytest.raises(DomainError):
            ngram_diversity("a b", 3)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.integers(1, 4))
    def test_range_and_self_concatenation(self, seq, n):
        if len(seq) < n:
            return
        v = ngram_diversity(seq, n)
        assert 0 < v <= 1
        assert ngram_diversity(seq + seq, n) <= v + 1e-15


class TestJsd:
    def test_examples(self):
        assert jsd([0.3, 0.7], [0.3, 0.7]) == 0.0
        assert jsd([1, 0], [0, 1]) == pytest.approx(1.0, abs=1e-12)
        hand = 0.5 * (0.5 * np.log2(0.5 / 0.75) + 0.5 * np.log2(0.5 / 0.25)) + 0.5 * np.log2(1 / 0.75)
        assert jsd([0.5, 0.5], [1, 0]) == pytest.approx(hand, abs=1e-15)
        assert jsd([0.5, 0.5], [1, 0]) == pytest.approx(0.3113, abs=1e-4)

    def test_rowwise(self):
        p = np.array([[1.0, 0.0], [0.5, 0.5]])
        q = np.array([[0.0, 1.0], [0.5, 0.5]])
        assert np.allclose(jsd(p, q), [1.0, 0.0], atol=1e-12)

    def test_errors(self):
        with pytest.raises(DomainError):
            jsd([0.5, 0.5], [1.0, 0.0, 0.0])
        with pytest.raises(DomainError):
            jsd([0.5, 0.6], [1.0, 0.0])
        with pytest.raises(DomainError):
            jsd([1.5, -0.5], [1.0, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=8), st.lists(st.floats(0, 1), min_size=2, max_size=8))
    def test_symmetric_and_bounded(self, a, b):
        n = min(len(a), len(b))
        a, b = np.array(a[:n]), np.array(b[:n])
        if a.sum() == 0 or b.sum() == 0:
            return
        p, q = a / a.sum(), b / b.sum()
        v = jsd(p, q)
        assert 0.0 <= v <= 1.0
        assert abs(v - jsd(q, p)) <= 1e-12
