import numpy as np
import pytest

from conftest import random_expert, random_layer, tokens
from moecompress.calibration import (CalibStats, TokenStream, calibrate, load_stats, merge_stats,
                                     representative_vectors, save_stats, select_experts)
from moecompress.errors import DimensionError, DomainError
from moecompress.moe import MoeLayer, RouterConfig, expert_forward, gate_compute


def naive_stats(layer, x):
    K, d = layer.num_experts, layer.d
    nu = np.zeros(K, dtype=np.int64)
    sgn, sn = np.zeros(K), np.zeros(K)
    act, act_active = np.zeros((K, d)), np.zeros((K, d))
    trace = np.zeros((K, len(x)))
    for t, xt in enumerate(x):
        g = gate_compute(layer.router, xt)
        for k in range(K):
            f = expert_forward(layer.experts[k], xt)
            act[k] += f
            trace[k, t] = g.gates[k]
            if k in g.active:
                nu[k] += 1
                sgn[k] += g.gates[k] * np.linalg.norm(f)
                sn[k] += np.linalg.norm(f)
                act_active[k] += f
    return nu, sgn, sn, act, act_active, trace


def forced_layer(rng):
    # expert 0's logit dominates every token with a positive first coordinate
    w = np.array([[100.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    return MoeLayer(RouterConfig(w, top_k=1), (random_expert(rng, 3, 4), random_expert(rng, 3, 4)))


class TestCalibrate:
    def test_forced_router(self):
        rng = np.random.default_rng(0)
        layer = forced_layer(rng)
        x = np.abs(rng.standard_normal((50, 3))) + 0.1
        s = calibrate(layer, x)
        assert s.nu.tolist() == [50, 0]
        assert np.all(s.gate_trace[1] == 0)

    def test_single_token(self, layer):
        x = tokens(1, 1, layer.d)
        s = calibrate(layer, x)
        g = gate_compute(layer.router, x[0])
        for k in range(layer.num_experts):
            want = g.gates[k] * np.linalg.norm(expert_forward(layer.experts[k], x[0])) if k in g.active else 0.0
            assert s.sum_gate_norm[k] == pytest.approx(want, abs=1e-14)

    @pytest.mark.parametrize("mode", ["zeroed", "renormalized"])
    def test_matches_naive(self, mode):
        layer = random_layer(seed=2, K=8, top_k=2, gate_mode=mode)
        x = tokens(2, 256, layer.d)
        s = calibrate(layer, x, chunk_size=100)
        nu, sgn, sn, act, act_active, trace = naive_stats(layer, x)
        assert np.array_equal(s.nu, nu)
        for got, want in [(s.sum_gate_norm, sgn), (s.sum_norm, sn), (s.act_sum, act),
                          (s.act_active_sum, act_active), (s.gate_trace, trace)]:
            assert np.allclose(got, want, atol=1e-10, rtol=0)
        assert np.allclose(s.mean_act_active, act_active / np.maximum(nu, 1)[:, None], atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_usage_total(self, seed):
        layer = random_layer(seed=seed, K=6, top_k=3)
        s = calibrate(layer, tokens(seed, 333, layer.d))
        assert int(s.nu.sum()) == 333 * 3
        assert np.all(s.nu <= s.token_count)

    def test_trace_columns_on_truncated_simplex(self, layer):
        s = calibrate(layer, tokens(3, 200, layer.d))
        assert np.all((s.gate_trace > 0).sum(axis=0) <= layer.top_k)
        assert np.allclose(s.gate_trace.sum(axis=0), 1.0, atol=1e-12)

    def test_active_only_skips_all_token_sums(self, layer):
        x = tokens(4, 64, layer.d)
        full, lean = calibrate(layer, x), calibrate(layer, x, active_only=True)
        assert lean.act_sum is None
        assert np.array_equal(full.nu, lean.nu)
        assert np.allclose(full.sum_gate_norm, lean.sum_gate_norm, atol=1e-12)
        with pytest.raises(DomainError):
            representative_vectors(lean)

    def test_token_stream_split_disjoint(self, layer):
        a = TokenStream(d=layer.d, count=10, seed=1, split="calib").array()
        b = TokenStream(d=layer.d, count=10, seed=1, split="eval").array()
        assert not np.allclose(a, b)
        assert np.array_equal(a, TokenStream(d=layer.d, count=10, seed=1).array())
        s = calibrate(layer, TokenStream(d=layer.d, count=10, seed=1))
        assert s.token_count == 10

    def test_errors(self, layer):
        with pytest.raises(DomainError):
            calibrate(layer, np.zeros((0, layer.d)))
        with pytest.raises(DimensionError):
            calibrate(layer, np.zeros((5, layer.d + 1)))


class TestMergeStats:
    def test_identity(self, layer):
        s = calibrate(layer, tokens(5, 40, layer.d))
        e = CalibStats.empty(layer.num_experts, layer.d, layer.top_k, layer.router.gate_mode)
        assert merge_stats(e, s) is s and merge_stats(s, e) is s

    def test_four_way_split(self, layer):
        x = tokens(6, 400, layer.d)
        whole = calibrate(layer, x)
        parts = [calibrate(layer, c) for c in np.array_split(x, 4)]
        left = merge_stats(merge_stats(merge_stats(parts[0], parts[1]), parts[2]), parts[3])
        right = merge_stats(parts[0], merge_stats(parts[1], merge_stats(parts[2], parts[3])))
        for m in (left, right):
            assert np.array_equal(m.nu, whole.nu)
            assert m.token_count == 400
            for f in ("sum_gate_norm", "sum_norm", "act_sum", "act_active_sum", "gate_trace"):
                assert np.allclose(getattr(m, f), getattr(whole, f), atol=1e-10)

    def test_nu_additive(self, layer):
        a, b = calibrate(layer, tokens(7, 30, layer.d)), calibrate(layer, tokens(8, 50, layer.d))
        assert np.array_equal(merge_stats(a, b).nu, a.nu + b.nu)
        ab, ba = merge_stats(a, b), merge_stats(b, a)
        assert np.array_equal(ab.nu, ba.nu)
        assert np.array_equal(ab.gate_trace[:, :30], a.gate_trace)
        assert np.array_equal(ba.gate_trace[:, :50], b.gate_trace)

    def test_mismatch(self, layer):
        other = random_layer(seed=9, K=4)
        a = calibrate(layer, tokens(9, 10, layer.d))
        with pytest.raises(DomainError):
            merge_stats(a, calibrate(other, tokens(9, 10, other.d)))
        with pytest.raises(DomainError):
            merge_stats(a, calibrate(random_layer(seed=10), tokens(9, 10, layer.d)))


class TestRepresentativeVectors:
    def test_constant_stream(self, layer):
        x = np.tile(tokens(11, 1, layer.d), (17, 1))
        A = representative_vectors(calibrate(layer, x))
        for k, e in enumerate(layer.experts):
            assert np.allclose(A[k], expert_forward(e, x[0]), atol=1e-14)

    def test_doubling(self, layer):
        x = tokens(12, 64, layer.d)
        a = representative_vectors(calibrate(layer, x))
        b = representative_vectors(calibrate(layer, np.vstack([x, x])))
        assert np.allclose(a, b, atol=1e-12, rtol=0)

    def test_direct_mean(self, layer):
        x = tokens(13, 100, layer.d)
        A = representative_vectors(calibrate(layer, x))
        direct = np.array([expert_forward(e, x).mean(axis=0) for e in layer.experts])
        assert np.allclose(A, direct, atol=1e-10)

    def test_zero_tokens(self, layer):
        with pytest.raises(DomainError):
            representative_vectors(CalibStats.empty(layer.num_experts, layer.d, 2, "renormalized"))


def test_select_experts(layer):
    s = calibrate(layer, tokens(14, 64, layer.d))
    sub = select_experts(s, [1, 4, 6])
    assert sub.num_experts == 3
    assert np.array_equal(sub.act_active_sum, s.act_active_sum[[1, 4, 6]])
    assert np.array_equal(sub.nu, s.nu[[1, 4, 6]])


def test_stats_file_round_trip(layer, tmp_path):
    s = calibrate(layer, tokens(15, 64, layer.d))
    save_stats(s, tmp_path / "s.bin")
    t = load_stats(tmp_path / "s.bin")
    assert t.layer_id == s.layer_id and t.token_count == s.token_count
    for f in ("nu", "sum_gate_norm", "sum_norm", "act_sum", "act_active_sum", "gate_trace"):
        assert np.array_equal(getattr(t, f), getattr(s, f))
