import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from expquant.entropy import (BinEdges, EmpiricalPmf, HistogramSpec, build_histogram_spec, empirical_pmf,
                              entropy_report, fit_histogram_spec, histogram_entropy, mean_quantization_error,
                              per_class_entropy, sum_entropy)
from expquant.errors import DataCorruptionError, InvalidInputError
from expquant.quantizer import QuantizerConfig


def cfg(M, K):
    return QuantizerConfig(M, K, M)


class TestEmpiricalPmf:
    def test_identical_combinations_one_hot(self):
        pmf = empirical_pmf([(1, 3, 0)] * 7, cfg(3, 4))
        assert pmf.sample_count == 7
        assert pmf.probs.tolist() == [[0, 1, 0, 0], [0, 0, 0, 1], [1, 0, 0, 0]]

    def test_counting(self):
        assert empirical_pmf([(0,), (1,), (0,), (1,)], cfg(1, 2)).probs.tolist() == [[0.5, 0.5]]

    def test_matches_recount(self):
        rng = np.random.default_rng(0)
        combos = [tuple(int(v) for v in rng.integers(0, 5, size=3)) for _ in range(1000)]
        pmf = empirical_pmf(combos, cfg(3, 5))
        for m in range(3):
            counts = Counter(c[m] for c in combos)
            for k in range(5):
                assert pmf.probs[m, k] == counts[k] / 1000

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            empirical_pmf([], cfg(1, 2))

    def test_out_of_range(self):
        with pytest.raises(DataCorruptionError):
            empirical_pmf([(0,), (2,)], cfg(1, 2))

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=300))
    def test_rows_sum_to_one(self, combos):
        pmf = empirical_pmf(combos, cfg(2, 7))
        np.testing.assert_allclose(pmf.probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all((pmf.probs >= 0) & (pmf.probs <= 1))


class TestSumEntropy:
    def test_uniform(self):
        assert sum_entropy(EmpiricalPmf(np.full((16, 64), 1 / 64), 64)) == pytest.approx(96.0, abs=1e-9)

    def test_one_hot(self):
        assert sum_entropy(EmpiricalPmf(np.eye(3, 5), 1)) == 0.0

    def test_coins(self):
        probs = np.array([[0.5, 0.5, 0, 0], [0.5, 0.5, 0, 0]])
        assert sum_entropy(EmpiricalPmf(probs, 2)) == 2.0

    @settings(max_examples=50)
    @given(st.integers(1, 4), st.integers(1, 8), st.integers(0, 10_000))
    def test_bounds_and_permutation(self, M, K, seed):
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet(np.ones(K), size=M)
        h = sum_entropy(EmpiricalPmf(probs, 1))
        assert -1e-12 <= h <= M * math.log2(K) + 1e-9
        perm = probs[:, rng.permutation(K)]
        assert sum_entropy(EmpiricalPmf(perm, 1)) == pytest.approx(h, abs=1e-12)


class TestPerClass:
    def test_single_sample_class(self):
        bits = per_class_entropy([(0, 1), (1, 1), (0, 0)], [0, 1, 1], cfg(2, 2))
        assert bits[0] == 0.0
        assert bits[1] == pytest.approx(2.0)

    def test_shared_combination(self):
        assert per_class_entropy([(2, 1)] * 4, [5] * 4, cfg(2, 3)) == {5: 0.0}

    def test_misaligned(self):
        with pytest.raises(InvalidInputError):
            per_class_entropy([(0,), (1,)], [0], cfg(1, 2))

    def test_pooled_is_label_weighted_mixture(self):
        rng = np.random.default_rng(1)
        codes = rng.integers(0, 4, size=(200, 3))
        labels = rng.integers(0, 3, size=200)
        pooled = empirical_pmf(codes, cfg(3, 4)).probs
        mix = sum(np.mean(labels == c) * empirical_pmf(codes[labels == c], cfg(3, 4)).probs for c in range(3))
        np.testing.assert_allclose(mix, pooled, atol=1e-12)


def brute_mean_error(values, bins):
    lo, hi = min(values), max(values)
    width = (hi - lo) / bins
    total = 0.0
    for v in values:
        i = 0
        while i < bins - 1 and v > lo + (i + 1) * width:
            i += 1
        total += abs(v - (lo + (i + 0.5) * width))
    return total / len(values)


class TestHistogramSpec:
    def test_constant(self):
        spec = build_histogram_spec([3.0, 3.0, 3.0])
        assert spec.num_bins == 1
        assert mean_quantization_error(np.array([3.0] * 3), spec.edges) <= spec.delta

    def test_two_points(self):
        spec = build_histogram_spec([0.0, 1.0])
        # mean error for {0, 1} with B uniform bins is 1/(2B); first B with 1/(2B) <= 1e-3
        b = 1
        while 1 / (2 * b) > 0.001:
            b += 1
        assert spec.num_bins == b == 500
        assert spec.delta == pytest.approx(0.001)

    @pytest.mark.parametrize("seed", range(8))
    def test_minimal_feasible(self, seed):
        values = np.random.default_rng(seed).normal(size=200)
        spec = build_histogram_spec(values)
        b = spec.num_bins
        assert brute_mean_error(values.tolist(), b) <= spec.delta + 1e-12
        if b > 1:
            assert brute_mean_error(values.tolist(), b - 1) > spec.delta

    def test_edges_span_range(self):
        values = np.array([-2.0, 0.5, 3.0])
        spec = build_histogram_spec(values, delta_fraction=0.1)
        assert spec.edges[0] == -2.0 and spec.edges[-1] == 3.0
        assert np.all(np.diff(spec.edges) > 0)


class TestHistogramEntropy:
    def test_constant_dimension(self):
        data = np.column_stack([np.full(6, 2.0), [0, 1, 0, 1, 0, 1]]).astype(float)
        spec = fit_histogram_spec(data)
        assert histogram_entropy(data[:, :1], HistogramSpec(spec.dims[:1])) == 0.0

    def test_two_occupied_bins(self):
        spec = HistogramSpec((BinEdges(np.array([0.0, 1.0, 2.0]), 0.0),))
        assert histogram_entropy(np.array([[0.0], [0.5], [1.5], [2.0]]), spec) == 1.0

    def test_edge_assignment(self):
        edges = BinEdges(np.array([0.0, 1.0, 2.0]), 0.0)
        # left edge joins bin 0; interior edge b_1 closes bin 0
        assert edges.bin_index([0.0, 1.0, 1.0000001, 2.0]).tolist() == [0, 0, 1, 1]

    def test_out_of_range(self):
        spec = HistogramSpec((BinEdges(np.array([0.0, 1.0]), 0.0),))
        with pytest.raises(InvalidInputError):
            histogram_entropy(np.array([[1.5]]), spec)

    @pytest.mark.parametrize("seed", range(5))
    def test_grid_aligned_equals_discrete(self, seed):
        rng = np.random.default_rng(seed)
        K, M = 6, 3
        codes = rng.integers(0, K, size=(500, M))
        data = codes.astype(float)  # centres of unit bins on [-0.5, K - 0.5]
        grid = HistogramSpec(tuple(BinEdges(np.arange(K + 1) - 0.5, 0.0) for _ in range(M)))
        discrete = sum_entropy(empirical_pmf(codes, QuantizerConfig(M, K, M)))
        assert abs(histogram_entropy(data, grid) - discrete) <= 1e-9
        assert abs(histogram_entropy(data, fit_histogram_spec(data)) - discrete) <= 1e-9


def test_report_schema():
    rep = entropy_report([(0, 1), (1, 1)], cfg(2, 2), labels=[0, 1])
    assert set(rep) == {"total_bits", "per_codebook_bits", "per_class_bits", "sample_count"}
    assert rep["total_bits"] == 1.0
    assert rep["per_codebook_bits"] == [1.0, 0.0]
    assert rep["per_class_bits"] == {"0": 0.0, "1": 0.0}
    assert rep["sample_count"] == 2
