#!/usr/bin/env python3
"""
Tests for the BSS-eval decomposition and metrics
"""

import csv
import os
import tempfile

import numpy as np
import pytest
from numpy.testing import assert_allclose

from pyavsep.bss import (METRIC_CAP_DB, BssDecomposition, MetricRow, SeparationMetricError, bss_decompose,
                         class_pair_summary, evaluate_pair, mean_metrics, metrics, mixture_baseline,
                         write_metric_rows, write_summary)


def _orthogonal_pair(length, seed=0):
    rng = np.random.default_rng(seed)
    r1, r2 = rng.standard_normal(length), rng.standard_normal(length)
    r2 -= r1 * (r2 @ r1) / (r1 @ r1)
    return r1, r2


def _dense_projection(refs, est, filter_len):
    length = refs.shape[1]
    columns = []
    for ref in refs:
        for shift in range(filter_len):
            col = np.zeros(length + filter_len - 1)
            col[shift:shift + length] = ref
            columns.append(col)
    basis = np.stack(columns, axis=1)
    target = np.pad(est, (0, filter_len - 1))
    coeffs, *_ = np.linalg.lstsq(basis, target, rcond=None)
    return basis @ coeffs


class TestDecomposition:
    @pytest.mark.parametrize("filter_len", [1, 4, 8])
    def test_matches_dense_least_squares(self, filter_len):
        rng = np.random.default_rng(filter_len)
        refs = rng.standard_normal((2, 256))
        est = 0.8 * refs[0] + 0.3 * np.roll(refs[1], 2) + 0.1 * rng.standard_normal(256)
        d = bss_decompose(est, list(refs), 0, filter_len)
        target = _dense_projection(refs[:1], est, filter_len)
        both = _dense_projection(refs, est, filter_len)
        assert_allclose(d.s_target, target, atol=1e-8)
        assert_allclose(d.e_interf, both - target, atol=1e-8)
        assert_allclose(d.e_artif, np.pad(est, (0, filter_len - 1)) - both, atol=1e-8)

    def test_components_sum_to_estimate(self):
        rng = np.random.default_rng(0)
        refs = rng.standard_normal((2, 200))
        est = rng.standard_normal(200)
        d = bss_decompose(est, list(refs), 1, 8)
        assert_allclose(d.s_target + d.e_interf + d.e_artif, np.pad(est, (0, 7)), atol=1e-9)

    def test_explained_energy_grows_with_filter_len(self):
        rng = np.random.default_rng(3)
        refs = rng.standard_normal((2, 300))
        est = 0.6 * refs[0] + 0.4 * np.roll(refs[1], 5) + 0.2 * rng.standard_normal(300)
        explained = []
        for filter_len in (1, 2, 4, 8, 16, 32):
            d = bss_decompose(est, list(refs), 0, filter_len)
            explained.append(np.sum((d.s_target + d.e_interf) ** 2))
        assert np.all(np.diff(explained) >= -1e-9 * explained[-1])
        assert explained[-1] > explained[0]

    @pytest.mark.parametrize("filter_len", [1, 8, 64])
    def test_components_are_orthogonal(self, filter_len):
        rng = np.random.default_rng(filter_len + 10)
        refs = rng.standard_normal((2, 400))
        est = 0.7 * refs[1] + 0.3 * np.roll(refs[0], 3) + 0.3 * rng.standard_normal(400)
        d = bss_decompose(est, list(refs), 1, filter_len)
        scale = np.sum(est ** 2)
        assert abs(d.e_interf @ d.e_artif) < 1e-8 * scale
        assert abs(d.s_target @ d.e_interf) < 1e-8 * scale
        assert abs(d.s_target @ d.e_artif) < 1e-8 * scale

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bss_decompose(np.zeros(10), [np.zeros(11)], 0)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            bss_decompose(np.ones(10), [np.ones(10)], 1, 1)

    def test_singular_gram(self):
        with pytest.raises(SeparationMetricError):
            bss_decompose(np.ones(64), [np.zeros(64), np.zeros(64)], 0, 4)


class TestMetrics:
    def test_perfect_estimate_hits_cap(self):
        r1, r2 = _orthogonal_pair(256)
        m = metrics(bss_decompose(r1, [r1, r2], 0, 8))
        assert m.sdr == m.sir == m.sar == METRIC_CAP_DB

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        refs = list(rng.standard_normal((2, 256)))
        est = refs[0] + 0.2 * refs[1] + 0.05 * rng.standard_normal(256)
        a = metrics(bss_decompose(est, refs, 0, 4))
        b = metrics(bss_decompose(3.0 * est, refs, 0, 4))
        assert b.sdr == pytest.approx(a.sdr, abs=1e-6)
        assert b.sir == pytest.approx(a.sir, abs=1e-6)
        assert b.sar == pytest.approx(a.sar, abs=1e-6)

    def test_orthogonal_noise_at_20db(self):
        rng = np.random.default_rng(2)
        s = rng.standard_normal(1024)
        noise = rng.standard_normal(1024)
        noise -= s * (noise @ s) / (s @ s)
        noise *= np.sqrt((s @ s) / (noise @ noise) / 100.0)
        m = metrics(bss_decompose(s + noise, [s], 0, 1))
        assert m.sdr == pytest.approx(20.0, abs=0.1)
        assert m.sir == METRIC_CAP_DB

    def test_interference_energy(self):
        r1, r2 = _orthogonal_pair(512, seed=3)
        d = bss_decompose(r1 + 0.5 * r2, [r1, r2], 0, 1)
        assert np.sum(d.e_interf ** 2) == pytest.approx(0.25 * np.sum(r2 ** 2), rel=1e-8)
        assert_allclose(d.s_target, r1, atol=1e-8)

    def test_no_target_projection(self):
        d = BssDecomposition(np.zeros(4), np.ones(4), np.zeros(4), 1)
        with pytest.raises(SeparationMetricError):
            metrics(d)


class TestEvaluatePair:
    def test_finds_swapped_assignment(self):
        r1, r2 = _orthogonal_pair(256, seed=4)
        result = evaluate_pair([r2 + 0.1 * r1, r1 + 0.1 * r2], [r1, r2], 4)
        assert result.permutation == (1, 0)
        assert all(m.sir > 15 for m in result.metrics)

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_pair([np.ones(8)], [np.ones(8), np.ones(8)])

    def test_mixture_baseline_is_near_zero_sir_for_equal_sources(self):
        r1, r2 = _orthogonal_pair(512, seed=5)
        r2 *= np.linalg.norm(r1) / np.linalg.norm(r2)
        result = mixture_baseline(r1 + r2, [r1, r2], 1)
        for m in result.metrics:
            assert m.sir == pytest.approx(0.0, abs=1e-6)
            assert m.sdr == pytest.approx(0.0, abs=1e-6)


class TestReports:
    def _rows(self):
        return [
            MetricRow("a", 0, 1.0, 2.0, 3.0, "0,1", "0-1"),
            MetricRow("a", 1, 3.0, 4.0, 5.0, "0,1", "0-1"),
            MetricRow("b", 2, float("nan"), float("nan"), float("nan"), "", "1-2"),
            MetricRow("b", 1, 5.0, 6.0, 7.0, "1,0", "1-2"),
        ]

    def test_mean_ignores_nan(self):
        means = mean_metrics(self._rows())
        assert means["count"] == 4
        assert means["SDR"] == pytest.approx(3.0)

    def test_empty_mean(self):
        assert np.isnan(mean_metrics([])["SDR"])

    def test_class_pair_summary_sorted(self):
        summary = class_pair_summary(self._rows())
        assert list(summary) == ["0-1", "1-2"]
        assert summary["0-1"]["SIR"] == pytest.approx(3.0)
        assert summary["1-2"]["SAR"] == pytest.approx(7.0)

    def test_writers(self):
        with tempfile.TemporaryDirectory() as tmp:
            rows_path = os.path.join(tmp, "rows.csv")
            write_metric_rows(rows_path, self._rows())
            with open(rows_path, newline="", encoding="utf-8") as f:
                table = list(csv.reader(f))
            assert table[0] == ["clip_id", "source_class", "SDR", "SIR", "SAR", "permutation"]
            assert len(table) == 5
            assert table[1][2] == "1.0000"

            summary_path = os.path.join(tmp, "summary.csv")
            write_summary(summary_path, {"m": mean_metrics(self._rows())})
            with open(summary_path, newline="", encoding="utf-8") as f:
                table = list(csv.reader(f))
            assert table[1][:2] == ["m", "4"]


if __name__ == "__main__":
    pytest.main([__file__])
