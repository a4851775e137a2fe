#!/usr/bin/env python3
"""
Tests for the finite-difference gradient check suite
"""

import numpy as np
import pytest

from pyavsep import tensor as T
from pyavsep.gradcheck import TOLERANCE, GradCheckResult, check_end_to_end, check_ops


class TestGradCheckResult:
    def test_passed(self):
        assert GradCheckResult("a", TOLERANCE / 2).passed
        assert not GradCheckResult("a", TOLERANCE).passed
        assert not GradCheckResult("a", float("nan")).passed


class TestSuites:
    def test_every_op(self):
        with T.precision(64):
            results = check_ops(np.random.default_rng(0))
        names = {r.name.split("[")[0] for r in results}
        assert {"conv2d", "conv_transpose2d", "weighted_pool", "max_pool2x2"} <= names
        assert all(r.passed for r in results), [r for r in results if not r.passed]

    @pytest.mark.parametrize("mask_kind", ["binary", "ratio"])
    def test_end_to_end(self, mask_kind):
        with T.precision(64):
            results = check_end_to_end(np.random.default_rng(1), mask_kind)
        assert len(results) > 10
        assert all(r.passed for r in results), [r for r in results if not r.passed]

    def test_needs_64_bit(self):
        with T.precision(32):
            with pytest.raises(ValueError):
                check_ops(np.random.default_rng(0))


if __name__ == "__main__":
    pytest.main([__file__])
