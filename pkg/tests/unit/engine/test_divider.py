#!/usr/bin/env python3
"""
Unit tests for the radix-2 non-restoring divider
"""

import numpy as np
import pytest

from int_transformer.errors import KernelError
from int_transformer.kernels import DIVIDER_WIDTH, nonrestoring_div


def _truncated_div(num: int, den: int) -> int:
    quotient = abs(num) // den
    return -quotient if num < 0 else quotient


class TestNonRestoringDivider:
    """Test nonrestoring_div against truncated integer division"""

    @pytest.mark.parametrize('num, den, expected', [
        (7, 2, 3),
        (65535, 256, 255),
        (-9, 4, -2),
        (0, 5, 0),
        (3, 7, 0),
        (-3, 7, 0),
        (1, 1, 1),
    ])
    def test_examples(self, num, den, expected):
        assert nonrestoring_div(num, den) == expected

    def test_exhaustive_grid(self):
        """num in [-4096, 4096), den in [1, 64]"""
        for den in range(1, 65):
            for num in range(-4096, 4096):
                assert nonrestoring_div(num, den) == _truncated_div(num, den), (num, den)

    def test_random_wide_pairs(self):
        """10^5 random 32-bit numerators over 16-bit divisors"""
        rng = np.random.default_rng(2024)
        nums = rng.integers(-(1 << 31), 1 << 31, size=100_000).tolist()
        dens = rng.integers(1, 1 << 16, size=100_000).tolist()
        for num, den in zip(nums, dens):
            assert nonrestoring_div(num, den) == _truncated_div(num, den), (num, den)

    def test_register_limits(self):
        limit = 1 << (DIVIDER_WIDTH - 1)
        assert nonrestoring_div(limit - 1, 3) == (limit - 1) // 3
        assert nonrestoring_div(-limit, 2) == -(limit // 2)
        with pytest.raises(KernelError):
            nonrestoring_div(limit, 3)

    @pytest.mark.parametrize('den', [0, -1, -64])
    def test_non_positive_divisor_raises(self, den):
        with pytest.raises(KernelError):
            nonrestoring_div(10, den)
