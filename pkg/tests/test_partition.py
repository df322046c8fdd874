import numpy as np
import pytest

from blockfilter.partition import block_with_context, partition


class TestPartition:
    def test_exact_division(self):
        assert partition(12, 3).blocks == ((0, 4), (4, 8), (8, 12))

    def test_short_last_block(self):
        p = partition(10, 3)
        assert p.blocks == ((0, 4), (4, 8), (8, 10))
        assert p.m == 4

    def test_ten_thousand(self):
        p = partition(10_000, 10)
        assert all(b - a == 1000 for a, b in p.blocks)
        assert len(p) == 10

    def test_floor_fallback_keeps_last_block_nonempty(self):
        # ceil(9/4) = 3 would leave the fourth block empty
        p = partition(9, 4)
        assert p.blocks == ((0, 2), (2, 4), (4, 6), (6, 9))
        assert p.blocks[-1][1] == 9

    @pytest.mark.parametrize("n,K", [(10, 0), (5, 6)])
    def test_invalid(self, n, K):
        with pytest.raises(ValueError):
            partition(n, K)

    @pytest.mark.parametrize("n", [1, 7, 50, 101])
    def test_concatenation_reproduces_series(self, n):
        y = np.arange(n) * 1.5
        for K in range(1, n + 1, max(1, n // 7)):
            p = partition(n, K)
            parts = [p.block(j, y) for j in range(K)]
            assert all(x.size > 0 for x in parts)
            np.testing.assert_array_equal(np.concatenate(parts), y)


class TestContext:
    def test_first_block_has_no_context(self):
        y = np.arange(12.0)
        ctx, blk = block_with_context(partition(12, 3), 0, y)
        assert ctx.size == 0
        np.testing.assert_array_equal(blk, y[:4])

    def test_adjacent(self):
        y = np.arange(12.0)
        ctx, blk = block_with_context(partition(12, 3), 1, y)
        np.testing.assert_array_equal(ctx, y[:4])
        np.testing.assert_array_equal(blk, y[4:8])

    def test_last_block(self):
        y = np.arange(10.0)
        ctx, blk = block_with_context(partition(10, 3), 2, y)
        np.testing.assert_array_equal(ctx, y[4:8])
        np.testing.assert_array_equal(blk, y[8:])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            block_with_context(partition(10, 3), 3, np.arange(10.0))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            block_with_context(partition(10, 3), 0, np.arange(9.0))
