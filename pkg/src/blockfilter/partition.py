"""Contiguous block partitioning of a series."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Partition:
    """K contiguous half-open index ranges ``[start, stop)`` covering ``0..n-1``."""

    n: int
    K: int
    blocks: tuple[tuple[int, int], ...]

    @property
    def m(self) -> int:
        return self.blocks[0][1] - self.blocks[0][0]

    def __len__(self) -> int:
        return self.K

    def block(self, j: int, y):
        start, stop = self.blocks[j]
        return y[start:stop]


def partition(n: int, K: int) -> Partition:
    """Split ``n`` observations into ``K`` consecutive blocks.

    The first K-1 blocks get ``ceil(n/K)`` points and the last block takes
    the (possibly shorter) remainder. If that would leave the last block
    empty, ``floor(n/K)`` is used for the first K-1 blocks instead and the
    last block absorbs the surplus.
    """
    if not (1 <= K <= n):
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    m = math.ceil(n / K)
    if (K - 1) * m >= n:
        m = n // K
    bounds = [j * m for j in range(K)] + [n]
    blocks = tuple((bounds[j], bounds[j + 1]) for j in range(K))
    return Partition(n=n, K=K, blocks=blocks)


def block_with_context(p: Partition, j: int, y) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(block j-1, block j)``; the context is empty for ``j == 0``."""
    if not (0 <= j < p.K):
        raise IndexError(f"block index {j} out of range for K={p.K}")
    y = np.asarray(y)
    if y.shape[0] != p.n:
        raise ValueError(f"series has length {y.shape[0]}, partition expects {p.n}")
    block = p.block(j, y)
    context = p.block(j - 1, y) if j > 0 else y[:0]
    return context, block
