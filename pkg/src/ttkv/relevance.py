"""Block relevance scoring and top-k selection.

A block's score is the inner product of the query with the block's key
centroid (mean of its full-precision keys, taken before quantization).
Centroids live in fast memory, so scoring moves no slow-tier bytes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockScore:
    block_id: int
    score: float


@dataclass(frozen=True)
class SelectionPolicy:
    """How many slow blocks to fetch: an absolute ``k`` or a fraction."""

    k: int | None = None
    fetch_fraction: float | None = 0.45

    def __post_init__(self) -> None:
        if self.k is None and self.fetch_fraction is None:
            raise ConfigError("SelectionPolicy needs k or fetch_fraction")
        if self.k is not None and self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if self.k is None and not 0.0 < self.fetch_fraction <= 1.0:
            raise ConfigError(f"fetch_fraction must lie in (0, 1], got {self.fetch_fraction}")

    @classmethod
    def all_blocks(cls) -> "SelectionPolicy":
        return cls(k=None, fetch_fraction=1.0)

    def resolve(self, block_count: int) -> int:
        if self.k is not None:
            if self.k > block_count:
                logger.debug("k=%d exceeds %d slow blocks; clamped", self.k, block_count)
            return min(self.k, block_count)
        return min(block_count, math.ceil(self.fetch_fraction * block_count - 1e-9))


def score_block(query: np.ndarray, centroid: np.ndarray) -> float:
    query = np.asarray(query)
    centroid = np.asarray(centroid)
    if query.shape != centroid.shape or query.ndim != 1:
        raise ShapeError(f"query shape {query.shape} does not match centroid {centroid.shape}")
    return float(np.dot(query.astype(np.float64), centroid.astype(np.float64)))


def score_blocks(query: np.ndarray, centroids: np.ndarray, block_ids: Iterable[int]) -> list[BlockScore]:
    """Vectorized ``score_block`` over a stacked ``(n, d_k)`` centroid matrix."""
    block_ids = list(block_ids)
    if not block_ids:
        return []
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.ndim != 2 or centroids.shape[1] != np.shape(query)[0]:
        raise ShapeError(f"centroids {centroids.shape} do not match query {np.shape(query)}")
    scores = centroids @ np.asarray(query, dtype=np.float64)
    return [BlockScore(j, float(s)) for j, s in zip(block_ids, scores)]


def select_top_k(scores: Sequence[BlockScore], policy: SelectionPolicy) -> list[int]:
    """Ids of the ``k`` best blocks, best first; ties go to the newer block.

    The returned order is the prefetch schedule.
    """
    k = policy.resolve(len(scores))
    ranked = sorted(scores, key=lambda s: (-s.score, -s.block_id))
    return [s.block_id for s in ranked[:k]]
