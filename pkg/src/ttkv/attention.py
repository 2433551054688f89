"""Streaming decode attention over the two-tier cache.

Each decode step appends the new token, attends densely over the fast tier,
scores every slow block by centroid, fetches the top-k, dequantizes them and
folds them into an online-softmax accumulator, then resolves any eviction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np

from .config import TierConfig
from .errors import ShapeError
from .quant import dequantize_block
from .relevance import SelectionPolicy, score_blocks, select_top_k
from .store import TierStore, TokenKV

Merge = Literal["online", "additive"]


class AttentionAccumulator:
    """Running max / denominator / weighted value sum for one query."""

    def __init__(self, d_v: int, softmax_scale: float, dtype=np.float32) -> None:
        self.dtype = np.dtype(dtype)
        self.softmax_scale = softmax_scale
        self.running_max = -np.inf
        self.running_denominator = self.dtype.type(0)
        self.weighted_value_sum = np.zeros(d_v, dtype=self.dtype)
        self.absorbed = 0

    def absorb(self, query: np.ndarray, keys: np.ndarray, values: np.ndarray) -> "AttentionAccumulator":
        if keys.ndim != 2 or values.ndim != 2 or keys.shape[0] != values.shape[0]:
            raise ShapeError(f"keys {keys.shape} and values {values.shape} do not align")
        if keys.shape[1] != query.shape[0] or values.shape[1] != self.weighted_value_sum.shape[0]:
            raise ShapeError("query/key or value widths do not match the accumulator")
        if keys.shape[0] == 0:
            return self
        s = (keys @ query).astype(self.dtype) * self.dtype.type(self.softmax_scale)
        new_max = max(self.running_max, float(s.max()))
        correction = self.dtype.type(math.exp(self.running_max - new_max)) if self.absorbed else self.dtype.type(0)
        p = np.exp(s - self.dtype.type(new_max))
        self.running_denominator = self.running_denominator * correction + p.sum(dtype=self.dtype)
        self.weighted_value_sum = self.weighted_value_sum * correction + p @ values
        self.running_max = new_max
        self.absorbed += keys.shape[0]
        return self

    def merge(self, other: "AttentionAccumulator") -> "AttentionAccumulator":
        """Combine with an accumulator built over a disjoint key set."""
        if not other.absorbed:
            return self
        if not self.absorbed:
            self.running_max = other.running_max
            self.running_denominator = other.running_denominator
            self.weighted_value_sum = other.weighted_value_sum.copy()
            self.absorbed = other.absorbed
            return self
        m = max(self.running_max, other.running_max)
        a = self.dtype.type(math.exp(self.running_max - m))
        b = self.dtype.type(math.exp(other.running_max - m))
        self.running_denominator = self.running_denominator * a + other.running_denominator * b
        self.weighted_value_sum = self.weighted_value_sum * a + other.weighted_value_sum * b
        self.running_max = m
        self.absorbed += other.absorbed
        return self

    def finalize(self) -> np.ndarray:
        if not self.absorbed:
            raise ValueError("cannot finalize an accumulator that absorbed no keys")
        return self.weighted_value_sum / self.running_denominator


def attend_partition(query: np.ndarray, keys: np.ndarray, values: np.ndarray,
                     acc: AttentionAccumulator) -> AttentionAccumulator:
    return acc.absorb(np.asarray(query, dtype=acc.dtype), np.asarray(keys), np.asarray(values))


def dense_attention(query: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Single-pass softmax attention in float64, for reference outputs."""
    q = np.asarray(query, dtype=np.float64)
    s = np.asarray(keys, dtype=np.float64) @ q / math.sqrt(q.shape[0])
    w = np.exp(s - s.max())
    return (w / w.sum()) @ np.asarray(values, dtype=np.float64)


@dataclass
class DecodeStepReport:
    position: int
    output: np.ndarray
    blocks_scored: int
    blocks_fetched: int
    fetched_block_ids: list[int]
    bytes_transferred: int
    eviction_occurred: bool
    fast_tokens: int
    slow_tokens: int
    block_bytes: list[int] = field(default_factory=list)
    block_tokens: list[int] = field(default_factory=list)
    d_k: int = 0
    d_v: int = 0

    @property
    def fast_elements(self) -> int:
        """Attention elements (score dot products plus value accumulation) on the fast tier."""
        return self.fast_tokens * (self.d_k + self.d_v)

    @property
    def block_elements(self) -> list[int]:
        return [t * (self.d_k + self.d_v) for t in self.block_tokens]


class TTKVEngine:
    """Single logical KV stream with tiered storage and streaming attention."""

    def __init__(self, config: TierConfig, policy: SelectionPolicy | None = None,
                 dtype=np.float32, merge: Merge = "online") -> None:
        if merge not in ("online", "additive"):
            raise ValueError(f"unknown merge mode {merge!r}")
        self.config = config
        if policy is None:
            policy = SelectionPolicy(k=config.top_k_blocks,
                                     fetch_fraction=None if config.top_k_blocks is not None else config.fetch_fraction)
        self.policy = policy
        self.dtype = np.dtype(dtype)
        self.merge = merge
        self.store = TierStore(config, dtype=self.dtype)
        self.softmax_scale = 1.0 / math.sqrt(config.d_k)
        self._centroids = np.empty((0, config.d_k))

    def prefill(self, keys: np.ndarray, values: np.ndarray) -> list[int]:
        """Feed prompt tokens through the append/evict path."""
        return self.store.extend(keys, values)

    def _centroid_matrix(self) -> np.ndarray:
        n = len(self.store.slow_blocks)
        if self._centroids.shape[0] != n:
            self._centroids = np.stack([b.key_centroid for b in self.store.slow_blocks]) if n else np.empty((0, self.config.d_k))
        return self._centroids

    def _new_acc(self) -> AttentionAccumulator:
        return AttentionAccumulator(self.config.d_v, self.softmax_scale, self.dtype)

    def decode_step(self, query: np.ndarray, new_kv: TokenKV) -> DecodeStepReport:
        store = self.store
        query = np.asarray(query, dtype=self.dtype)
        if query.shape != (self.config.d_k,):
            raise ShapeError(f"query shape {query.shape} != ({self.config.d_k},)")
        store.append_token(new_kv)

        acc = attend_partition(query, store.fast_keys, store.fast_values, self._new_acc())
        partials = [acc]

        n_blocks = len(store.slow_blocks)
        scores = score_blocks(query, self._centroid_matrix(), range(n_blocks))
        chosen = select_top_k(scores, self.policy)
        block_bytes, block_tokens = [], []
        for j in chosen:
            qb = store.block(j)
            block_bytes.append(qb.transfer_bytes)
            block_tokens.append(qb.block_size)
            blk = dequantize_block(qb)
            if self.merge == "online":
                attend_partition(query, blk.keys, blk.values, acc)
            else:
                partials.append(attend_partition(query, blk.keys, blk.values, self._new_acc()))

        if self.merge == "online":
            output = acc.finalize()
        else:
            output = sum(p.finalize() for p in partials)

        fast_tokens, slow_tokens = store.fast_count, store.slow_token_count
        evicted = bool(store.pending_evictions)
        while store.pending_evictions:
            store.evict_and_compress()

        report = DecodeStepReport(
            position=new_kv.position,
            output=output,
            blocks_scored=n_blocks,
            blocks_fetched=len(chosen),
            fetched_block_ids=chosen,
            bytes_transferred=sum(block_bytes),
            eviction_occurred=evicted,
            fast_tokens=fast_tokens,
            slow_tokens=slow_tokens,
            block_bytes=block_bytes,
            block_tokens=block_tokens,
            d_k=self.config.d_k,
            d_v=self.config.d_v,
        )
        return report

    def decode_sequence(self, steps: Iterable[tuple[np.ndarray, TokenKV]]) -> list[DecodeStepReport]:
        return [self.decode_step(q, kv) for q, kv in steps]
