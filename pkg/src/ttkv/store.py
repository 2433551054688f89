"""Two-tier KV store: full-precision recent tokens plus compressed old blocks.

The fast tier is a FIFO of the most recent tokens. When appending pushes it
past capacity, the oldest ``block_size`` tokens are compressed and appended
to the slow tier, and the block index is extended to cover them.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import TierConfig
from .errors import ConfigError, SequencingError, ShapeError
from .quant import KvBlock, QuantizedBlock, quantize_block


def fast_capacity(config: TierConfig) -> int:
    """Token capacity of the fast tier, rounded down to whole blocks."""
    per_token = config.d_kv * config.bytes_full_precision
    tokens = config.hbm_budget_bytes // per_token
    tokens -= tokens % config.block_size
    if tokens < config.block_size:
        raise ConfigError(
            f"HBM budget {config.hbm_budget_bytes} B holds {config.hbm_budget_bytes // per_token} "
            f"tokens, fewer than one block of {config.block_size}"
        )
    return tokens


class Tier(enum.Enum):
    FAST = "fast"
    SLOW = "slow"
    ABSENT = "absent"


@dataclass(frozen=True)
class Location:
    tier: Tier
    block_id: int | None = None


FAST = Location(Tier.FAST)
ABSENT = Location(Tier.ABSENT)


@dataclass(frozen=True)
class TokenKV:
    position: int
    key: np.ndarray
    value: np.ndarray


@dataclass(frozen=True)
class EvictBlock:
    """Pending eviction of the fast-tier tokens ``first_position..last_position``."""

    first_position: int
    last_position: int


class BlockIndex:
    """Maps slow-tier token positions to block ids and back."""

    def __init__(self) -> None:
        self._firsts: list[int] = []
        self._lasts: list[int] = []
        self._ids: list[int] = []
        self._by_id: dict[int, tuple[int, int]] = {}

    def add(self, block_id: int, first: int, last: int) -> None:
        if self._lasts and first <= self._lasts[-1]:
            raise SequencingError(f"block range {first}..{last} overlaps or precedes existing blocks")
        if self._ids and block_id <= self._ids[-1]:
            raise SequencingError(f"block id {block_id} is not increasing")
        self._firsts.append(first)
        self._lasts.append(last)
        self._ids.append(block_id)
        self._by_id[block_id] = (first, last)

    def lookup(self, position: int) -> int | None:
        i = bisect.bisect_right(self._firsts, position) - 1
        if i < 0 or position > self._lasts[i]:
            return None
        return self._ids[i]

    def range(self, block_id: int) -> tuple[int, int]:
        return self._by_id[block_id]

    def __len__(self) -> int:
        return len(self._ids)

    def __iter__(self):
        return iter(self._ids)


class TierStore:
    """Owns the fast tier, the slow tier and the block index for one KV stream.

    Mutations must be serialized by the caller.
    """

    def __init__(
        self,
        config: TierConfig,
        dtype=np.float32,
        compress: Callable[[KvBlock], QuantizedBlock] | None = None,
    ) -> None:
        self.config = config
        self.dtype = np.dtype(dtype)
        self.capacity = fast_capacity(config)
        self._compress = compress or (lambda blk: quantize_block(blk, config))
        self._buf_rows = self.capacity + config.block_size
        self._keys = np.empty((self._buf_rows, config.d_k), dtype=self.dtype)
        self._values = np.empty((self._buf_rows, config.d_v), dtype=self.dtype)
        self._n = 0
        self.fast_start = 0
        self.next_position = 0
        self._pending: list[EvictBlock] = []
        self.slow_blocks: list[QuantizedBlock] = []
        self.block_index = BlockIndex()

    # -- views ---------------------------------------------------------------

    @property
    def fast_keys(self) -> np.ndarray:
        return self._keys[: self._n]

    @property
    def fast_values(self) -> np.ndarray:
        return self._values[: self._n]

    @property
    def fast_count(self) -> int:
        return self._n

    @property
    def slow_token_count(self) -> int:
        return self.fast_start

    @property
    def pending_evictions(self) -> tuple[EvictBlock, ...]:
        return tuple(self._pending)

    @property
    def index_bytes(self) -> int:
        """Fast-memory bytes held by block centroids (not counted in capacity)."""
        return sum(b.centroid_bytes for b in self.slow_blocks)

    def block(self, block_id: int) -> QuantizedBlock:
        # ids are dense from 0 in eviction order
        return self.slow_blocks[block_id]

    # -- mutation ------------------------------------------------------------

    def _reserve(self, rows: int) -> None:
        if rows <= self._buf_rows:
            return
        new_rows = max(rows, 2 * self._buf_rows)
        for name in ("_keys", "_values"):
            old = getattr(self, name)
            grown = np.empty((new_rows, old.shape[1]), dtype=self.dtype)
            grown[: self._n] = old[: self._n]
            setattr(self, name, grown)
        self._buf_rows = new_rows

    def append_token(self, kv: TokenKV) -> list[EvictBlock]:
        """Append one token to the fast tier.

        Returns an ``EvictBlock`` event when the fast tier has run past
        capacity; the caller resolves it with ``evict_and_compress``.
        """
        if kv.position != self.next_position:
            raise SequencingError(f"expected position {self.next_position}, got {kv.position}")
        key = np.asarray(kv.key)
        value = np.asarray(kv.value)
        if key.shape != (self.config.d_k,) or value.shape != (self.config.d_v,):
            raise ShapeError(f"token shapes {key.shape}, {value.shape} do not match config")
        self._reserve(self._n + 1)
        self._keys[self._n] = key
        self._values[self._n] = value
        self._n += 1
        self.next_position += 1
        b = self.config.block_size
        if self._n - b * len(self._pending) > self.capacity:
            first = self.fast_start + b * len(self._pending)
            event = EvictBlock(first, first + b - 1)
            self._pending.append(event)
            return [event]
        return []

    def evict_and_compress(self) -> int:
        """Move the oldest pending block to the slow tier; returns its block id."""
        if not self._pending:
            raise SequencingError("no pending eviction")
        event = self._pending.pop(0)
        b = self.config.block_size
        assert event.first_position == self.fast_start
        block_id = len(self.slow_blocks)
        block = KvBlock(block_id, self.fast_start, self._keys[:b].copy(), self._values[:b].copy())
        self.slow_blocks.append(self._compress(block))
        self.block_index.add(block_id, event.first_position, event.last_position)
        remaining = self._n - b
        self._keys[:remaining] = self._keys[b: self._n]
        self._values[:remaining] = self._values[b: self._n]
        self._n = remaining
        self.fast_start += b
        return block_id

    def push(self, kv: TokenKV) -> list[int]:
        """Append a token and resolve any eviction it triggers."""
        self.append_token(kv)
        return [self.evict_and_compress() for _ in range(len(self._pending))]

    def extend(self, keys: np.ndarray, values: np.ndarray) -> list[int]:
        """Bulk-append tokens; the resulting state equals pushing them one by one."""
        if self._pending:
            raise SequencingError("resolve pending evictions before extend")
        keys = np.asarray(keys, dtype=self.dtype)
        values = np.asarray(values, dtype=self.dtype)
        if keys.ndim != 2 or values.ndim != 2 or keys.shape[0] != values.shape[0]:
            raise ShapeError("extend needs matching 2-D key and value arrays")
        if keys.shape[1] != self.config.d_k or values.shape[1] != self.config.d_v:
            raise ShapeError("extend widths do not match config")
        b = self.config.block_size
        all_k = np.concatenate([self.fast_keys, keys])
        all_v = np.concatenate([self.fast_values, values])
        total = all_k.shape[0]
        n_evict = max(0, -(-(total - self.capacity) // b))
        new_ids = []
        for i in range(n_evict):
            block_id = len(self.slow_blocks)
            first = self.fast_start
            blk = KvBlock(block_id, first, all_k[i * b:(i + 1) * b].copy(), all_v[i * b:(i + 1) * b].copy())
            self.slow_blocks.append(self._compress(blk))
            self.block_index.add(block_id, first, first + b - 1)
            self.fast_start += b
            new_ids.append(block_id)
        rest = n_evict * b
        self._n = 0
        self._reserve(total - rest)
        self._keys[: total - rest] = all_k[rest:]
        self._values[: total - rest] = all_v[rest:]
        self._n = total - rest
        self.next_position += keys.shape[0]
        return new_ids

    # -- queries -------------------------------------------------------------

    def locate(self, position: int) -> Location:
        if position < 0 or position >= self.next_position:
            return ABSENT
        if position >= self.fast_start:
            return FAST
        return Location(Tier.SLOW, self.block_index.lookup(position))
