from __future__ import annotations

import numpy as np
import pytest

from ttkv.store import Tier, TierStore


def check_store_invariants(store: TierStore, exhaustive: bool = False) -> None:
    """Partition, recency, capacity, FIFO and (optionally) index soundness."""
    b = store.config.block_size
    assert store.fast_count <= store.capacity
    assert store.fast_start + store.fast_count == store.next_position
    assert store.fast_start == b * len(store.slow_blocks)
    for i, blk in enumerate(store.slow_blocks):
        assert blk.block_id == i
        assert blk.first_position == i * b
        assert blk.last_position - blk.first_position + 1 == b
    if store.slow_blocks:
        assert store.slow_blocks[-1].last_position < store.fast_start
    if exhaustive:
        for p in range(store.next_position):
            loc = store.locate(p)
            if p >= store.fast_start:
                assert loc.tier is Tier.FAST
            else:
                assert loc.tier is Tier.SLOW
                first, last = store.block_index.range(loc.block_id)
                assert first <= p <= last
        assert store.locate(store.next_position).tier is Tier.ABSENT


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
