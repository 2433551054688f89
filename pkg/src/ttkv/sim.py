"""Two-lane timing model of one decode step: a transfer lane and a compute lane.

The serial schedule moves every fetched block first and computes afterwards,
leaving the compute lane idle during the bulk transfer. The pipelined
schedule streams blocks back-to-back on the transfer lane while the compute
lane works through the fast-tier chunk and then each block as soon as it has
landed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

from .errors import ConfigError


@dataclass(frozen=True)
class LinkModel:
    bandwidth: float
    fixed_latency: float = 0.0

    def __post_init__(self) -> None:
        if self.bandwidth <= 0:
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.fixed_latency < 0:
            raise ConfigError(f"fixed_latency must be >= 0, got {self.fixed_latency}")

    def transfer_time(self, nbytes: float) -> float:
        return self.fixed_latency + nbytes / self.bandwidth


@dataclass(frozen=True)
class ComputeItem:
    label: str
    elements: float


@dataclass(frozen=True)
class TransferItem:
    label: str
    nbytes: int


@dataclass(frozen=True)
class StepWorkload:
    """Compute items in execution order; transfers in prefetch order.

    A compute item whose label matches a transfer item cannot start before
    that transfer has finished.
    """

    compute_items: tuple[ComputeItem, ...] = ()
    transfer_items: tuple[TransferItem, ...] = ()

    def __post_init__(self) -> None:
        compute_labels = {c.label for c in self.compute_items}
        missing = [t.label for t in self.transfer_items if t.label not in compute_labels]
        if missing:
            raise ConfigError(f"transfers without matching compute items: {missing}")

    @property
    def transfer_bytes(self) -> int:
        return sum(t.nbytes for t in self.transfer_items)


@dataclass(frozen=True)
class TimelineEvent:
    lane: str  # "transfer" or "compute"
    label: str
    start: float
    finish: float


@dataclass
class PipelineTimeline:
    events: list[TimelineEvent]
    total_latency: float
    compute_time: float
    transfer_time: float
    transfer_bytes: int

    @property
    def idle_fraction(self) -> float:
        """Share of the step during which the compute lane sits idle."""
        if self.total_latency == 0:
            return 0.0
        return (self.total_latency - self.compute_time) / self.total_latency

    @property
    def exposed_transfer(self) -> float:
        """Latency the transfers add on top of pure compute."""
        return self.total_latency - self.compute_time

    def lane(self, name: str) -> list[TimelineEvent]:
        return [e for e in self.events if e.lane == name]


def _check_rate(compute_rate: float) -> None:
    if compute_rate <= 0:
        raise ConfigError(f"compute_rate must be positive, got {compute_rate}")


def simulate_serial(workload: StepWorkload, link: LinkModel, compute_rate: float) -> PipelineTimeline:
    _check_rate(compute_rate)
    events, t = [], 0.0
    for item in workload.transfer_items:
        d = link.transfer_time(item.nbytes)
        events.append(TimelineEvent("transfer", item.label, t, t + d))
        t += d
    transfer_total = t
    compute_total = 0.0
    for item in workload.compute_items:
        d = item.elements / compute_rate
        events.append(TimelineEvent("compute", item.label, t, t + d))
        t += d
        compute_total += d
    return PipelineTimeline(events, t, compute_total, transfer_total, workload.transfer_bytes)


def simulate_pipelined(workload: StepWorkload, link: LinkModel, compute_rate: float) -> PipelineTimeline:
    _check_rate(compute_rate)
    events, landed, t = [], {}, 0.0
    for item in workload.transfer_items:
        d = link.transfer_time(item.nbytes)
        events.append(TimelineEvent("transfer", item.label, t, t + d))
        t += d
        landed[item.label] = t
    transfer_total = t
    clock = compute_total = 0.0
    for item in workload.compute_items:
        start = max(clock, landed.get(item.label, 0.0))
        d = item.elements / compute_rate
        events.append(TimelineEvent("compute", item.label, start, start + d))
        clock = start + d
        compute_total += d
    total = max(clock, transfer_total)
    return PipelineTimeline(events, total, compute_total, transfer_total, workload.transfer_bytes)


@dataclass
class TrafficLedger:
    """Slow -> fast bytes per step, alongside the full-precision baseline."""

    step_bytes: list[int] = field(default_factory=list)
    baseline_bytes: list[int] = field(default_factory=list)

    def record(self, nbytes: int, baseline: int) -> None:
        self.step_bytes.append(int(nbytes))
        self.baseline_bytes.append(int(baseline))

    @property
    def total_bytes(self) -> int:
        return sum(self.step_bytes)

    @property
    def total_baseline_bytes(self) -> int:
        return sum(self.baseline_bytes)

    def __add__(self, other: "TrafficLedger") -> "TrafficLedger":
        return TrafficLedger(self.step_bytes + other.step_bytes, self.baseline_bytes + other.baseline_bytes)


@dataclass
class RunSummary:
    steps: int
    p95_latency: float
    mean_latency: float
    tokens_per_second: float
    total_h2g_bytes: int
    baseline_h2g_bytes: int
    traffic_reduction: float
    method: str = "ttkv"
    context_length: int = 0
    block_size: int = 0
    key_bits: int = 0
    value_bits: int = 0
    fetch_fraction: float = 0.0
    oracle_error: float = math.nan
    needle_recall: float = math.nan


def percentile_nearest_rank(values: Sequence[float], q: float) -> float:
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return ordered[rank - 1]


def aggregate_run(timelines: Sequence[PipelineTimeline], ledger: TrafficLedger, warmup: int = 0) -> RunSummary:
    """Latency statistics over the warm steps plus whole-run traffic totals."""
    if not timelines:
        raise ValueError("aggregate_run needs at least one timeline")
    warm = list(timelines[warmup:]) or list(timelines)
    latencies = [t.total_latency for t in warm]
    elapsed = sum(latencies)
    total, baseline = ledger.total_bytes, ledger.total_baseline_bytes
    if total:
        reduction = baseline / total
    else:
        reduction = math.inf if baseline else 1.0
    return RunSummary(
        steps=len(timelines),
        p95_latency=percentile_nearest_rank(latencies, 95),
        mean_latency=elapsed / len(latencies),
        tokens_per_second=len(latencies) / elapsed if elapsed > 0 else math.inf,
        total_h2g_bytes=total,
        baseline_h2g_bytes=baseline,
        traffic_reduction=reduction,
    )


def write_timeline(stream: IO[str], timelines: Iterable[PipelineTimeline]) -> None:
    """One JSON object per event: step, lane, label, start, finish."""
    for step, tl in enumerate(timelines):
        for e in tl.events:
            stream.write(json.dumps({"step": step, "lane": e.lane, "label": e.label,
                                     "start": e.start, "finish": e.finish}) + "\n")
