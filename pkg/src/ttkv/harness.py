"""Synthetic workloads, baseline emulation, benchmark runs and report files.

Byte counts come from the single-stream engine. Latencies come from the
two-lane timing model, with link and compute rates divided by
``model_scale`` (layers x KV heads x batch) so that a desk-scale stream
stands in for a full model.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attention import DecodeStepReport, TTKVEngine, dense_attention
from .config import PASSTHROUGH_BITS, TierConfig
from .errors import ConfigError, SpecError, UsageError
from .relevance import SelectionPolicy
from .sim import (
    ComputeItem,
    LinkModel,
    PipelineTimeline,
    RunSummary,
    StepWorkload,
    TrafficLedger,
    TransferItem,
    aggregate_run,
    simulate_pipelined,
    simulate_serial,
)
from .store import TokenKV, fast_capacity

METHODS = ("ttkv", "fp16_full_fetch", "uniform_quant_8_8", "no_pipeline", "single_tier")
BASELINES = METHODS[1:]
WORKLOAD_KINDS = ("gaussian", "planted_needle")
REPORT_COLUMNS = (
    "method", "context_length", "block_size", "key_bits", "value_bits", "fetch_fraction",
    "h2g_bytes", "traffic_reduction", "p95_latency_model", "throughput_model",
    "oracle_error", "needle_recall",
)
WARMUP_STEPS = 5
MIN_WARM_STEPS = 20


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "gaussian"
    context_length: int = 16384
    decode_steps: int = 32
    d_k: int = 128
    d_v: int = 128
    seed: int = 0
    needle_position: int = 0
    needle_length: int = 16
    needle_strength: float = 3.0

    def __post_init__(self) -> None:
        if self.kind not in WORKLOAD_KINDS:
            raise SpecError(f"unknown workload kind {self.kind!r}")
        if self.context_length < 1:
            raise SpecError("context_length must be >= 1")
        if self.decode_steps < 0:
            raise SpecError("decode_steps must be >= 0")
        if self.kind == "planted_needle":
            if self.needle_length < 1:
                raise SpecError("needle_length must be >= 1")
            if not 0 <= self.needle_position <= self.context_length - self.needle_length:
                raise SpecError(
                    f"needle [{self.needle_position}, {self.needle_position + self.needle_length}) "
                    f"lies outside the context of {self.context_length} tokens"
                )


@dataclass
class Workload:
    """``keys``/``values`` hold prefill tokens followed by one token per decode step."""

    spec: WorkloadSpec
    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray
    needle_direction: np.ndarray | None = None

    def steps(self) -> Iterable[tuple[np.ndarray, TokenKV]]:
        c = self.spec.context_length
        for i, q in enumerate(self.queries):
            yield q, TokenKV(c + i, self.keys[c + i], self.values[c + i])


def generate_workload(spec: WorkloadSpec, dtype=np.float32) -> Workload:
    """Standard-normal keys, values and queries, fully determined by ``spec.seed``.

    A planted needle adds ``needle_strength * u`` to the keys of
    ``needle_length`` tokens starting at ``needle_position``, for a unit
    direction ``u``; the final decode query is ``sqrt(d_k) * u``.
    """
    rng = np.random.default_rng(spec.seed)
    total = spec.context_length + spec.decode_steps
    keys = rng.standard_normal((total, spec.d_k), dtype=np.float32)
    values = rng.standard_normal((total, spec.d_v), dtype=np.float32)
    queries = rng.standard_normal((spec.decode_steps, spec.d_k), dtype=np.float32)
    direction = None
    if spec.kind == "planted_needle":
        u = rng.standard_normal(spec.d_k)
        direction = u / np.linalg.norm(u)
        lo, hi = spec.needle_position, spec.needle_position + spec.needle_length
        keys[lo:hi] += (spec.needle_strength * direction).astype(np.float32)
        if spec.decode_steps:
            queries[-1] = (math.sqrt(spec.d_k) * direction).astype(np.float32)
    return Workload(spec, keys.astype(dtype), values.astype(dtype), queries.astype(dtype), direction)


@dataclass(frozen=True)
class RunConfig:
    tier: TierConfig = field(default_factory=TierConfig)
    method: str = "ttkv"
    model_scale: float = 2048.0
    dtype: str = "float32"
    compute_oracle: bool = True

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.model_scale <= 0:
            raise ConfigError("model_scale must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass(frozen=True)
class MethodPlan:
    tier: TierConfig
    policy: SelectionPolicy
    pipelined: bool


def plan_method(config: RunConfig) -> MethodPlan:
    """Translate a method or baseline name into engine and scheduler settings."""
    tier = config.tier
    policy = (SelectionPolicy(k=tier.top_k_blocks, fetch_fraction=None)
              if tier.top_k_blocks is not None
              else SelectionPolicy(fetch_fraction=tier.fetch_fraction))
    pipelined = True
    if config.method == "fp16_full_fetch":
        tier = dataclasses.replace(tier, key_bits=PASSTHROUGH_BITS, value_bits=PASSTHROUGH_BITS)
        policy = SelectionPolicy.all_blocks()
        pipelined = False
    elif config.method == "uniform_quant_8_8":
        tier = dataclasses.replace(tier, key_bits=8, value_bits=8)
    elif config.method == "no_pipeline":
        pipelined = False
    elif config.method == "single_tier":
        tier = dataclasses.replace(tier, hbm_budget_bytes=tier.block_bytes_full_precision)
    return MethodPlan(tier, policy, pipelined)


def step_workload(report: DecodeStepReport) -> StepWorkload:
    compute = [ComputeItem("fast", report.fast_elements)]
    transfers = []
    for j, nbytes, elems in zip(report.fetched_block_ids, report.block_bytes, report.block_elements):
        label = f"block:{j}"
        transfers.append(TransferItem(label, nbytes))
        compute.append(ComputeItem(label, elems))
    return StepWorkload(tuple(compute), tuple(transfers))


def relative_error(output: np.ndarray, reference: np.ndarray) -> float:
    ref = np.asarray(reference, dtype=np.float64)
    return float(np.linalg.norm(np.asarray(output, dtype=np.float64) - ref) / np.linalg.norm(ref))


@dataclass
class BenchmarkResult:
    summary: RunSummary
    reports: list[DecodeStepReport]
    timelines: list[PipelineTimeline]
    ledger: TrafficLedger
    oracle_errors: list[float]


def slow_tokens_after_prefill(tier: TierConfig, context_length: int) -> int:
    cap, b = fast_capacity(tier), tier.block_size
    return b * max(0, -(-(context_length - cap) // b))


def run_benchmark(config: RunConfig, spec: WorkloadSpec, workload: Workload | None = None) -> BenchmarkResult:
    """Prefill and decode ``spec`` under one method, returning summary and per-step records."""
    plan = plan_method(config)
    tier = plan.tier
    if (spec.d_k, spec.d_v) != (tier.d_k, tier.d_v):
        raise ConfigError(f"workload dims ({spec.d_k}, {spec.d_v}) differ from tier config ({tier.d_k}, {tier.d_v})")
    if spec.kind == "planted_needle":
        slow = slow_tokens_after_prefill(tier, spec.context_length)
        if spec.needle_position + spec.needle_length > slow:
            raise SpecError(
                f"needle ends at {spec.needle_position + spec.needle_length} but only the first "
                f"{slow} tokens reach the slow tier during prefill"
            )
    if workload is None:
        workload = generate_workload(spec, dtype=config.dtype)

    engine = TTKVEngine(tier, plan.policy, dtype=config.dtype)
    engine.prefill(workload.keys[: spec.context_length], workload.values[: spec.context_length])

    link = LinkModel(tier.pcie_bandwidth / config.model_scale, tier.transfer_latency)
    rate = min(tier.compute_rate, tier.hbm_bandwidth / tier.bytes_full_precision) / config.model_scale
    simulate = simulate_pipelined if plan.pipelined else simulate_serial
    full_token_bytes = tier.d_kv * tier.bytes_full_precision

    reports, timelines, errors = [], [], []
    ledger = TrafficLedger()
    for q, kv in workload.steps():
        report = engine.decode_step(q, kv)
        reports.append(report)
        ledger.record(report.bytes_transferred, report.slow_tokens * full_token_bytes)
        timelines.append(simulate(step_workload(report), link, rate))
        if config.compute_oracle:
            ref = dense_attention(q, workload.keys[: kv.position + 1], workload.values[: kv.position + 1])
            errors.append(relative_error(report.output, ref))

    if not timelines:
        raise UsageError("run_benchmark needs at least one decode step")
    warmup = WARMUP_STEPS if len(timelines) >= WARMUP_STEPS + MIN_WARM_STEPS else 0
    summary = aggregate_run(timelines, ledger, warmup=warmup)
    recall = math.nan
    if spec.kind == "planted_needle":
        recall = float(_needle_hit(engine, spec, reports[-1]))
    summary = dataclasses.replace(
        summary,
        method=config.method,
        context_length=spec.context_length,
        block_size=tier.block_size,
        key_bits=tier.key_bits,
        value_bits=tier.value_bits,
        fetch_fraction=plan.policy.fetch_fraction if plan.policy.k is None else math.nan,
        oracle_error=float(np.mean(errors)) if errors else math.nan,
        needle_recall=recall,
    )
    return BenchmarkResult(summary, reports, timelines, ledger, errors)


def _needle_hit(engine: TTKVEngine, spec: WorkloadSpec, report: DecodeStepReport) -> bool:
    idx = engine.store.block_index
    needed = {idx.lookup(p) for p in range(spec.needle_position, spec.needle_position + spec.needle_length)}
    return needed <= set(report.fetched_block_ids)


def needle_ranks(tier: TierConfig, spec: WorkloadSpec, trials: int) -> list[int]:
    """For seeds ``spec.seed .. spec.seed + trials - 1``, the smallest k whose
    final-step top-k selection contains every block holding the needle."""
    if spec.kind != "planted_needle":
        raise SpecError("needle recall needs a planted_needle workload")
    if trials < 1:
        raise UsageError("trials must be >= 1")
    slow = slow_tokens_after_prefill(tier, spec.context_length)
    if spec.needle_position + spec.needle_length > slow:
        raise SpecError("needle does not reach the slow tier")
    spec = dataclasses.replace(spec, decode_steps=1)
    everything = SelectionPolicy.all_blocks()
    ranks = []
    for i in range(trials):
        trial = dataclasses.replace(spec, seed=spec.seed + i)
        wl = generate_workload(trial)
        engine = TTKVEngine(tier, everything)
        engine.prefill(wl.keys[: spec.context_length], wl.values[: spec.context_length])
        (q, kv), = wl.steps()
        order = engine.decode_step(q, kv).fetched_block_ids
        idx = engine.store.block_index
        needed = {idx.lookup(p) for p in range(trial.needle_position, trial.needle_position + trial.needle_length)}
        ranks.append(max(order.index(j) for j in needed) + 1)
    return ranks


def needle_recall(tier: TierConfig, spec: WorkloadSpec, trials: int, k: int) -> float:
    """Fraction of trials whose final-step top-``k`` selection holds the whole needle."""
    ranks = needle_ranks(tier, spec, trials)
    return sum(r <= k for r in ranks) / trials


# -- sweeps and ablations ----------------------------------------------------

def sweep(base: RunConfig, spec: WorkloadSpec, context_lengths: Sequence[int] = (),
          block_sizes: Sequence[int] = (), key_bits: Sequence[int] = (),
          value_bits: Sequence[int] = (), fetch_fractions: Sequence[float] = ()) -> list[RunSummary]:
    """Run the grid in deterministic order: context, block size, key bits, value bits, fraction."""
    t = base.tier
    grid = itertools.product(
        sorted(context_lengths or [spec.context_length]),
        sorted(block_sizes or [t.block_size]),
        sorted(key_bits or [t.key_bits]),
        sorted(value_bits or [t.value_bits]),
        sorted(fetch_fractions or [t.fetch_fraction]),
    )
    out = []
    for ctx, bs, kb, vb, ff in grid:
        tier = dataclasses.replace(t, block_size=bs, key_bits=kb, value_bits=vb, fetch_fraction=ff)
        cfg = dataclasses.replace(base, tier=tier)
        out.append(run_benchmark(cfg, dataclasses.replace(spec, context_length=ctx)).summary)
    return out


def ablate(base: RunConfig, spec: WorkloadSpec, methods: Sequence[str] = METHODS) -> list[RunSummary]:
    workload = generate_workload(spec, dtype=base.dtype)
    return [run_benchmark(dataclasses.replace(base, method=m), spec, workload).summary for m in methods]


# -- reports -----------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def summary_row(s: RunSummary) -> dict:
    return {
        "method": s.method,
        "context_length": s.context_length,
        "block_size": s.block_size,
        "key_bits": s.key_bits,
        "value_bits": s.value_bits,
        "fetch_fraction": s.fetch_fraction,
        "h2g_bytes": s.total_h2g_bytes,
        "traffic_reduction": s.traffic_reduction,
        "p95_latency_model": s.p95_latency,
        "throughput_model": s.tokens_per_second,
        "oracle_error": s.oracle_error,
        "needle_recall": s.needle_recall,
    }


def render_report(summaries: Sequence[RunSummary], fmt: str = "csv") -> str:
    if not summaries:
        raise UsageError("emit_report needs at least one summary")
    rows = [summary_row(s) for s in summaries]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()
    if fmt == "json":
        clean = [{k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in r.items()}
                 for r in rows]
        return json.dumps({"columns": list(REPORT_COLUMNS), "rows": clean}, indent=2) + "\n"
    raise UsageError(f"unknown report format {fmt!r}")


def emit_report(summaries: Sequence[RunSummary], out_dir: str | Path, fmt: str = "csv") -> Path:
    text = render_report(summaries, fmt)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"report.{fmt}"
        path.write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write report to {out}: {exc}") from exc
    return path


STEP_COLUMNS = ("step", "position", "blocks_scored", "blocks_fetched", "h2g_bytes",
                "baseline_bytes", "latency_model", "exposed_transfer_model", "oracle_error")


def emit_steps(result: BenchmarkResult, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "steps.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STEP_COLUMNS)
    errs = result.oracle_errors or [math.nan] * len(result.reports)
    for i, (r, tl, err) in enumerate(zip(result.reports, result.timelines, errs)):
        writer.writerow([i, r.position, r.blocks_scored, r.blocks_fetched, r.bytes_transferred,
                         result.ledger.baseline_bytes[i], repr(tl.total_latency),
                         repr(tl.exposed_transfer), repr(err)])
    path.write_text(buf.getvalue())
    return path
