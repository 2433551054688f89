"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (the lines are repeated in the
terminal summary) or add ``-s`` to see them inline.
"""

import math
import time

import numpy as np

from ttkv import KvBlock, SelectionPolicy, TierConfig, TierStore, TokenKV, TTKVEngine, dequantize_block, quantize_block
from ttkv.cli import main as cli_main
from ttkv.harness import RunConfig, WorkloadSpec, ablate, needle_ranks, run_benchmark
from ttkv.quant import dequantize_channels, quantize_channels
from ttkv.sim import ComputeItem, LinkModel, StepWorkload, TransferItem, simulate_pipelined, simulate_serial

from conftest import check_store_invariants
from oracles import fifo_slow_count, softmax_attention


def test_1_partition_invariance(criterion):
    rng = np.random.default_rng(101)
    t0, worst = time.perf_counter(), 0.0
    for _ in range(500):
        d_k = int(rng.choice([16, 32, 64, 128]))
        d_v = int(rng.choice([w for w in (16, 32, 64, 128) if d_k + w <= 256]))
        block = int(rng.choice([32, 64, 128]))
        cap_blocks = int(rng.integers(1, 5))
        cfg = TierConfig(hbm_budget_bytes=cap_blocks * block * (d_k + d_v) * 2, d_k=d_k, d_v=d_v,
                         block_size=block, key_bits=16, value_bits=16)
        n = int(rng.integers(1, 4097))
        keys = rng.standard_normal((n, d_k)).astype(np.float32)
        values = rng.standard_normal((n, d_v)).astype(np.float32)
        query = rng.standard_normal(d_k).astype(np.float32)
        engine = TTKVEngine(cfg, SelectionPolicy.all_blocks())
        engine.prefill(keys[:-1], values[:-1])
        out = engine.decode_step(query, TokenKV(n - 1, keys[-1], values[-1])).output
        ref = softmax_attention(query, keys, values)
        worst = max(worst, float(np.linalg.norm(out - ref) / np.linalg.norm(ref)))
    elapsed = time.perf_counter() - t0
    criterion(1, worst <= 1e-5 and elapsed < 120,
              f"500 histories, max relative error {worst:.2e} (<= 1e-5), {elapsed:.1f} s")


def test_2_quantization_bounds(criterion):
    rng = np.random.default_rng(202)
    t0, violations, worst_ratio, constant_ok = time.perf_counter(), 0, 0.0, True
    for i in range(10_000):
        rows, cols = int(rng.choice([32, 64, 128])), int(rng.integers(1, 33))
        scale = 10.0 ** rng.uniform(-3, 3)
        x = (rng.standard_normal((rows, cols)) * scale + rng.uniform(-5, 5) * scale).astype(np.float32)
        for bits in (4, 8):
            codes, params = quantize_channels(x, bits)
            err = np.abs(dequantize_channels(codes, params, np.float32).astype(np.float64) - x)
            span = x.max(axis=0).astype(np.float64) - x.min(axis=0)
            ulp = np.spacing(np.maximum(np.abs(x.max(axis=0)), np.abs(x.min(axis=0))))
            step = span / (2 * (2**bits - 1))
            violations += int(np.sum(err > step + 4 * ulp))
            worst_ratio = max(worst_ratio, float(np.max(err / (step + 4 * ulp))))
        if i % 100 == 0:
            c = np.full((rows, cols), np.float32(rng.standard_normal() * scale))
            q = quantize_block(KvBlock(0, 0, c, c), TierConfig(d_k=cols, d_v=cols, block_size=rows,
                                                                hbm_budget_bytes=rows * cols * 4))
            back = dequantize_block(q)
            constant_ok &= bool(np.array_equal(back.keys, c) and np.array_equal(back.values, c))
    elapsed = time.perf_counter() - t0
    criterion(2, violations == 0 and constant_ok and elapsed < 60,
              f"1e4 blocks x b in {{4, 8}}: {violations} bound violations, worst error/bound "
              f"{worst_ratio:.3f}, constant blocks exact={constant_ok}, {elapsed:.1f} s")


def test_3_traffic_reduction(criterion):
    t0 = time.perf_counter()
    spec = WorkloadSpec(context_length=16384, decode_steps=32, seed=0)
    res = run_benchmark(RunConfig(compute_oracle=False), spec)
    r = res.summary.traffic_reduction
    elapsed = time.perf_counter() - t0
    criterion(3, abs(r - 5.9) <= 0.05 * 5.9 and elapsed < 60,
              f"16K context, block 128, 8/4 bits, fraction 0.45: reduction {r:.3f}x "
              f"(target 5.9x +/- 5%), {elapsed:.1f} s")


def calibration_workload(n_blocks: int = 36) -> StepWorkload:
    """9 s of transfer against 2.5 s of compute, split evenly over the blocks."""
    labels = [f"block:{j}" for j in range(n_blocks)]
    return StepWorkload(tuple(ComputeItem(lbl, 2.5 / n_blocks) for lbl in labels),
                        tuple(TransferItem(lbl, 9.0 / n_blocks) for lbl in labels))


def test_4_overlap_regime(criterion):
    link = LinkModel(bandwidth=1.0)
    w = calibration_workload()
    serial, pipe = simulate_serial(w, link, 1.0), simulate_pipelined(w, link, 1.0)
    reduction = serial.exposed_transfer / pipe.exposed_transfer
    idle_ok = abs(serial.idle_fraction - 0.78) <= 0.02
    criterion(4, idle_ok and reduction >= 2.5,
              f"serial idle {serial.idle_fraction:.4f} (0.78 +/- 0.02); exposed transfer "
              f"{serial.exposed_transfer:.3f} s serial vs {pipe.exposed_transfer:.3f} s pipelined, "
              f"reduction {reduction:.2f}x (needs >= 2.5x)")


def test_5_pipeline_laws(criterion):
    rng = np.random.default_rng(505)
    t0, failures = time.perf_counter(), 0
    for _ in range(1000):
        n = int(rng.integers(0, 20))
        labels = [f"block:{j}" for j in range(n)]
        fast = ComputeItem("fast", float(rng.uniform(0, 50)))
        w = StepWorkload((fast, *(ComputeItem(lbl, float(rng.uniform(0, 30))) for lbl in labels)),
                         tuple(TransferItem(lbl, int(rng.integers(0, 4000))) for lbl in labels))
        link = LinkModel(float(rng.uniform(10, 1000)), float(rng.uniform(0, 1)))
        rate = float(rng.uniform(0.5, 5))
        serial, pipe = simulate_serial(w, link, rate), simulate_pipelined(w, link, rate)
        sc, sx, eps = pipe.compute_time, pipe.transfer_time, 1e-9
        ok = max(sc, sx) - eps <= pipe.total_latency <= sc + sx + eps
        ok &= pipe.total_latency <= serial.total_latency + eps
        landed = {e.label: e.finish for e in pipe.lane("transfer")}
        prev = 0.0
        for e in pipe.lane("compute"):
            ok &= e.start >= landed.get(e.label, 0.0) - eps
            # idle gap only while the next block is still in flight
            if e.start > prev + eps:
                ok &= abs(e.start - landed.get(e.label, -1.0)) <= eps
            prev = e.finish
        failures += not ok
    elapsed = time.perf_counter() - t0
    criterion(5, failures == 0 and elapsed < 60,
              f"1000 random workloads, {failures} law violations, {elapsed:.1f} s")


def test_6_store_invariants(criterion):
    rng = np.random.default_rng(606)
    t0, total, ok = time.perf_counter(), 0, True
    while total < 100_000:
        block = int(rng.choice([16, 32, 64, 128]))
        cap = block * int(rng.integers(1, 6))
        cfg = TierConfig(hbm_budget_bytes=cap * 4 * 2, d_k=2, d_v=2, block_size=block)
        store = TierStore(cfg)
        n = int(rng.integers(1, 20_000))
        done = 0
        while done < n:
            burst = int(rng.integers(1, 400))
            if rng.random() < 0.5:
                store.extend(np.zeros((burst, 2)), np.zeros((burst, 2)))
            else:
                for i in range(burst):
                    store.push(TokenKV(done + i, np.zeros(2), np.zeros(2)))
            done += burst
            check_store_invariants(store)
        check_store_invariants(store, exhaustive=True)
        ok &= store.slow_token_count == fifo_slow_count(done, cap, block)
        total += done
    elapsed = time.perf_counter() - t0
    criterion(6, ok and elapsed < 60, f"{total} randomized appends, invariants held, {elapsed:.1f} s")


def test_7_needle_recall(criterion):
    t0 = time.perf_counter()
    spec = WorkloadSpec(kind="planted_needle", context_length=4096, decode_steps=1, seed=70_000,
                        needle_position=0, needle_length=16, needle_strength=3.0)
    recall = {}
    for block in (128, 256):
        tier = TierConfig(hbm_budget_bytes=512 * 256 * 2, block_size=block)
        ranks = needle_ranks(tier, spec, 1000)
        recall[block] = {k: sum(r <= k for r in ranks) / 1000 for k in (1, 2, 4)}
    elapsed = time.perf_counter() - t0
    ok = all(v >= 0.95 for v in recall[128].values()) and recall[256][1] < recall[128][1] and elapsed < 120
    criterion(7, ok, f"1000 trials, recall@k at block 128 {recall[128]}, at block 256 {recall[256]}, "
                     f"{elapsed:.1f} s")


def test_8_ablation_ordering(criterion):
    t0 = time.perf_counter()
    rows = {s.method: s for s in ablate(RunConfig(compute_oracle=False),
                                        WorkloadSpec(context_length=16384, decode_steps=32, seed=7))}
    traffic = {m: s.total_h2g_bytes for m, s in rows.items()}
    p95 = {m: s.p95_latency for m, s in rows.items()}
    checks = {
        "single_tier traffic": traffic["single_tier"] > traffic["ttkv"],
        "single_tier p95": p95["single_tier"] > p95["ttkv"],
        "uniform_8_8 traffic": traffic["uniform_quant_8_8"] > traffic["ttkv"],
        "uniform_8_8 p95": p95["uniform_quant_8_8"] > p95["ttkv"],
        "no_pipeline p95": p95["no_pipeline"] > p95["ttkv"],
        "ttkv < uniform < fp16 traffic": traffic["ttkv"] < traffic["uniform_quant_8_8"] < traffic["fp16_full_fetch"],
    }
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    criterion(8, not failed and elapsed < 120,
              "p95 ms " + ", ".join(f"{m} {v * 1e3:.1f}" for m, v in p95.items())
              + f"; {len(checks) - len(failed)}/{len(checks)} orderings hold, {elapsed:.1f} s")


def test_9_sweep_determinism(criterion, tmp_path, capsys):
    args = ["sweep", "--seed", "99", "--context-len", "1024,4096", "--block-size", "64,128",
            "--value-bits", "4,8", "--decode-steps", "4"]
    same = True
    for fmt in ("csv", "json"):
        outs = []
        for run in ("a", "b"):
            assert cli_main([*args, "--format", fmt, "--out", str(tmp_path / f"{fmt}-{run}")]) == 0
            outs.append((tmp_path / f"{fmt}-{run}" / f"report.{fmt}").read_bytes())
        same &= outs[0] == outs[1]
    capsys.readouterr()
    criterion(9, same, "two identical sweeps produce byte-identical csv and json reports")
