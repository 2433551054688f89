"""Temporal-tiered KV cache: tiered storage, differential quantization and
streaming attention, with a two-lane memory-hierarchy timing model."""

from .attention import AttentionAccumulator, DecodeStepReport, TTKVEngine, attend_partition, dense_attention
from .config import TierConfig
from .errors import ConfigError, IntegrityError, SequencingError, ShapeError, SpecError, TTKVError, UsageError
from .quant import (
    KvBlock,
    QuantizedBlock,
    QuantParams,
    compressed_block_bytes,
    compressed_bytes,
    dequantize_block,
    quantize_block,
)
from .relevance import BlockScore, SelectionPolicy, score_block, select_top_k
from .sim import LinkModel, PipelineTimeline, RunSummary, StepWorkload, TrafficLedger, aggregate_run, simulate_pipelined, simulate_serial
from .store import ABSENT, FAST, BlockIndex, EvictBlock, Location, Tier, TierStore, TokenKV, fast_capacity

__version__ = "0.1.0"
