"""Tunables shared by the cache, the quantizer and the timing model."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .errors import ConfigError

logger = logging.getLogger(__name__)

STANDARD_BLOCK_SIZES = (32, 64, 128, 256)

# 16 means "store uncompressed": no codes, no parameters, full-precision bytes.
PASSTHROUGH_BITS = 16
SUPPORTED_BITS = (1, 2, 3, 4, 5, 6, 7, 8, PASSTHROUGH_BITS)


@dataclass(frozen=True)
class TierConfig:
    """Configuration of the two-tier cache.

    ``d_k`` and ``d_v`` are the key and value widths of the single logical KV
    stream the engine models; ``d_kv`` is their sum. Bandwidths are in
    bytes/second and ``compute_rate`` in attention elements/second.
    """

    hbm_budget_bytes: int = 1024 * 256 * 2
    d_k: int = 128
    d_v: int = 128
    bytes_full_precision: int = 2
    block_size: int = 128
    key_bits: int = 8
    value_bits: int = 4
    fetch_fraction: float = 0.45
    top_k_blocks: int | None = None
    hbm_bandwidth: float = 2.0e12
    pcie_bandwidth: float = 3.2e10
    transfer_latency: float = 10e-6
    compute_rate: float = 5.0e10

    def __post_init__(self) -> None:
        if self.d_k <= 0 or self.d_v <= 0:
            raise ConfigError(f"d_k and d_v must be positive, got {self.d_k}, {self.d_v}")
        if self.block_size <= 0:
            raise ConfigError(f"block_size must be positive, got {self.block_size}")
        if self.bytes_full_precision <= 0:
            raise ConfigError("bytes_full_precision must be positive")
        for name in ("key_bits", "value_bits"):
            bits = getattr(self, name)
            if bits not in SUPPORTED_BITS:
                raise ConfigError(f"{name}={bits} not in {SUPPORTED_BITS}")
        if self.key_bits < self.value_bits:
            raise ConfigError(
                f"key_bits ({self.key_bits}) must be >= value_bits ({self.value_bits})"
            )
        if self.top_k_blocks is not None and self.top_k_blocks < 0:
            raise ConfigError("top_k_blocks must be >= 0")
        if not 0.0 < self.fetch_fraction <= 1.0:
            raise ConfigError(f"fetch_fraction must lie in (0, 1], got {self.fetch_fraction}")
        for name in ("hbm_bandwidth", "pcie_bandwidth", "compute_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.transfer_latency < 0:
            raise ConfigError("transfer_latency must be >= 0")
        if self.hbm_budget_bytes < self.block_bytes_full_precision:
            raise ConfigError(
                f"hbm_budget_bytes={self.hbm_budget_bytes} cannot hold one full-precision "
                f"block ({self.block_bytes_full_precision} bytes)"
            )
        if not self.standard_block_size:
            logger.warning("block_size %d is outside the ablation grid %s",
                           self.block_size, STANDARD_BLOCK_SIZES)

    @property
    def d_kv(self) -> int:
        return self.d_k + self.d_v

    @property
    def block_bytes_full_precision(self) -> int:
        return self.block_size * self.d_kv * self.bytes_full_precision

    @property
    def standard_block_size(self) -> bool:
        return self.block_size in STANDARD_BLOCK_SIZES
