"""Command line front end: ``ttkv {run,sweep,ablate,dump-timeline}``.

Settings come from three layers, later ones winning: built-in defaults, a
flat ``key = value`` file given with ``--config``, then command-line flags.
Recognised config keys are the names in ``CONFIG_KEYS``; ``#`` starts a
comment.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Callable, Sequence

from . import harness
from .config import TierConfig
from .errors import ConfigError, TTKVError
from .sim import write_timeline

# key -> parser; keys double as argparse dests
CONFIG_KEYS: dict[str, Callable[[str], object]] = {
    "hbm_budget_bytes": int,
    "d_k": int,
    "d_v": int,
    "block_size": int,
    "key_bits": int,
    "value_bits": int,
    "fetch_fraction": float,
    "top_k_blocks": int,
    "hbm_bandwidth": float,
    "pcie_bandwidth": float,
    "transfer_latency": float,
    "compute_rate": float,
    "model_scale": float,
    "context_len": int,
    "decode_steps": int,
    "seed": int,
    "kind": str,
    "baseline": str,
    "needle_position": int,
    "needle_length": int,
    "needle_strength": float,
    "dtype": str,
    "format": str,
    "out": str,
}
LIST_KEYS = {"context_len", "block_size", "key_bits", "value_bits", "fetch_fraction"}
DEFAULTS = {"context_len": 16384, "decode_steps": 32, "seed": 0, "kind": "gaussian",
            "baseline": "ttkv", "format": "csv", "out": "ttkv-out", "dtype": "float32"}
SWEEP_DEFAULT_CONTEXTS = [1024, 4096, 16384, 65536]


def parse_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _convert(key: str, raw: str, as_list: bool):
    conv = CONFIG_KEYS[key]
    try:
        if as_list:
            return [conv(v.strip()) for v in str(raw).split(",") if v.strip()]
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags; list-valued keys only for sweeps."""
    merged: dict[str, object] = dict(DEFAULTS)
    if args.command == "sweep":
        merged["context_len"] = ",".join(map(str, SWEEP_DEFAULT_CONTEXTS))
    if args.config:
        merged.update(parse_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    sweeping = args.command == "sweep"
    out = {}
    for key, raw in merged.items():
        as_list = sweeping and key in LIST_KEYS
        value = _convert(key, raw, as_list) if isinstance(raw, str) or as_list else raw
        if not sweeping and key in LIST_KEYS and isinstance(value, list):
            raise ConfigError(f"{key} takes a single value outside sweep")
        out[key] = value
    return out


def _first(value):
    return value[0] if isinstance(value, list) else value


def build_run(settings: dict) -> tuple[harness.RunConfig, harness.WorkloadSpec]:
    tier_fields = {f.name for f in dataclasses.fields(TierConfig)}
    tier_kwargs = {k: _first(v) for k, v in settings.items() if k in tier_fields}
    tier = TierConfig(**tier_kwargs)
    run = harness.RunConfig(
        tier=tier,
        method=settings["baseline"],
        model_scale=settings.get("model_scale", harness.RunConfig.model_scale),
        dtype=settings["dtype"],
    )
    spec_kwargs = dict(
        kind=settings["kind"],
        context_length=_first(settings["context_len"]),
        decode_steps=settings["decode_steps"],
        d_k=tier.d_k,
        d_v=tier.d_v,
        seed=settings["seed"],
    )
    for key in ("needle_position", "needle_length", "needle_strength"):
        if key in settings:
            spec_kwargs[key] = settings[key]
    return run, harness.WorkloadSpec(**spec_kwargs)


def _cmd_run(settings: dict) -> list[Path]:
    run, spec = build_run(settings)
    result = harness.run_benchmark(run, spec)
    out = Path(settings["out"])
    return [harness.emit_report([result.summary], out, settings["format"]), harness.emit_steps(result, out)]


def _cmd_sweep(settings: dict) -> list[Path]:
    run, spec = build_run(settings)
    summaries = harness.sweep(
        run, spec,
        context_lengths=_as_list(settings["context_len"]),
        block_sizes=_as_list(settings.get("block_size")),
        key_bits=_as_list(settings.get("key_bits")),
        value_bits=_as_list(settings.get("value_bits")),
        fetch_fractions=_as_list(settings.get("fetch_fraction")),
    )
    return [harness.emit_report(summaries, settings["out"], settings["format"])]


def _as_list(value) -> list:
    if value is None:
        return []
    return value if isinstance(value, list) else [value]


def _cmd_ablate(settings: dict) -> list[Path]:
    run, spec = build_run(settings)
    summaries = harness.ablate(run, spec)
    return [harness.emit_report(summaries, settings["out"], settings["format"])]


def _cmd_dump_timeline(settings: dict) -> list[Path]:
    run, spec = build_run(settings)
    result = harness.run_benchmark(run, spec)
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "timeline.jsonl"
    with path.open("w") as fh:
        write_timeline(fh, result.timelines)
    return [path]


COMMANDS = {
    "run": (_cmd_run, "run one configuration and write report + per-step records"),
    "sweep": (_cmd_sweep, "grid over context length, block size, bit widths and fetch fraction"),
    "ablate": (_cmd_ablate, "TTKV against every baseline on one workload"),
    "dump-timeline": (_cmd_dump_timeline, "write per-step transfer/compute events as JSON lines"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttkv", description="Temporal-tiered KV cache benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--context-len", dest="context_len",
                       help="tokens of prefill (comma-separated list for sweep)")
        p.add_argument("--decode-steps", dest="decode_steps", type=int)
        p.add_argument("--block-size", dest="block_size")
        p.add_argument("--key-bits", dest="key_bits")
        p.add_argument("--value-bits", dest="value_bits")
        p.add_argument("--fetch-fraction", dest="fetch_fraction")
        p.add_argument("--top-k", dest="top_k_blocks", type=int)
        p.add_argument("--hbm-budget", dest="hbm_budget_bytes", type=int)
        p.add_argument("--d-k", dest="d_k", type=int)
        p.add_argument("--d-v", dest="d_v", type=int)
        p.add_argument("--model-scale", dest="model_scale", type=float)
        p.add_argument("--kind", choices=harness.WORKLOAD_KINDS)
        p.add_argument("--needle-position", dest="needle_position", type=int)
        p.add_argument("--baseline", choices=harness.METHODS)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--format", choices=("csv", "json"))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = resolve_settings(args)
        paths = COMMANDS[args.command][0](settings)
    except (TTKVError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
