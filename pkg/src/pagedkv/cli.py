"""Command-line driver: ``pagedkv run`` and ``pagedkv sweep``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError, PagedKVError
from .workload import WorkloadConfig, run, sweep


def _parse_prompt_len(text: str) -> tuple[int, int]:
    if ":" in text:
        lo, hi = text.split(":", 1)
        return int(lo), int(hi)
    fixed = int(text)
    return fixed, fixed


def _parse_rates(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="config file (JSON or key=value lines)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--layers", type=int)
    parser.add_argument("--query-heads", type=int, dest="query_heads")
    parser.add_argument("--kv-heads", type=int, dest="kv_heads")
    parser.add_argument("--head-dim", type=int, dest="head_dim")
    parser.add_argument("--block-size", type=int, dest="block_size")
    parser.add_argument("--num-blocks", type=int, dest="num_blocks")
    parser.add_argument(
        "--prompt-len",
        dest="prompt_len",
        help="fixed length N or uniform range LO:HI",
    )
    parser.add_argument("--requests", type=int)
    parser.add_argument("--output-tokens", type=int, dest="output_tokens")
    parser.add_argument("--rate", type=float)
    parser.add_argument("--max-cache-tokens", type=int, dest="max_cache_tokens")
    parser.add_argument("--policy", choices=["prefill-preempt", "every-step", "none"])
    parser.add_argument("--metric-mode", choices=["window", "full"], dest="metric_mode")
    parser.add_argument("--aggregation", choices=["L1", "L2"])
    parser.add_argument("--window", type=int)
    parser.add_argument("--pool", type=int)
    parser.add_argument("--excluded-window", type=int, dest="excluded_window")
    parser.add_argument("--kv-limit", type=int, dest="kv_limit")
    parser.add_argument("--compress-every", type=int, dest="compress_every")
    parser.add_argument("--token-threshold", type=int, dest="token_threshold")
    parser.add_argument("--budget-floor", type=int, dest="budget_floor")
    parser.add_argument("--budget-mode", choices=["min", "max"], dest="budget_mode")
    parser.add_argument("--max-steps", type=int, dest="max_steps")
    parser.add_argument("--out", type=Path, help="write the report here instead of stdout")


def _load_config_file(path: Path) -> dict:
    text = path.read_text()
    if text.lstrip().startswith("{"):
        values = json.loads(text)
    else:
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError("config", f"expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


_INT_FIELDS = {
    f.name
    for f in fields(WorkloadConfig)
    if f.name
    not in ("prompt_len", "rate", "policy", "metric_mode", "aggregation", "budget_mode")
}


def _coerce(key: str, value):
    if key == "prompt_len":
        if isinstance(value, str):
            return _parse_prompt_len(value)
        if isinstance(value, (list, tuple)):
            return (int(value[0]), int(value[-1]))
        return (int(value), int(value))
    if key == "rate":
        return float(value)
    if key in _INT_FIELDS and value is not None and not isinstance(value, bool):
        return int(value)
    return value


def build_config(args: argparse.Namespace) -> WorkloadConfig:
    known = {f.name for f in fields(WorkloadConfig)}
    values: dict = {}
    if args.config is not None:
        for key, value in _load_config_file(args.config).items():
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
            values[key] = _coerce(key, value)
    for key in known:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            values[key] = _coerce(key, flag_value)
    cfg = WorkloadConfig(**values)
    cfg.validate()
    return cfg


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    report = run(cfg, record_schedules=args.log_schedules)
    _emit(report.to_json() + "\n", args.out)
    if args.steps_csv is not None:
        args.steps_csv.write_text(report.steps_csv())
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    rates = _parse_rates(args.rates)
    _emit(sweep(cfg, rates), args.out)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="pagedkv",
        description="Paged KV cache compression workload simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="run one workload and report per-step stats")
    _add_config_flags(run_parser)
    run_parser.add_argument(
        "--steps-csv", type=Path, dest="steps_csv", help="also write per-step CSV here"
    )
    run_parser.add_argument(
        "--log-schedules",
        action="store_true",
        help="include per-round compression schedules in the report",
    )
    run_parser.set_defaults(func=_cmd_run)

    sweep_parser = sub.add_parser("sweep", help="run once per compression rate")
    _add_config_flags(sweep_parser)
    sweep_parser.add_argument(
        "--rates", default="1,2,4,8", help="comma-separated compression rates"
    )
    sweep_parser.set_defaults(func=_cmd_sweep)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        error = {"error": {"type": "config", "field": exc.field, "message": exc.message}}
        sys.stderr.write(json.dumps(error) + "\n")
        return 2
    except PagedKVError as exc:
        error = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        sys.stderr.write(json.dumps(error) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
