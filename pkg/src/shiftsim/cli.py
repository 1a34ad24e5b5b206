"""Command-line entry point.

Three subcommands produce reproducible artifacts:

  verify  run the invariant suite, print one line per check, optionally
          write a JSON report; exit 1 if any check fails
  bench   replay a trace file through the serving loop and write
          metrics.csv, steps.jsonl, and summary.json to the out dir
  sweep   run bench once per token threshold and tabulate the summaries

Exit codes: 0 success, 1 check or benchmark failure, 2 usage or config
error. Every artifact embeds the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

from .config import RunConfig
from .errors import ConfigError, ContractViolation
from .serving import (
    METRICS_HEADER,
    read_trace,
    run_serving_loop,
    summarize,
    write_metrics_csv,
    write_step_log,
    write_summary,
)
from .tensor_core import Precision
from .verify_checks import run_verify


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    updates = {}
    if getattr(args, "policy", None):
        updates["policy_kind"] = args.policy
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.precision is not None:
        try:
            updates["precision"] = Precision.parse(args.precision)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if updates:
        cfg = cfg.replace(**updates)
    return cfg.validate()


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    report = run_verify(cfg)
    for c in report["checks"]:
        print(f'{c["status"].upper():>4}  {c["name"]:<28} measured={c["measured"]}')
    print(f'overall: {report["status"]}')
    if args.out:
        out = _ensure_out(args.out)
        with open(os.path.join(out, "verify_report.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0 if report["status"] == "pass" else 1


def _run_bench(cfg: RunConfig, trace_path: str) -> dict:
    trace = read_trace(trace_path)
    engine = cfg.build_engine()
    result = run_serving_loop(
        engine,
        trace,
        cfg.policy(),
        cfg.cost_model,
        speculation=cfg.speculation,
        seed=cfg.seed,
    )
    summary = summarize(result)
    summary["config"] = cfg.resolved()
    summary["seed"] = cfg.seed
    return {"result": result, "summary": summary}


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = _ensure_out(args.out)
    run = _run_bench(cfg, args.trace)
    write_metrics_csv(os.path.join(out, "metrics.csv"), run["result"].metrics)
    write_step_log(os.path.join(out, "steps.jsonl"), run["result"].steps)
    write_summary(os.path.join(out, "summary.json"), run["summary"])
    s = run["summary"]
    if s.get("empty"):
        print(f'bench: empty trace, artifacts written to {out}')
    else:
        print(
            f'bench: {s["requests"]} requests, median ttft '
            f'{s["median_ttft_ms"]:.3f} ms, median tpot {s["median_tpot_ms"]:.3f} ms, '
            f'throughput {s["combined_throughput_tokens_per_s"]:.1f} tok/s -> {out}'
        )
    return 0


SWEEP_FIELDS = (
    "token_threshold",
    "requests",
    "median_ttft_ms",
    "p99_ttft_ms",
    "median_tpot_ms",
    "p99_tpot_ms",
    "combined_throughput_tokens_per_s",
    "mode_shift_count",
)


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if not args.tau_list:
        raise ConfigError("sweep requires --tau-list with at least one threshold")
    try:
        taus = [int(x) for x in args.tau_list.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --tau-list: {exc}") from exc
    if not taus or any(t < 1 for t in taus):
        raise ConfigError("--tau-list values must be integers >= 1")
    out = _ensure_out(args.out)
    rows = []
    for tau in taus:
        row_cfg = cfg.replace(policy_kind="shift", token_threshold=tau).validate()
        summary = _run_bench(row_cfg, args.trace)["summary"]
        rows.append({"token_threshold": tau, **{k: summary.get(k) for k in SWEEP_FIELDS[1:]}})
    with open(os.path.join(out, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(SWEEP_FIELDS) + "\n")
        for r in rows:
            fh.write(",".join(str(r[k]) for k in SWEEP_FIELDS) + "\n")
    with open(os.path.join(out, "sweep.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {"config": cfg.resolved(), "seed": cfg.seed, "rows": rows},
            fh,
            sort_keys=True,
            indent=2,
        )
        fh.write("\n")
    for r in rows:
        print(
            f'tau={r["token_threshold"]:>6}  shifts={r["mode_shift_count"]:>4}  '
            f'throughput={r["combined_throughput_tokens_per_s"]:.1f} tok/s'
        )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftsim",
        description="Deterministic multi-device inference simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, trace_required: bool) -> None:
        p.add_argument("--config", help="path to a JSON run configuration")
        p.add_argument("--trace", required=trace_required, help="JSON-lines trace file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument(
            "--policy",
            choices=("fixed_tp", "fixed_sp", "shift"),
            help="override the configured parallelism policy",
        )
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument(
            "--precision", choices=("f32", "f64"), help="override the configured precision"
        )

    pv = sub.add_parser("verify", help="run the invariant suite")
    common(pv, trace_required=False)
    pb = sub.add_parser("bench", help="replay a trace and write metrics")
    common(pb, trace_required=True)
    ps = sub.add_parser("sweep", help="bench once per shift threshold")
    common(ps, trace_required=True)
    ps.add_argument("--tau-list", help="comma-separated token thresholds, e.g. 8,32,128")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"verify": cmd_verify, "bench": cmd_bench, "sweep": cmd_sweep}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
