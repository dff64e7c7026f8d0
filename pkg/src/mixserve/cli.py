"""Command-line entry point for reproducible serving experiments."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, SimConfig, effective_flat, load_sim_config
from .engine import run_simulation
from .metrics import InvariantViolation, emit
from .workload import (
    CalibrationError,
    TraceError,
    calibrate_beta,
    generate_trace,
    load_trace,
    median_within_cluster_similarity,
    save_trace,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _prepare_out(args, cfg: SimConfig) -> Path:
    """Create the output directory and snapshot the effective config."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "effective_config.json", effective_flat(cfg))
    return out


def _overrides(args) -> dict:
    ov: dict = {}
    if getattr(args, "seed", None) is not None:
        ov["sim.seed"] = args.seed
        ov["workload.seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        ov["sim.mode"] = args.mode
    return ov


def _run_one(cfg: SimConfig, trace, out: Path):
    result = run_simulation(cfg, trace)
    emit(result.report, out)
    _write_jsonl(out / "requests.jsonl", result.audit)
    _write_jsonl(out / "monitor.jsonl", result.monitor_decisions)
    return result


def cmd_gen_trace(args) -> int:
    cfg = load_sim_config(args.config, _overrides(args))
    out = _prepare_out(args, cfg)
    records = generate_trace(cfg.workload)
    save_trace(out / "trace.jsonl", records, seed=cfg.workload.seed)
    print(f"wrote {len(records)} records to {out / 'trace.jsonl'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_sim_config(args.config, _overrides(args))
    out = _prepare_out(args, cfg)
    trace = load_trace(args.trace)
    result = _run_one(cfg, trace, out)
    if args.export_cache and result.cache is not None:
        result.cache.export_jsonl(out / "cache.jsonl")
    r = result.report
    print(
        f"{cfg.name}: {r.n_requests} requests, throughput {r.throughput_rpm:.2f}/min, "
        f"hit rate {r.hit_rate:.3f}, p99 {r.p99_latency_s if r.p99_latency_s is None else round(r.p99_latency_s, 1)} s"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_sim_config(args.config, _overrides(args))
    out = _prepare_out(args, cfg)
    rates = [float(r) for r in args.rates.split(",") if r.strip()]
    if not rates:
        raise ConfigError("--rates: need at least one rate")
    rows: list[dict] = []
    sweep_path = out / "sweep.csv"
    try:
        for rate in rates:
            wl = replace(
                cfg.workload, rate_schedule=[(cfg.workload.duration_s, rate)]
            )
            sub = replace(cfg, workload=wl, name=f"{cfg.name}-rate{rate:g}")
            sub_out = out / f"rate_{rate:g}"
            sub_out.mkdir(parents=True, exist_ok=True)
            _write_json(sub_out / "effective_config.json", effective_flat(sub))
            trace = generate_trace(sub.workload)
            result = _run_one(sub, trace, sub_out)
            r = result.report
            row = {
                "rate_rpm": rate,
                "n_requests": r.n_requests,
                "throughput_rpm": r.throughput_rpm,
                "p99_latency_s": r.p99_latency_s,
                "hit_rate": r.hit_rate,
                "energy_savings": r.energy_savings_vs_vanilla,
            }
            for mult, rate_v in r.slo_violation_rates.items():
                row[f"slo_violation_{mult}"] = rate_v
            rows.append(row)
            print(f"rate {rate:g}/min: p99 {r.p99_latency_s:.1f} s, slo {r.slo_violation_rates}")
    finally:
        if rows:
            _write_sweep_csv(sweep_path, rows)
    return EXIT_OK


def _write_sweep_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def cmd_compare(args) -> int:
    paths = [p for p in args.configs.split(",") if p.strip()]
    if not paths:
        raise ConfigError("--configs: need at least one config")
    configs: list[SimConfig] = []
    for p in paths:
        cfg = load_sim_config(p, _overrides(args))
        if cfg.name == "run":
            cfg = replace(cfg, name=Path(p).stem)
        configs.append(cfg)
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate config names in --configs: {names}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "effective_configs.json", {c.name: effective_flat(c) for c in configs})
    trace = load_trace(args.trace)
    rows = []
    for cfg in configs:
        sub_out = out / cfg.name
        sub_out.mkdir(parents=True, exist_ok=True)
        result = _run_one(cfg, trace, sub_out)
        r = result.report
        rows.append(
            {
                "name": cfg.name,
                "throughput_rpm": r.throughput_rpm,
                "hit_rate": r.hit_rate,
                "p99_latency_s": r.p99_latency_s,
                "energy_savings": r.energy_savings_vs_vanilla,
            }
        )
    base = next((row for row in rows if row["name"] == "vanilla"), rows[0])
    base_tp = base["throughput_rpm"]
    for row in rows:
        row["normalized_throughput"] = (
            row["throughput_rpm"] / base_tp if base_tp > 0 else 0.0
        )
    _write_json(out / "comparison.json", rows)
    _write_sweep_csv(out / "comparison.csv", rows)
    for row in rows:
        print(
            f"{row['name']}: {row['normalized_throughput']:.2f}x vanilla, "
            f"hit rate {row['hit_rate']:.3f}, energy savings {row['energy_savings']:.3f}"
        )
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = load_sim_config(args.config, _overrides(args))
    out = _prepare_out(args, cfg)
    beta = calibrate_beta(args.target, cfg.workload)
    achieved = median_within_cluster_similarity(cfg.workload, beta)
    # a full workload section plus thresholds, so the file can stand alone
    # as a config fragment and re-running with it is a fixed point
    flat = effective_flat(cfg)
    flat["workload.beta"] = beta
    keys = sorted(k for k in flat if k.startswith("workload.")) + ["cache.dim", "cache.thresholds"]
    lines = [f"# calibration for target median similarity {args.target:g}"]
    lines += [f"{key} = {json.dumps(flat[key])}" for key in keys]
    lines.append("")
    (out / "calibration.cfg").write_text("\n".join(lines), encoding="utf-8")
    print(f"beta {beta:.6f} achieves median similarity {achieved:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixserve",
        description="Cache-aware mixture-of-models serving simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, trace=False, rates=False, target=False, configs=False):
        if configs:
            p.add_argument("--configs", required=True, help="comma-separated config paths")
        else:
            p.add_argument("--config", required=True, help="config file (flat text or JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override sim and workload seed")
        if trace:
            p.add_argument("--trace", required=True, help="trace JSONL path")
        if rates:
            p.add_argument("--rates", required=True, help="comma-separated request rates (req/min)")
        if target:
            p.add_argument("--target", type=float, required=True, help="target median similarity")

    p = sub.add_parser("gen-trace", help="generate a synthetic trace")
    common(p)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("simulate", help="run one simulation")
    common(p, trace=True)
    p.add_argument("--mode", choices=["quality", "throughput"], default=None)
    p.add_argument("--export-cache", action="store_true", help="dump the final cache snapshot")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="simulate across request rates")
    common(p, rates=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="run several configs on one trace")
    common(p, trace=True, configs=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("calibrate", help="fit image-noise beta to a similarity target")
    common(p, target=True)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceError, CalibrationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
