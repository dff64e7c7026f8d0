"""Aggregation of per-request outcomes into a serving report."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .allocator import ModelProfile

SCHEMA_VERSION = 1

HIT = "hit"
MISS = "miss"

TIMESERIES_COLUMNS = ("time_s", "hit_queue", "miss_queue", "n_large", "throughput_rpm", "hit_rate")


class InvariantViolation(RuntimeError):
    """An aggregate that cannot happen in a correct run."""


@dataclass(frozen=True)
class RequestOutcome:
    """Lifecycle record for one completed request."""

    id: str
    arrival: float
    dispatch: float
    completion: float
    classification: str  # HIT or MISS
    k: int | None
    serving_model: str
    steps_executed: int
    energy_j: float
    source_age_s: float | None = None

    @property
    def latency(self) -> float:
        return self.completion - self.arrival


@dataclass
class MetricsReport:
    schema_version: int
    n_requests: int
    makespan_s: float
    throughput_rpm: float
    p99_latency_s: float | None
    slo_reference_s: float
    slo_violation_rates: dict[str, float]
    hit_rate: float
    k_histogram: dict[str, int]
    energy_total_j: float
    energy_savings_vs_vanilla: float
    series: list[dict] = field(default_factory=list)


def nearest_rank(values: Sequence[float], q: float) -> float:
    """Exact order statistic: smallest value covering fraction q."""
    if not values:
        raise ValueError("percentile of an empty sample")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    ordered = sorted(values)
    rank = math.ceil(q * len(ordered))
    return ordered[rank - 1]


def p99(outcomes: Sequence[RequestOutcome]) -> float:
    """99th-percentile end-to-end latency."""
    return nearest_rank([o.latency for o in outcomes], 0.99)


def slo_rate(outcomes: Sequence[RequestOutcome], l_ref: float, multiplier: float) -> float:
    """Fraction of requests slower than multiplier x the reference latency."""
    if not outcomes:
        return 0.0
    budget = multiplier * l_ref
    return sum(1 for o in outcomes if o.latency > budget) / len(outcomes)


def energy_account(
    outcomes: Sequence[RequestOutcome], profiles: Iterable[ModelProfile]
) -> tuple[float, float]:
    """(total joules, fractional savings vs all-large full generation)."""
    by_name = {p.name: p for p in profiles}
    larges = [p for p in by_name.values() if p.model_class == "large"]
    if not larges:
        raise ValueError("no large profile among the given profiles")
    large = larges[0]
    total = 0.0
    for o in outcomes:
        profile = by_name.get(o.serving_model)
        if profile is None:
            raise ValueError(f"outcome {o.id} served by unknown model {o.serving_model!r}")
        total += o.steps_executed * profile.per_step_energy_j
    if not outcomes:
        return 0.0, 0.0
    reference = len(outcomes) * large.total_steps * large.per_step_energy_j
    savings = 1.0 - total / reference if reference > 0 else 0.0
    return total, savings


def slo_reference_latency(large: ModelProfile, overhead_s: float) -> float:
    """Latency of one full large-model generation, the SLO yardstick."""
    return large.total_steps * large.per_step_latency_s + overhead_s


def aggregate(
    outcomes: Sequence[RequestOutcome],
    profiles: Iterable[ModelProfile],
    overhead_s: float,
    slo_multipliers: Sequence[float] = (2.0, 4.0),
    series: list[dict] | None = None,
) -> MetricsReport:
    """Fold outcomes into a report, checking aggregation invariants."""
    profiles = list(profiles)
    by_name = {p.name: p for p in profiles}
    large = next(p for p in profiles if p.model_class == "large")

    hits = [o for o in outcomes if o.classification == HIT]
    misses = [o for o in outcomes if o.classification == MISS]
    if len(hits) + len(misses) != len(outcomes):
        raise InvariantViolation("request classified as neither hit nor miss")
    for o in outcomes:
        if not o.arrival <= o.dispatch <= o.completion:
            raise InvariantViolation(f"outcome {o.id}: arrival/dispatch/completion out of order")
        profile = by_name[o.serving_model]
        expected = profile.total_steps - (o.k or 0)
        if o.steps_executed != expected:
            raise InvariantViolation(
                f"outcome {o.id}: executed {o.steps_executed} steps, expected {expected}"
            )

    k_histogram: dict[str, int] = {}
    for o in hits:
        key = str(o.k)
        k_histogram[key] = k_histogram.get(key, 0) + 1
    if sum(k_histogram.values()) != len(hits):
        raise InvariantViolation("k histogram does not cover all hits")

    n = len(outcomes)
    if n:
        makespan = max(o.completion for o in outcomes) - min(o.arrival for o in outcomes)
        throughput = n / makespan * 60.0 if makespan > 0 else 0.0
        tail = p99(outcomes)
    else:
        makespan = 0.0
        throughput = 0.0
        tail = None

    l_ref = slo_reference_latency(large, overhead_s)
    total_j, savings = energy_account(outcomes, profiles)
    return MetricsReport(
        schema_version=SCHEMA_VERSION,
        n_requests=n,
        makespan_s=makespan,
        throughput_rpm=throughput,
        p99_latency_s=tail,
        slo_reference_s=l_ref,
        slo_violation_rates={
            _mult_key(m): slo_rate(outcomes, l_ref, m) for m in slo_multipliers
        },
        hit_rate=len(hits) / n if n else 0.0,
        k_histogram=dict(sorted(k_histogram.items(), key=lambda kv: int(kv[0]))),
        energy_total_j=total_j,
        energy_savings_vs_vanilla=savings,
        series=list(series) if series else [],
    )


def _mult_key(m: float) -> str:
    return f"{m:g}x"


def emit(report: MetricsReport, out_dir) -> tuple[Path, Path]:
    """Write summary JSON and the per-tick CSV; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary_path = out / "summary.json"
    series_path = out / "timeseries.csv"
    payload = asdict(report)
    payload.pop("series")
    summary_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    with open(series_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TIMESERIES_COLUMNS)
        writer.writeheader()
        for row in report.series:
            writer.writerow({col: row.get(col, "") for col in TIMESERIES_COLUMNS})
    return summary_path, series_path
