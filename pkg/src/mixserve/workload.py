"""Synthetic workload generation and trace I/O.

Arrivals follow a piecewise-constant-rate Poisson process. Query
embeddings are drawn around cluster centers on the unit sphere; clusters
retire and respawn on a staggered lifetime schedule, which is what gives
traces their temporal locality. Image embeddings are the query blended
with fresh noise, standing in for the text-to-image embedding gap.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .cache import DEFAULT_DIM, normalize

ARRIVAL_STREAM = 0
QUERY_STREAM = 1
CALIBRATION_STREAM = 2


class TraceError(ValueError):
    """Raised for malformed trace files; message names the offending line."""


class CalibrationError(RuntimeError):
    """Raised when no beta can reach the requested similarity target."""


@dataclass(frozen=True)
class TraceRecord:
    id: str
    arrival_ms: int
    embedding: np.ndarray


@dataclass
class GeneratorConfig:
    """Knobs for synthetic trace generation."""

    rate_schedule: list[tuple[float, float]] = field(
        default_factory=lambda: [(3600.0, 10.0)]
    )  # (duration_s, requests/min)
    n_clusters: int = 64
    cluster_lifetime_s: float | None = 14400.0  # None: clusters never retire
    spread: float = 0.35
    beta: float = 0.92
    dim: int = DEFAULT_DIM
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.spread < 0:
            raise ValueError("spread must be >= 0")
        if self.cluster_lifetime_s is not None and self.cluster_lifetime_s <= 0:
            raise ValueError("cluster_lifetime_s must be positive or None")
        for dur, rate in self.rate_schedule:
            if dur <= 0:
                raise ValueError(f"segment duration must be positive, got {dur}")
            if rate < 0:
                raise ValueError(f"segment rate must be >= 0, got {rate}")

    @property
    def duration_s(self) -> float:
        return math.fsum(dur for dur, _ in self.rate_schedule)


def gen_arrivals(cfg: GeneratorConfig) -> list[float]:
    """Poisson arrival times in seconds, one segment at a time."""
    rng = np.random.default_rng([cfg.seed, ARRIVAL_STREAM])
    times: list[float] = []
    start = 0.0
    for duration, rate in cfg.rate_schedule:
        end = start + duration
        if rate > 0:
            mean_gap = 60.0 / rate
            t = start
            while True:
                t += rng.exponential(mean_gap)
                if t >= end:
                    break
                times.append(t)
        start = end
    return times


class _ClusterPool:
    """Fixed pool of cluster slots with staggered center replacement."""

    def __init__(self, cfg: GeneratorConfig, horizon_s: float, rng: np.random.Generator):
        self.n = cfg.n_clusters
        self.lifetime = cfg.cluster_lifetime_s
        if self.lifetime is None:
            epochs = [1] * self.n
            self.phases = [math.inf] * self.n
        else:
            # slot j first refreshes at phase_j, then every lifetime after
            self.phases = [(j + 1) * self.lifetime / self.n for j in range(self.n)]
            epochs = [
                1 + max(0, 1 + math.floor((horizon_s - p) / self.lifetime))
                if horizon_s >= p
                else 1
                for p in self.phases
            ]
        self.centers = [
            [normalize(rng.standard_normal(cfg.dim)) for _ in range(epochs[j])]
            for j in range(self.n)
        ]

    def center_at(self, slot: int, t: float) -> np.ndarray:
        if self.lifetime is None or t < self.phases[slot]:
            epoch = 0
        else:
            epoch = 1 + int((t - self.phases[slot]) // self.lifetime)
        return self.centers[slot][epoch]


def gen_queries(cfg: GeneratorConfig, arrivals: list[float]) -> list[TraceRecord]:
    """Draw one clustered query embedding per arrival."""
    rng = np.random.default_rng([cfg.seed, QUERY_STREAM])
    horizon = max(arrivals) if arrivals else cfg.duration_s
    pool = _ClusterPool(cfg, horizon, rng)
    records = []
    for i, t in enumerate(arrivals):
        slot = int(rng.integers(cfg.n_clusters))
        center = pool.center_at(slot, t)
        if cfg.spread > 0:
            q = normalize(center + cfg.spread * rng.standard_normal(cfg.dim))
        else:
            q = center
        records.append(TraceRecord(f"q{i:06d}", int(round(t * 1000.0)), q))
    return records


def generate_trace(cfg: GeneratorConfig) -> list[TraceRecord]:
    return gen_queries(cfg, gen_arrivals(cfg))


def image_embedding(query: np.ndarray, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Embedding of the image generated for a query.

    beta 1 reproduces the query exactly; beta 0 is an unrelated direction.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if beta == 1.0:
        return normalize(query)
    return normalize(beta * query + (1.0 - beta) * rng.standard_normal(query.shape[0]))


def _rowwise_unit(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


@lru_cache(maxsize=2)
def _calibration_draws(seed: int, dim: int, spread: float, samples: int):
    rng = np.random.default_rng([seed, CALIBRATION_STREAM])
    centers = _rowwise_unit(rng.standard_normal((samples, dim)))
    g1 = rng.standard_normal((samples, dim))
    g2 = rng.standard_normal((samples, dim))
    gi = rng.standard_normal((samples, dim))
    q1 = _rowwise_unit(centers + spread * g1)
    q2 = _rowwise_unit(centers + spread * g2)
    return q1, q2, gi


def median_within_cluster_similarity(
    cfg: GeneratorConfig, beta: float, samples: int = 8000
) -> float:
    """Monte Carlo median cosine between a query and a clustermate's image.

    Draws are fixed by cfg.seed, so repeated calls see the same noise and
    the statistic moves smoothly with beta.
    """
    q1, q2, gi = _calibration_draws(cfg.seed, cfg.dim, cfg.spread, samples)
    img = _rowwise_unit(beta * q1 + (1.0 - beta) * gi)
    sims = np.einsum("ij,ij->i", q2, img)
    return float(np.median(sims))


def calibrate_beta(
    target_similarity: float,
    cfg: GeneratorConfig,
    tol: float = 0.005,
    max_iter: int = 50,
    samples: int = 8000,
) -> float:
    """Bisect beta until the median within-cluster similarity hits target."""
    if not 0.0 < target_similarity < 1.0:
        raise CalibrationError(f"target must lie in (0, 1), got {target_similarity}")
    lo, hi = 0.0, 1.0
    m_lo = median_within_cluster_similarity(cfg, lo, samples)
    m_hi = median_within_cluster_similarity(cfg, hi, samples)
    if not m_lo - tol <= target_similarity <= m_hi + tol:
        raise CalibrationError(
            f"target {target_similarity} outside achievable median range "
            f"[{m_lo:.4f}, {m_hi:.4f}] for spread={cfg.spread}, dim={cfg.dim}"
        )
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        m = median_within_cluster_similarity(cfg, mid, samples)
        if abs(m - target_similarity) <= tol:
            return mid
        if m < target_similarity:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"no convergence after {max_iter} iterations; last median "
        f"{m:.4f} for beta={mid:.6f}, target {target_similarity}"
    )


def warmup_entries(
    cfg: GeneratorConfig,
    horizon_s: float,
    per_cluster: int = 2,
    query_side: bool = False,
    skip_every: int | None = None,
    seed: int = 777,
) -> list:
    """Cache entries emulating a steady-state warm cache at time zero.

    Builds per-cluster entries around the same epoch-0 centers the trace
    generator will use. skip_every leaves every n-th cluster uncovered,
    mimicking clusters whose center refreshed recently enough that nothing
    of theirs is cached yet. query_side stores the query embedding itself
    instead of a generated-image embedding.
    """
    from .cache import CacheEntry

    rng_pool = np.random.default_rng([cfg.seed, QUERY_STREAM])
    pool = _ClusterPool(cfg, horizon_s, rng_pool)
    rng = np.random.default_rng(seed)
    entries = []
    i = 0
    for slot in range(cfg.n_clusters):
        if skip_every is not None and slot % skip_every == 0:
            continue
        center = pool.centers[slot][0]
        for _ in range(per_cluster):
            q = normalize(center + cfg.spread * rng.standard_normal(cfg.dim))
            emb = q if query_side else image_embedding(q, cfg.beta, rng)
            entries.append(CacheEntry(f"warm{i:05d}", emb, "large", i, 0.0))
            i += 1
    return entries


def save_trace(path, records: list[TraceRecord], seed: int | None = None) -> None:
    """Write JSONL, one record per line, with a comment header."""
    with open(path, "w", encoding="utf-8") as fh:
        if seed is not None:
            fh.write(f"# trace seed={seed} records={len(records)}\n")
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "id": r.id,
                        "arrival_ms": r.arrival_ms,
                        "embedding": [float(x) for x in r.embedding],
                    }
                )
            )
            fh.write("\n")


def load_trace(path) -> list[TraceRecord]:
    """Parse and validate a JSONL trace; comment lines start with '#'."""
    records: list[TraceRecord] = []
    prev_ms = None
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
                rid = str(rec["id"])
                arrival_ms = int(rec["arrival_ms"])
                raw = np.asarray(rec["embedding"], dtype=np.float64)
            except (KeyError, ValueError, TypeError) as exc:
                raise TraceError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if prev_ms is not None and arrival_ms < prev_ms:
                raise TraceError(
                    f"{path}:{lineno}: arrival_ms {arrival_ms} precedes {prev_ms}"
                )
            if dim is None:
                dim = raw.shape[0] if raw.ndim == 1 else -1
            if raw.ndim != 1 or raw.shape[0] != dim:
                raise TraceError(f"{path}:{lineno}: embedding dimension mismatch")
            if not np.all(np.isfinite(raw)):
                raise TraceError(f"{path}:{lineno}: embedding has non-finite values")
            norm = float(np.linalg.norm(raw))
            if norm == 0.0:
                raise TraceError(f"{path}:{lineno}: embedding is the zero vector")
            # keep already-unit vectors untouched so save/load round-trips exactly
            emb = raw if abs(norm - 1.0) <= 1e-6 else raw / norm
            prev_ms = arrival_ms
            records.append(TraceRecord(rid, arrival_ms, emb))
    return records
