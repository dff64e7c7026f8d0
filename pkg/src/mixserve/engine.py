"""Deterministic discrete-event simulation of the serving cluster.

Events at equal timestamps resolve in a fixed kind order (completions
first, then switch completions, monitor ticks, and finally arrivals) and
by insertion sequence within a kind, so a (config, trace, seed) triple
always replays the same run.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .allocator import GlobalMonitor, ModelProfile, MonitorSnapshot
from .cache import SemanticCache
from .config import SimConfig
from .metrics import HIT, MISS, MetricsReport, RequestOutcome, aggregate
from .scheduler import (
    QueuePair,
    Request,
    STATUS_DONE,
    STATUS_RUNNING,
    classify,
    dispatch,
    on_completion,
)
from .workload import TraceRecord, image_embedding

EVENT_COMPLETION = 0
EVENT_SWITCH_DONE = 1
EVENT_MONITOR_TICK = 2
EVENT_ARRIVAL = 3

IMAGE_STREAM = 3


def service_time(r: Request, profile: ModelProfile, overhead_s: float) -> float:
    """Seconds to serve a request on the given profile.

    Misses run every step; hits skip the first k. The overhead term covers
    encode/decode and handoff costs around the denoising loop.
    """
    steps = profile.total_steps - (r.k or 0)
    return steps * profile.per_step_latency_s + overhead_s


@dataclass
class Worker:
    id: int
    profile: ModelProfile
    busy_until: float | None = None
    switching_until: float | None = None
    current: Request | None = None
    pending_profile: ModelProfile | None = None

    @property
    def idle(self) -> bool:
        return self.busy_until is None and self.switching_until is None

    @property
    def target_profile(self) -> ModelProfile:
        return self.pending_profile if self.pending_profile is not None else self.profile


@dataclass
class SimResult:
    report: MetricsReport
    outcomes: list[RequestOutcome] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)
    monitor_decisions: list[dict] = field(default_factory=list)
    cache: SemanticCache | None = None


def apply_allocation(
    plan_n_large: int,
    small_profile: ModelProfile,
    large_profile: ModelProfile,
    workers: list[Worker],
) -> list[tuple[Worker, ModelProfile]]:
    """Minimal set of (worker, new profile) reassignments for a plan.

    Keeps existing assignments where possible; when workers must flip
    class, idle ones go first (lower ids break ties). Small workers on a
    stale small profile are retargeted too.
    """
    large_like = [w for w in workers if w.target_profile.model_class == "large"]
    small_like = [w for w in workers if w.target_profile.model_class == "small"]
    switches: list[tuple[Worker, ModelProfile]] = []

    def pick_order(ws: list[Worker]) -> list[Worker]:
        return sorted(ws, key=lambda w: (not w.idle, w.id))

    excess = len(large_like) - plan_n_large
    if excess > 0:
        for w in pick_order(large_like)[:excess]:
            switches.append((w, small_profile))
    elif excess < 0:
        for w in pick_order(small_like)[: -excess]:
            switches.append((w, large_profile))
            small_like.remove(w)
    for w in small_like:
        if w.target_profile.name != small_profile.name:
            switches.append((w, small_profile))
    return switches


class Simulation:
    """One simulation run; use run() to execute to completion."""

    def __init__(self, cfg: SimConfig, trace: list[TraceRecord]):
        self.cfg = cfg
        self.trace = trace
        self.table = cfg.threshold_table()
        self.cache = cfg.build_cache()
        if cfg.cache_preload:
            self.cache.import_jsonl(cfg.cache_preload)
        self.queues = QueuePair()
        self.rng_image = np.random.default_rng([cfg.seed, IMAGE_STREAM])
        self.small_by_name = {p.name: p for p in cfg.small_profiles}
        self.profile_by_name = {p.name: p for p in cfg.profiles()}

        n0 = cfg.initial_n_large if cfg.initial_n_large is not None else cfg.n_workers
        self.workers = [
            Worker(i, cfg.large_profile if i < n0 else cfg.small_profiles[0])
            for i in range(cfg.n_workers)
        ]
        self.monitor = (
            GlobalMonitor(
                cfg.large_profile,
                cfg.small_profiles,
                cfg.n_workers,
                mode=cfg.mode,
                gains=cfg.pid_gains,
                integral_bound=cfg.integral_bound,
                escalation_patience=cfg.escalation_patience,
                initial_n_large=n0,
            )
            if cfg.monitor_enabled
            else None
        )

        self.clock = 0.0
        self._heap: list[tuple[float, int, int, object]] = []
        self._seq = 0
        self.outcomes: list[RequestOutcome] = []
        self.audit: list[dict] = []
        self.series: list[dict] = []
        self._arrivals_pending = 0
        self._period_arrivals = 0
        self._period_hits = 0
        self._period_completions = 0
        self._period_k: dict[int, int] = {}

    def _push(self, time: float, kind: int, payload: object = None) -> None:
        heapq.heappush(self._heap, (time, kind, self._seq, payload))
        self._seq += 1

    def _live_work(self) -> bool:
        if self._arrivals_pending or len(self.queues):
            return True
        return any(not w.idle for w in self.workers)

    def run(self) -> SimResult:
        if self.trace:
            dim = self.trace[0].embedding.shape[0]
            if dim != self.cfg.cache_dim:
                raise ValueError(
                    f"trace embeddings have dimension {dim}, config expects {self.cfg.cache_dim}"
                )
        for rec in self.trace:
            self._push(rec.arrival_ms / 1000.0, EVENT_ARRIVAL, rec)
            self._arrivals_pending += 1
        if self.monitor is not None and self.trace:
            self._push(self.cfg.monitor_period_s, EVENT_MONITOR_TICK)

        while self._heap:
            time, kind, _, payload = heapq.heappop(self._heap)
            self.clock = time
            if kind == EVENT_ARRIVAL:
                self._on_arrival(payload)
            elif kind == EVENT_COMPLETION:
                self._on_completion(payload)
            elif kind == EVENT_SWITCH_DONE:
                self._on_switch_done(payload)
            else:
                self._on_monitor_tick()

        report = aggregate(
            self.outcomes,
            self.cfg.profiles(),
            self.cfg.overhead_s,
            self.cfg.slo_multipliers,
            self.series,
        )
        decisions = self.monitor.decisions if self.monitor is not None else []
        return SimResult(report, self.outcomes, self.audit, decisions, self.cache)

    # -- event handlers -----------------------------------------------------

    def _on_arrival(self, rec: TraceRecord) -> None:
        self._arrivals_pending -= 1
        r = Request(rec.id, self.clock, rec.embedding)
        classify(r, self.cache, self.table, self.queues)
        self._period_arrivals += 1
        if r.is_hit:
            self._period_hits += 1
            self._period_k[r.k] = self._period_k.get(r.k, 0) + 1
        self._dispatch_idle()

    def _on_completion(self, payload) -> None:
        worker, r = payload
        r._advance(STATUS_DONE)
        r.completion_time = self.clock
        profile = self.profile_by_name[r.serving_model]
        steps = profile.total_steps - (r.k or 0)
        self.outcomes.append(
            RequestOutcome(
                id=r.id,
                arrival=r.arrival_time,
                dispatch=r.dispatch_time,
                completion=self.clock,
                classification=HIT if r.is_hit else MISS,
                k=r.k,
                serving_model=r.serving_model,
                steps_executed=steps,
                energy_j=steps * profile.per_step_energy_j,
                source_age_s=r.source_age_s,
            )
        )
        self.audit.append(
            {
                "id": r.id,
                "arrival": r.arrival_time,
                "classified": HIT if r.is_hit else MISS,
                "k": r.k,
                "queue_wait": r.dispatch_time - r.arrival_time,
                "service_time": self.clock - r.dispatch_time,
                "worker": worker.id,
                "model": r.serving_model,
                "completion": self.clock,
            }
        )
        self._period_completions += 1
        if self.cache.admits(profile.model_class):
            if self.cfg.store_query_embedding:
                emb = r.query_embedding
            else:
                emb = image_embedding(r.query_embedding, self.cfg.workload.beta, self.rng_image)
            on_completion(r, self.cache, emb, profile.model_class, self.clock)
        worker.current = None
        worker.busy_until = None
        if worker.pending_profile is not None and worker.pending_profile.name != worker.profile.name:
            self._begin_switch(worker)
        else:
            worker.pending_profile = None
            self._dispatch_idle()

    def _begin_switch(self, worker: Worker) -> None:
        lat = worker.pending_profile.switch_latency_s
        worker.switching_until = self.clock + lat
        self._push(worker.switching_until, EVENT_SWITCH_DONE, worker)

    def _on_switch_done(self, worker: Worker) -> None:
        if worker.pending_profile is not None:
            worker.profile = worker.pending_profile
            worker.pending_profile = None
        worker.switching_until = None
        self._dispatch_idle()

    def _on_monitor_tick(self) -> None:
        period_min = self.cfg.monitor_period_s / 60.0
        arrivals = self._period_arrivals
        rate = arrivals / period_min
        hit_rate = self._period_hits / arrivals if arrivals else 0.0
        k_dist = (
            {k: c / self._period_hits for k, c in sorted(self._period_k.items())}
            if self._period_hits
            else {}
        )
        snapshot = MonitorSnapshot(rate, hit_rate, k_dist, self.cfg.n_workers)
        plan = self.monitor.tick(snapshot)
        small = self.small_by_name[plan.small_profile]
        for worker, target in apply_allocation(
            plan.n_large, small, self.cfg.large_profile, self.workers
        ):
            worker.pending_profile = target
            if worker.idle:
                self._begin_switch(worker)
        self.series.append(
            {
                "time_s": self.clock,
                "hit_queue": len(self.queues.hit),
                "miss_queue": len(self.queues.miss),
                "n_large": plan.n_large,
                "throughput_rpm": self._period_completions / period_min,
                "hit_rate": hit_rate,
            }
        )
        self._period_arrivals = 0
        self._period_hits = 0
        self._period_completions = 0
        self._period_k = {}
        if self._live_work():
            self._push(self.clock + self.cfg.monitor_period_s, EVENT_MONITOR_TICK)
        self._dispatch_idle()

    # -- dispatch -----------------------------------------------------------

    def _dispatch_idle(self) -> None:
        # small workers pull first so hits land on them before a large
        # worker falls back to hit work
        for worker in sorted(
            self.workers, key=lambda w: (w.profile.model_class != "small", w.id)
        ):
            if not worker.idle:
                continue
            r = dispatch(
                worker.profile.model_class,
                self.queues,
                self.cfg.mode,
                self.cfg.work_conservation,
            )
            if r is None:
                continue
            self._start(worker, r)

    def _start(self, worker: Worker, r: Request) -> None:
        if self.cfg.reclassify_on_dispatch:
            # refresh the retrieval against the cache as it stands now; only
            # adopt improvements (queue placement is already decided)
            fresh = self.cache.retrieve(r.query_embedding, self.table)
            if fresh.hit and (not r.is_hit or fresh.similarity > r.similarity):
                r.k = fresh.k
                r.similarity = fresh.similarity
                r.source_entry_id = fresh.entry.id
                r.source_embedding = fresh.entry.embedding
                r.source_age_s = self.clock - fresh.entry.inserted_at
        r._advance(STATUS_RUNNING)
        r.dispatch_time = self.clock
        r.worker_id = worker.id
        r.serving_model = worker.profile.name
        duration = service_time(r, worker.profile, self.cfg.overhead_s)
        worker.current = r
        worker.busy_until = self.clock + duration
        self._push(worker.busy_until, EVENT_COMPLETION, (worker, r))


def run_simulation(cfg: SimConfig, trace: list[TraceRecord]) -> SimResult:
    """Convenience wrapper: build and run one simulation."""
    return Simulation(cfg, trace).run()
