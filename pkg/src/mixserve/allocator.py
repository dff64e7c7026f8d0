"""Worker allocation between large and small models.

Turns a monitoring snapshot (request rate, hit rate, step distribution)
into a large/small worker split, either maximizing large-model count under
throughput constraints (quality mode) or splitting proportionally to
weighted workloads (throughput mode), then smoothed by a PID controller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

QUALITY = "quality"
THROUGHPUT = "throughput"
MODES = (QUALITY, THROUGHPUT)

DEFAULT_PID_GAINS = (0.6, 0.05, 0.05)


@dataclass(frozen=True)
class ModelProfile:
    """Cost model for one diffusion model."""

    name: str
    model_class: str  # "large" or "small"
    per_step_latency_s: float
    per_step_energy_j: float
    total_steps: int
    switch_latency_s: float = 0.0

    def __post_init__(self):
        if self.per_step_latency_s <= 0:
            raise ValueError(f"{self.name}: per-step latency must be positive")
        if self.total_steps < 1:
            raise ValueError(f"{self.name}: total_steps must be >= 1")
        if self.switch_latency_s < 0:
            raise ValueError(f"{self.name}: switch latency must be >= 0")
        if self.per_step_energy_j < 0:
            raise ValueError(f"{self.name}: per-step energy must be >= 0")
        if self.model_class not in ("large", "small"):
            raise ValueError(f"{self.name}: model_class must be 'large' or 'small'")

    @property
    def throughput_rpm(self) -> float:
        """Full generations per minute per worker."""
        return 60.0 / (self.per_step_latency_s * self.total_steps)


@dataclass(frozen=True)
class MonitorSnapshot:
    """Observed load over one monitoring period."""

    rate_rpm: float
    hit_rate: float
    k_dist: dict[int, float]
    n_workers: int

    def __post_init__(self):
        if self.rate_rpm < 0:
            raise ValueError(f"rate must be >= 0, got {self.rate_rpm}")
        if not 0.0 <= self.hit_rate <= 1.0:
            raise ValueError(f"hit rate must lie in [0, 1], got {self.hit_rate}")
        if self.n_workers < 1:
            raise ValueError(f"need at least one worker, got {self.n_workers}")
        for k, p in self.k_dist.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"P(K={k})={p} outside [0, 1]")
        if self.hit_rate > 0:
            total = math.fsum(self.k_dist.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"k distribution sums to {total}, expected 1")


@dataclass(frozen=True)
class AllocationPlan:
    n_large: int
    n_small: int
    mode: str
    saturated: bool = False
    small_profile: str | None = None


def miss_workload(s: MonitorSnapshot) -> float:
    """Full generations per minute demanded by cache misses."""
    return (1.0 - s.hit_rate) * s.rate_rpm


def hit_workload(s: MonitorSnapshot, total_steps: int) -> float:
    """Refinement demand from hits, in full-generation equivalents/min."""
    if s.hit_rate == 0:
        return 0.0
    for k in s.k_dist:
        if k >= total_steps:
            raise ValueError(f"skip count k={k} must stay below total steps {total_steps}")
    factor = math.fsum(p * (1.0 - k / total_steps) for k, p in s.k_dist.items())
    return s.hit_rate * s.rate_rpm * factor


def quality_allocate(
    s: MonitorSnapshot, p_large: float, p_small: float, total_steps: int
) -> AllocationPlan:
    """Largest feasible large-model count.

    A split (n, N - n) is feasible when n large workers cover the miss
    workload and their leftover capacity plus the small workers cover the
    hit workload. With nothing feasible the plan is flagged saturated and
    sizes the large pool for misses alone, capped at the cluster.
    """
    if p_large <= 0 or p_small <= 0:
        raise ValueError("profiled throughputs must be positive")
    w_miss = miss_workload(s)
    w_hit = hit_workload(s, total_steps)
    n = s.n_workers
    for n_large in range(n, 0, -1):
        spare_large = n_large * p_large - w_miss
        if spare_large >= 0 and spare_large + (n - n_large) * p_small >= w_hit:
            return AllocationPlan(n_large, n - n_large, QUALITY)
    n_large = min(n, max(1, math.ceil(w_miss / p_large)))
    return AllocationPlan(n_large, n - n_large, QUALITY, saturated=True)


def throughput_allocate(
    s: MonitorSnapshot,
    p_large: float,
    p_small: float,
    total_steps: int,
    idle_target: float = 1.0,
) -> float:
    """Fractional large-model target proportional to weighted workloads.

    Hits all go to small models, so the hit workload is discounted by the
    small/large throughput ratio before splitting the cluster. Rounding
    and clamping happen after the PID step.
    """
    if p_large <= 0 or p_small <= 0:
        raise ValueError("profiled throughputs must be positive")
    w_miss = miss_workload(s)
    w_hit_weighted = hit_workload(s, total_steps) * p_large / p_small
    demand = w_miss + w_hit_weighted
    if demand == 0:
        return idle_target
    return w_miss / demand * s.n_workers


class PidController:
    """Discrete positional PID over the allocation error.

    dt is one monitoring period. The derivative acts on the error and is
    zero on the first step; the integral is clamped to +/- integral_bound
    when a bound is set.
    """

    def __init__(
        self,
        kp: float = DEFAULT_PID_GAINS[0],
        ki: float = DEFAULT_PID_GAINS[1],
        kd: float = DEFAULT_PID_GAINS[2],
        integral_bound: float | None = None,
    ):
        for name, g in (("kp", kp), ("ki", ki), ("kd", kd)):
            if not math.isfinite(g):
                raise ValueError(f"{name} must be finite")
        self.kp = kp
        self.ki = ki
        self.kd = kd
        self.integral_bound = integral_bound
        self.integral = 0.0
        self.prev_error = 0.0
        self.initialized = False

    def reset(self) -> None:
        self.integral = 0.0
        self.prev_error = 0.0
        self.initialized = False

    def step(self, target: float, current: float) -> float:
        """Adjustment to apply to the current allocation."""
        error = target - current
        self.integral += error
        if self.integral_bound is not None:
            bound = abs(self.integral_bound)
            self.integral = max(-bound, min(bound, self.integral))
        derivative = 0.0 if not self.initialized else error - self.prev_error
        self.prev_error = error
        self.initialized = True
        return self.kp * error + self.ki * self.integral + self.kd * derivative


def compute_savings(
    s: MonitorSnapshot, c_gen: float, c_small: float, total_steps: int
) -> tuple[float, float]:
    """(savings from skipped steps, total savings with small-model offload).

    c_gen is the cost of one full large-model generation, c_small the cost
    of a full small-model generation in the same units. Both are weighted
    by the observed skip distribution and hit rate.
    """
    if c_gen < 0 or c_small < 0:
        raise ValueError("costs must be >= 0")
    t = float(total_steps)
    c_saved = s.hit_rate * math.fsum(
        (k / t) * c_gen * p for k, p in s.k_dist.items()
    )
    c_total_saved = s.hit_rate * math.fsum(
        p * ((k / t) * c_gen + ((t - k) / t) * (c_gen - c_small))
        for k, p in s.k_dist.items()
    )
    return c_saved, c_total_saved


class GlobalMonitor:
    """Periodic controller turning snapshots into allocation plans.

    Persists the fractional large-model count across ticks, holds the
    previous plan through empty periods, and escalates through the ordered
    small-model list when the cluster stays saturated (de-escalating once
    the previous profile could carry the load again, with the same
    hysteresis).
    """

    def __init__(
        self,
        large_profile: ModelProfile,
        small_profiles: list[ModelProfile],
        n_workers: int,
        mode: str = THROUGHPUT,
        gains: tuple[float, float, float] = DEFAULT_PID_GAINS,
        integral_bound: float | None = None,
        escalation_patience: int = 2,
        initial_n_large: int | None = None,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
        if not small_profiles:
            raise ValueError("need at least one small-model profile")
        if escalation_patience < 1:
            raise ValueError("escalation patience must be >= 1")
        self.large = large_profile
        self.smalls = list(small_profiles)
        self.n_workers = int(n_workers)
        self.mode = mode
        bound = integral_bound if integral_bound is not None else float(n_workers)
        self.pid = PidController(*gains, integral_bound=bound)
        self.patience = int(escalation_patience)
        n0 = n_workers if initial_n_large is None else initial_n_large
        self.current_num_large = float(max(1, min(n0, n_workers)))
        self.small_idx = 0
        self._sat_streak = 0
        self._deesc_streak = 0
        self._tick = 0
        self._last_plan = AllocationPlan(
            int(self.current_num_large),
            n_workers - int(self.current_num_large),
            mode,
            small_profile=self.smalls[0].name,
        )
        self.decisions: list[dict] = []

    @property
    def small_profile(self) -> ModelProfile:
        return self.smalls[self.small_idx]

    def _saturated(self, s: MonitorSnapshot, small: ModelProfile) -> bool:
        """Demand exceeds the cluster even with fractional workers."""
        w_miss = miss_workload(s)
        w_hit = hit_workload(s, self.large.total_steps)
        needed = w_miss / self.large.throughput_rpm + w_hit / small.throughput_rpm
        return needed > s.n_workers

    def _update_escalation(self, s: MonitorSnapshot) -> None:
        if self._saturated(s, self.small_profile):
            self._sat_streak += 1
        else:
            self._sat_streak = 0
        if self._sat_streak >= self.patience and self.small_idx < len(self.smalls) - 1:
            self.small_idx += 1
            self._sat_streak = 0
            self._deesc_streak = 0
            return
        if self.small_idx > 0:
            if not self._saturated(s, self.smalls[self.small_idx - 1]):
                self._deesc_streak += 1
            else:
                self._deesc_streak = 0
            if self._deesc_streak >= self.patience:
                self.small_idx -= 1
                self._deesc_streak = 0

    def tick(self, s: MonitorSnapshot) -> AllocationPlan:
        self._tick += 1
        if s.rate_rpm == 0:
            self._log(s, target=None, delta=None, plan=self._last_plan)
            return self._last_plan
        self._update_escalation(s)
        small = self.small_profile
        p_large = self.large.throughput_rpm
        p_small = small.throughput_rpm
        total_steps = self.large.total_steps
        if self.mode == QUALITY:
            heuristic = quality_allocate(s, p_large, p_small, total_steps)
            target = float(heuristic.n_large)
            saturated = heuristic.saturated
        else:
            target = throughput_allocate(s, p_large, p_small, total_steps)
            saturated = self._saturated(s, small)
        if self.pid.kp == self.pid.ki == self.pid.kd == 0.0:
            # zero gains disable the stabilizer: jump straight to the target
            delta = target - self.current_num_large
            self.current_num_large = target
        else:
            delta = self.pid.step(target, self.current_num_large)
            self.current_num_large += delta
        n_large = max(1, min(round(self.current_num_large), s.n_workers))
        plan = AllocationPlan(
            n_large,
            s.n_workers - n_large,
            self.mode,
            saturated=saturated,
            small_profile=small.name,
        )
        self._log(s, target=target, delta=delta, plan=plan)
        self._last_plan = plan
        return plan

    def _log(self, s: MonitorSnapshot, target, delta, plan: AllocationPlan) -> None:
        self.decisions.append(
            {
                "tick": self._tick,
                "R": s.rate_rpm,
                "H": s.hit_rate,
                "k_dist": {str(k): v for k, v in sorted(s.k_dist.items())},
                "mode": self.mode,
                "target": target,
                "delta": delta,
                "n_large": plan.n_large,
                "saturated": plan.saturated,
                "small_profile": plan.small_profile,
            }
        )
