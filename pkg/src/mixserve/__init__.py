"""Simulator and scheduling library for cache-aware mixture-of-models serving."""

from .allocator import (
    AllocationPlan,
    GlobalMonitor,
    ModelProfile,
    MonitorSnapshot,
    PidController,
    compute_savings,
    hit_workload,
    miss_workload,
    quality_allocate,
    throughput_allocate,
)
from .cache import (
    CacheEntry,
    RetrievalResult,
    SemanticCache,
    ThresholdTable,
    cosine,
    linear_sigma_schedule,
    noise_reentry_level,
    normalize,
)
from .config import ConfigError, SimConfig, build_sim_config, load_sim_config
from .engine import SimResult, Simulation, run_simulation, service_time
from .metrics import MetricsReport, RequestOutcome, aggregate, emit, p99, slo_rate
from .scheduler import QueuePair, Request, classify, dispatch, on_completion
from .workload import (
    GeneratorConfig,
    TraceRecord,
    calibrate_beta,
    gen_arrivals,
    gen_queries,
    generate_trace,
    image_embedding,
    load_trace,
    save_trace,
    warmup_entries,
)

__version__ = "0.1.0"
