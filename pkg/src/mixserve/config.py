"""Run configuration.

Config files are flat ``key = value`` text (values in JSON syntax, ``#``
comments) or an equivalent JSON document; the README documents every key.
Unknown keys are rejected by name.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .allocator import DEFAULT_PID_GAINS, MODES, THROUGHPUT, ModelProfile
from .cache import DEFAULT_DIM, DEFAULT_THRESHOLDS, POLICIES, POLICY_ALL, SemanticCache, ThresholdTable
from .workload import GeneratorConfig


class ConfigError(ValueError):
    """Bad configuration input; the message names the offending key."""


def _default_large() -> ModelProfile:
    return ModelProfile("sd-large", "large", 0.40, 120.0, 50)


def _default_smalls() -> list[ModelProfile]:
    return [ModelProfile("sd-small", "small", 0.10, 128.0, 50)]


@dataclass
class SimConfig:
    """Everything a simulation run needs besides the trace."""

    name: str = "run"
    n_workers: int = 4
    mode: str = THROUGHPUT
    seed: int = 0
    duration_s: float = 3600.0
    overhead_s: float = 1.0
    work_conservation: bool = True
    reclassify_on_dispatch: bool = False
    initial_n_large: int | None = None
    slo_multipliers: tuple[float, ...] = (2.0, 4.0)

    monitor_enabled: bool = True
    monitor_period_s: float = 60.0
    pid_gains: tuple[float, float, float] = DEFAULT_PID_GAINS
    integral_bound: float | None = None
    escalation_patience: int = 2

    cache_capacity: int = 10000
    cache_policy: str = POLICY_ALL
    cache_max_age_s: float | None = None
    cache_dim: int = DEFAULT_DIM
    thresholds: tuple[tuple[int, float], ...] = DEFAULT_THRESHOLDS
    cache_preload: str | None = None
    store_query_embedding: bool = False

    large_profile: ModelProfile = field(default_factory=_default_large)
    small_profiles: list[ModelProfile] = field(default_factory=_default_smalls)

    workload: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"sim.mode: unknown mode {self.mode!r}")
        if self.n_workers < 1:
            raise ConfigError("sim.n_workers: need at least one worker")
        if self.duration_s <= 0:
            raise ConfigError("sim.duration_s: must be positive")
        if self.overhead_s < 0:
            raise ConfigError("sim.overhead_s: must be >= 0")
        if self.cache_policy not in POLICIES:
            raise ConfigError(f"cache.policy: unknown policy {self.cache_policy!r}")
        if self.initial_n_large is not None and not 1 <= self.initial_n_large <= self.n_workers:
            raise ConfigError("sim.initial_n_large: must lie in [1, sim.n_workers]")
        if self.cache_dim != self.workload.dim:
            raise ConfigError(
                f"cache.dim ({self.cache_dim}) and workload.dim ({self.workload.dim}) differ"
            )
        if self.large_profile.model_class != "large":
            raise ConfigError("models.large: profile class must be 'large'")
        if not self.small_profiles:
            raise ConfigError("models.small: need at least one profile")
        if any(p.model_class != "small" for p in self.small_profiles):
            raise ConfigError("models.small: every profile class must be 'small'")
        names = [p.name for p in self.profiles()]
        if len(set(names)) != len(names):
            raise ConfigError(f"model profile names must be unique, got {names}")
        self.threshold_table()  # validates against total steps

    def threshold_table(self) -> ThresholdTable:
        try:
            return ThresholdTable(self.thresholds, total_steps=self.large_profile.total_steps)
        except ValueError as exc:
            raise ConfigError(f"cache.thresholds: {exc}") from exc

    def build_cache(self) -> SemanticCache:
        return SemanticCache(
            capacity=self.cache_capacity,
            dim=self.cache_dim,
            policy=self.cache_policy,
            max_age_s=self.cache_max_age_s,
        )

    def profiles(self) -> list[ModelProfile]:
        return [self.large_profile, *self.small_profiles]


_PROFILE_KEYS = {
    "name", "class", "per_step_latency_s", "per_step_energy_j", "total_steps", "switch_latency_s",
}


def _parse_profile(obj, key: str) -> ModelProfile:
    if not isinstance(obj, dict):
        raise ConfigError(f"{key}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - _PROFILE_KEYS
    if unknown:
        raise ConfigError(f"{key}: unknown profile fields {sorted(unknown)}")
    try:
        return ModelProfile(
            name=str(obj["name"]),
            model_class=str(obj["class"]),
            per_step_latency_s=float(obj["per_step_latency_s"]),
            per_step_energy_j=float(obj.get("per_step_energy_j", 0.0)),
            total_steps=int(obj["total_steps"]),
            switch_latency_s=float(obj.get("switch_latency_s", 0.0)),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_flat_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a flat dict of JSON-typed values."""
    flat: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if " #" in value:
            value = value.split(" #", 1)[0].strip()
        try:
            flat[key] = json.loads(value)
        except json.JSONDecodeError:
            flat[key] = value
    return flat


def _flatten_json(obj: dict, prefix: str = "") -> dict:
    flat: dict = {}
    for key, value in obj.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict) and dotted not in _OBJECT_VALUED_KEYS:
            flat.update(_flatten_json(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


_OBJECT_VALUED_KEYS = {"models.large"}


def load_config_file(path) -> dict:
    """Read a config file (flat text or JSON) into a flat key dict."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top-level JSON value must be an object")
        return _flatten_json(doc)
    return parse_flat_text(text, source=str(p))


def _pop(flat: dict, key: str, default):
    return flat.pop(key, default)


def _opt_float(flat: dict, key: str, default):
    value = flat.pop(key, default)
    if value is None or value == "null" or value == "none":
        return None
    return float(value)


def _bool(value, key: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("true", "false"):
        return value.lower() == "true"
    raise ConfigError(f"{key}: expected true/false, got {value!r}")


def build_sim_config(flat: dict) -> SimConfig:
    """Turn a flat key dict into a validated SimConfig."""
    flat = dict(flat)
    defaults = SimConfig.__dataclass_fields__

    seed = int(_pop(flat, "sim.seed", 0))
    workload_flat = {
        "rate_schedule": _pop(flat, "workload.rate_schedule", [[3600.0, 10.0]]),
        "n_clusters": int(_pop(flat, "workload.n_clusters", 64)),
        "cluster_lifetime_s": _opt_float(flat, "workload.cluster_lifetime_s", 14400.0),
        "spread": float(_pop(flat, "workload.spread", 0.35)),
        "beta": float(_pop(flat, "workload.beta", 0.92)),
        "dim": int(_pop(flat, "workload.dim", DEFAULT_DIM)),
        "seed": int(_pop(flat, "workload.seed", seed)),
    }
    try:
        schedule = [(float(d), float(r)) for d, r in workload_flat["rate_schedule"]]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"workload.rate_schedule: {exc}") from exc
    workload_flat["rate_schedule"] = schedule
    try:
        gen_cfg = GeneratorConfig(**workload_flat)
    except ValueError as exc:
        raise ConfigError(f"workload: {exc}") from exc

    large_obj = _pop(flat, "models.large", None)
    large = _default_large() if large_obj is None else _parse_profile(large_obj, "models.large")
    smalls_obj = _pop(flat, "models.small", None)
    if smalls_obj is None:
        smalls = _default_smalls()
    else:
        if not isinstance(smalls_obj, list):
            raise ConfigError("models.small: expected a list of profile objects")
        smalls = [_parse_profile(o, f"models.small[{i}]") for i, o in enumerate(smalls_obj)]

    thresholds = _pop(flat, "cache.thresholds", None)
    if thresholds is None:
        table = DEFAULT_THRESHOLDS
    else:
        try:
            table = tuple((int(k), float(t)) for k, t in thresholds)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"cache.thresholds: {exc}") from exc

    gains = (
        float(_pop(flat, "monitor.kp", DEFAULT_PID_GAINS[0])),
        float(_pop(flat, "monitor.ki", DEFAULT_PID_GAINS[1])),
        float(_pop(flat, "monitor.kd", DEFAULT_PID_GAINS[2])),
    )
    multipliers = _pop(flat, "sim.slo_multipliers", [2.0, 4.0])
    try:
        multipliers = tuple(float(m) for m in multipliers)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sim.slo_multipliers: {exc}") from exc

    initial = _pop(flat, "sim.initial_n_large", None)
    preload = _pop(flat, "cache.preload", None)
    kwargs = dict(
        name=str(_pop(flat, "sim.name", "run")),
        n_workers=int(_pop(flat, "sim.n_workers", 4)),
        mode=str(_pop(flat, "sim.mode", THROUGHPUT)),
        seed=seed,
        duration_s=float(_pop(flat, "sim.duration_s", 3600.0)),
        overhead_s=float(_pop(flat, "sim.overhead_s", 1.0)),
        work_conservation=_bool(_pop(flat, "sim.work_conservation", True), "sim.work_conservation"),
        reclassify_on_dispatch=_bool(
            _pop(flat, "sim.reclassify_on_dispatch", False), "sim.reclassify_on_dispatch"
        ),
        initial_n_large=None if initial is None else int(initial),
        slo_multipliers=multipliers,
        monitor_enabled=_bool(_pop(flat, "monitor.enabled", True), "monitor.enabled"),
        monitor_period_s=float(_pop(flat, "monitor.period_s", 60.0)),
        pid_gains=gains,
        integral_bound=_opt_float(flat, "monitor.integral_bound", None),
        escalation_patience=int(_pop(flat, "monitor.escalation_patience", 2)),
        cache_capacity=int(_pop(flat, "cache.capacity", 10000)),
        cache_policy=str(_pop(flat, "cache.policy", POLICY_ALL)),
        cache_max_age_s=_opt_float(flat, "cache.max_age_s", None),
        cache_dim=int(_pop(flat, "cache.dim", DEFAULT_DIM)),
        thresholds=table,
        cache_preload=None if preload is None else str(preload),
        store_query_embedding=_bool(
            _pop(flat, "cache.store_query_embedding", False), "cache.store_query_embedding"
        ),
        large_profile=large,
        small_profiles=smalls,
        workload=gen_cfg,
    )
    if flat:
        raise ConfigError(f"unknown config key: {sorted(flat)[0]!r}")
    assert set(kwargs) == {f for f in defaults}, "config assembly drifted from SimConfig"
    try:
        return SimConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_sim_config(path, overrides: dict | None = None) -> SimConfig:
    flat = load_config_file(path)
    if overrides:
        flat.update(overrides)
    return build_sim_config(flat)


def effective_flat(cfg: SimConfig) -> dict:
    """The fully-resolved flat key view of a config, for snapshots."""

    def profile_obj(p: ModelProfile) -> dict:
        return {
            "name": p.name,
            "class": p.model_class,
            "per_step_latency_s": p.per_step_latency_s,
            "per_step_energy_j": p.per_step_energy_j,
            "total_steps": p.total_steps,
            "switch_latency_s": p.switch_latency_s,
        }

    return {
        "sim.name": cfg.name,
        "sim.n_workers": cfg.n_workers,
        "sim.mode": cfg.mode,
        "sim.seed": cfg.seed,
        "sim.duration_s": cfg.duration_s,
        "sim.overhead_s": cfg.overhead_s,
        "sim.work_conservation": cfg.work_conservation,
        "sim.reclassify_on_dispatch": cfg.reclassify_on_dispatch,
        "sim.initial_n_large": cfg.initial_n_large,
        "sim.slo_multipliers": list(cfg.slo_multipliers),
        "monitor.enabled": cfg.monitor_enabled,
        "monitor.period_s": cfg.monitor_period_s,
        "monitor.kp": cfg.pid_gains[0],
        "monitor.ki": cfg.pid_gains[1],
        "monitor.kd": cfg.pid_gains[2],
        "monitor.integral_bound": cfg.integral_bound,
        "monitor.escalation_patience": cfg.escalation_patience,
        "cache.capacity": cfg.cache_capacity,
        "cache.policy": cfg.cache_policy,
        "cache.max_age_s": cfg.cache_max_age_s,
        "cache.dim": cfg.cache_dim,
        "cache.thresholds": [[k, t] for k, t in cfg.thresholds],
        "cache.preload": cfg.cache_preload,
        "cache.store_query_embedding": cfg.store_query_embedding,
        "models.large": profile_obj(cfg.large_profile),
        "models.small": [profile_obj(p) for p in cfg.small_profiles],
        "workload.rate_schedule": [[d, r] for d, r in cfg.workload.rate_schedule],
        "workload.n_clusters": cfg.workload.n_clusters,
        "workload.cluster_lifetime_s": cfg.workload.cluster_lifetime_s,
        "workload.spread": cfg.workload.spread,
        "workload.beta": cfg.workload.beta,
        "workload.dim": cfg.workload.dim,
        "workload.seed": cfg.workload.seed,
    }
