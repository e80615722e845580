"""Scenario parameterisation, closed-schema parsing and presets."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field

from . import __version__
from .cluster import MemoryModel
from .control import ETCD_PROFILES, EtcdProfile
from .dataplane import DataPlaneKind, HopCostModel
from .dimensioning import NoiseModel, TimingModel


class ScenarioError(ValueError):
    """Invalid scenario document; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class ClusterConfig:
    worker_nodes: int = 6
    node_cpu: int = 2000
    node_mem: int = 4096
    cpu_share: int = 500
    mem_limit: float = 64.0
    pod_startup_ms: float = 3000.0
    probe_period_ms: float = 2000.0
    oom_check_ms: float = 100.0
    drain_s: float = 30.0

    def __post_init__(self):
        if self.worker_nodes < 1:
            raise ValueError("worker_nodes must be >= 1")
        if self.cpu_share <= 0 or self.mem_limit <= 0:
            raise ValueError("cpu_share and mem_limit must be > 0")
        if self.probe_period_ms <= 0 or self.oom_check_ms <= 0:
            raise ValueError("periods must be > 0")


@dataclass(frozen=True)
class ControlConfig:
    lease_duration_ms: float = 10000.0
    lease_renew_ms: float = 2000.0
    hpa_sync_ms: float = 15000.0
    hpa_target_cpu_ratio: float = 0.8
    hpa_staleness_ms: float = 30000.0
    hpa_tolerance: float = 0.1
    hpa_downscale_window_ms: float = 300000.0
    hpa_initial_readiness_delay_ms: float = 30000.0
    metrics_period_ms: float = 5000.0
    node_heartbeat_ms: float = 10000.0

    def __post_init__(self):
        if self.lease_renew_ms <= 0 or self.lease_duration_ms <= 0:
            raise ValueError("lease periods must be > 0")
        if self.hpa_sync_ms <= 0 or self.metrics_period_ms <= 0 or self.node_heartbeat_ms <= 0:
            raise ValueError("control periods must be > 0")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    initial_pods: int = 10
    hpa_max: int = 20
    hpa_enabled: bool = False
    workers: int = 60
    loadgen_nodes: int = 6
    timing: TimingModel = field(default_factory=TimingModel)
    data_plane: DataPlaneKind = field(default_factory=DataPlaneKind)
    etcd_profile: EtcdProfile = field(default_factory=EtcdProfile)
    memory_model: MemoryModel = field(default_factory=MemoryModel)
    hop_costs: HopCostModel = field(default_factory=HopCostModel)
    duration: float = 1200.0
    repetitions_target: int = 7
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    control: ControlConfig = field(default_factory=ControlConfig)

    def __post_init__(self):
        if not self.name:
            raise ValueError("scenario needs a name")
        if not 0 < self.initial_pods <= self.hpa_max:
            raise ValueError("need 0 < initial_pods <= hpa_max")
        if self.duration <= 0 or self.duration != int(self.duration):
            raise ValueError("duration must be a positive whole number of seconds")
        if self.repetitions_target < 1:
            raise ValueError("repetitions_target must be >= 1")
        if self.workers < 0 or self.loadgen_nodes < 1:
            raise ValueError("need workers >= 0 and loadgen_nodes >= 1")

    def replace(self, **changes) -> "ScenarioSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return to_plain(self)

    def config_hash(self) -> str:
        return config_hash(self)


def to_plain(obj):
    """JSON-safe plain data; infinities become the string ``"inf"``."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def config_hash(spec: ScenarioSpec) -> str:
    payload = json.dumps({"artifact_version": __version__, "scenario": to_plain(spec)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ScenarioError(path, f"expected a mapping, got {type(value).__name__}")
        return build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ScenarioError(path, "expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ScenarioError(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", ".inf"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ScenarioError(path, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ScenarioError(path, "expected a string")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ScenarioError(path, "expected a list")
        return tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in value)
    return value


def build(cls, data: dict, path: str = ""):
    """Construct dataclass ``cls`` from ``data``, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else str(key)
            raise ScenarioError(where, f"unknown key {key!r}")
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(hints[key], value, where)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ScenarioError(path, str(exc)) from None
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(path, str(exc)) from None


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# Reference cluster: 6 workers with 2 vCPU / 4 GiB, the first one holds the
# floating IP and the ingress role. 64 MiB app memory limit, HPA cap 20,
# exponential think time with mean 20 ms, no client time-out, 20 min runs.
# With this memory model a pod completing more than ~15.4 req/s accumulates
# garbage faster than it is collected; a saturated pod (~18.2 req/s) is
# OOM-killed roughly 25 s after it saturates.
OOM_PRONE_MEMORY = {"base": 20.0, "per_inflight": 0.1, "garbage_per_request": 0.65, "drain_rate": 10.0}

_REFERENCE = {
    "initial_pods": 10,
    "hpa_max": 20,
    "workers": 120,
    "loadgen_nodes": 6,
    "timing": {"t_exec": 55.0, "t_rtt": 8.0, "t_delay": 20.0, "t_timeout": "inf"},
    "duration": 1200.0,
    "repetitions_target": 7,
    "cluster": {"worker_nodes": 6, "node_cpu": 2000, "node_mem": 4096, "mem_limit": 64.0},
}

PRESETS: dict[str, dict] = {
    # data-plane comparison: stable memory, fast store, fixed fleet
    "paper-native": deep_merge(_REFERENCE, {"data_plane": {"kind": "native"}}),
    "paper-istio": deep_merge(_REFERENCE, {"data_plane": {"kind": "mesh", "max_retries": 2}}),
    # store-profile comparison: 20 pods, 90 workers, crash-looping pods
    "etcd-ramdisk": deep_merge(_REFERENCE, {
        "initial_pods": 20,
        "workers": 90,
        "memory_model": dict(OOM_PRONE_MEMORY),
        "etcd_profile": to_plain(ETCD_PROFILES["ram-disk"]),
    }),
    "etcd-netdisk": deep_merge(_REFERENCE, {
        "initial_pods": 20,
        "workers": 90,
        "memory_model": dict(OOM_PRONE_MEMORY),
        "etcd_profile": to_plain(ETCD_PROFILES["network-disk"]),
    }),
    # autoscaling under overload: 10 pods cannot carry 24 workers, 20 can
    "hpa-ramdisk": deep_merge(_REFERENCE, {
        "workers": 24,
        "hpa_enabled": True,
        "memory_model": dict(OOM_PRONE_MEMORY),
        "etcd_profile": to_plain(ETCD_PROFILES["ram-disk"]),
    }),
    "hpa-netdisk": deep_merge(_REFERENCE, {
        "workers": 24,
        "hpa_enabled": True,
        "memory_model": dict(OOM_PRONE_MEMORY),
        "etcd_profile": to_plain(ETCD_PROFILES["network-disk"]),
    }),
}


def preset(preset_name: str, /, **overrides) -> ScenarioSpec:
    """Build a preset scenario, optionally overriding top-level or nested fields (``name`` too)."""
    if preset_name not in PRESETS:
        raise KeyError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    data = deep_merge(PRESETS[preset_name], _plainify(overrides))
    data.setdefault("name", preset_name)
    return build(ScenarioSpec, data)


def _plainify(d: dict) -> dict:
    return {k: (to_plain(v) if dataclasses.is_dataclass(v) else v) for k, v in d.items()}


@dataclass
class ScenarioFile:
    master_seed: int
    scenarios: list[ScenarioSpec]


SCENARIO_FILE_KEYS = {"master_seed", "defaults", "scenarios"}
SCENARIO_ENTRY_EXTRA = {"preset"}


def parse_scenario_file(doc: dict) -> ScenarioFile:
    """Resolve a scenario document: preset < defaults < per-scenario fields."""
    if not isinstance(doc, dict):
        raise ScenarioError("", "scenario file must be a mapping")
    for key in doc:
        if key not in SCENARIO_FILE_KEYS:
            raise ScenarioError(str(key), f"unknown key {key!r}")
    seed = doc.get("master_seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ScenarioError("master_seed", "expected a non-negative integer")
    defaults = doc.get("defaults") or {}
    if not isinstance(defaults, dict):
        raise ScenarioError("defaults", "expected a mapping")
    if "name" in defaults:
        raise ScenarioError("defaults.name", "defaults cannot carry a name")
    build(ScenarioSpec, {"name": "defaults-check", **_defaults_probe(defaults)}, "defaults")
    entries = doc.get("scenarios")
    if not isinstance(entries, list) or not entries:
        raise ScenarioError("scenarios", "expected a non-empty list")
    specs = []
    seen = set()
    for i, entry in enumerate(entries):
        where = f"scenarios[{i}]"
        if not isinstance(entry, dict):
            raise ScenarioError(where, "expected a mapping")
        entry = dict(entry)
        base = {}
        name_of_preset = entry.pop("preset", None)
        if name_of_preset is not None:
            if name_of_preset not in PRESETS:
                raise ScenarioError(f"{where}.preset", f"unknown preset {name_of_preset!r}")
            base = deep_merge(base, PRESETS[name_of_preset])
            entry.setdefault("name", name_of_preset)
        base = deep_merge(base, defaults)
        spec = build(ScenarioSpec, deep_merge(base, entry), where)
        if spec.name in seen:
            raise ScenarioError(f"{where}.name", f"duplicate scenario name {spec.name!r}")
        seen.add(spec.name)
        specs.append(spec)
    return ScenarioFile(master_seed=seed, scenarios=specs)


def _defaults_probe(defaults: dict) -> dict:
    # defaults may leave initial_pods/hpa_max inconsistent until merged; only
    # the key structure is validated here
    probe = dict(defaults)
    probe.pop("initial_pods", None)
    probe.pop("hpa_max", None)
    return probe


def load_scenario_file(path) -> ScenarioFile:
    import yaml

    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError("", f"cannot parse {path}: {exc}") from None
    return parse_scenario_file(doc)


__all__ = [
    "ClusterConfig",
    "ControlConfig",
    "ScenarioSpec",
    "ScenarioError",
    "ScenarioFile",
    "PRESETS",
    "preset",
    "parse_scenario_file",
    "load_scenario_file",
    "config_hash",
    "NoiseModel",
    "TimingModel",
    "DataPlaneKind",
    "HopCostModel",
    "EtcdProfile",
    "MemoryModel",
]
