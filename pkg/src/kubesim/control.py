"""Latency-modelled etcd, leadership leases and the autoscaler decision rule.

etcd is a single serialized commit log: a write is committed after every
earlier write, plus a fixed per-operation cost and an fsync draw. Watchers see
a commit only after a fan-out delay. Control loops that depend on slow commits
stall, which is the whole point.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .cluster import PodState, Phase
from .engine import Engine, us


@dataclass(frozen=True)
class EtcdProfile:
    """Storage-latency profile of the store.

    ``io_capacity`` couples fsync latency to application storage traffic:
    when the app shares the backing store (a network block device), the fsync
    median is inflated by ``1 / (1 - u)`` with ``u`` the storage utilisation
    of the last second, capped at ``max_utilization``. Zero disables it.
    ``stalls`` are ``(start_ms, duration_ms)`` windows during which the disk
    accepts no fsync at all.
    """

    name: str = "ram-disk"
    fsync_family: str = "lognormal"
    fsync_median_ms: float = 0.1
    fsync_sigma: float = 0.3
    base_op_latency_ms: float = 0.5
    watch_fanout_delay_ms: float = 2.0
    io_capacity: float = 0.0
    max_utilization: float = 0.95
    stalls: tuple = ()

    def __post_init__(self):
        if self.fsync_family not in ("lognormal", "fixed"):
            raise ValueError(f"unknown fsync family {self.fsync_family!r}")
        if min(self.fsync_median_ms, self.fsync_sigma, self.base_op_latency_ms, self.watch_fanout_delay_ms) < 0:
            raise ValueError("etcd latencies must be >= 0")
        if self.io_capacity < 0 or not 0 <= self.max_utilization < 1:
            raise ValueError("bad storage coupling parameters")
        object.__setattr__(self, "stalls", tuple(tuple(s) for s in self.stalls))

    def draw_fsync_ms(self, rng, contention: float = 1.0) -> float:
        median = self.fsync_median_ms * contention
        if self.fsync_family == "fixed" or self.fsync_sigma == 0 or median == 0:
            return median
        return rng.lognormvariate(math.log(median), self.fsync_sigma)

    def contention(self, io_rate: float) -> float:
        if self.io_capacity <= 0:
            return 1.0
        u = min(io_rate / self.io_capacity, self.max_utilization)
        return 1.0 / (1.0 - u)


ETCD_PROFILES = {
    "ram-disk": EtcdProfile(),
    "network-disk": EtcdProfile(
        name="network-disk",
        fsync_median_ms=8.0,
        fsync_sigma=1.0,
        base_op_latency_ms=1.0,
        watch_fanout_delay_ms=2.0,
        io_capacity=150.0,
        max_utilization=0.98,
    ),
    "zero": EtcdProfile(
        name="custom", fsync_family="fixed", fsync_median_ms=0.0, fsync_sigma=0.0,
        base_op_latency_ms=0.0, watch_fanout_delay_ms=0.0,
    ),
}


class EtcdStore:
    """Serialized versioned key-value store living on an :class:`Engine`."""

    def __init__(self, engine: Engine, profile: EtcdProfile, rng, io_rate: Callable[[], float] | None = None):
        self.engine = engine
        self.profile = profile
        self.rng = rng
        self.io_rate = io_rate or (lambda: 0.0)
        self.kv: dict[str, tuple[object, int]] = {}
        self.revision = 0
        self.pending: deque = deque()
        self.watchers: list[tuple[str, Callable]] = []
        self._tail_us = 0
        self._stalls = [(us(s), us(s) + us(d)) for s, d in profile.stalls]
        self.commit_log: list[tuple[int, int, int, str]] = []  # (submit, commit, revision, key)
        self.on_commit_latency: Callable[[int, float], None] | None = None

    def _service_start(self, t: int) -> int:
        for lo, hi in self._stalls:
            if lo <= t < hi:
                t = hi
        return t

    def write(self, key: str, value, on_commit: Callable | None = None) -> int:
        """Submit a write; returns its commit time in us."""
        now = self.engine.now_us
        start = self._service_start(max(now, self._tail_us))
        factor = self.profile.contention(self.io_rate())
        latency_ms = self.profile.base_op_latency_ms + self.profile.draw_fsync_ms(self.rng, factor)
        commit_us = start + us(latency_ms)
        self._tail_us = commit_us
        entry = (now, key, value, on_commit)
        self.pending.append(entry)
        self.engine.schedule(commit_us, "etcd-commit", self._commit)
        return commit_us

    def _commit(self):
        submit_us, key, value, on_commit = self.pending.popleft()
        now = self.engine.now_us
        self.revision += 1
        rev = self.revision
        self.kv[key] = (value, rev)
        self.commit_log.append((submit_us, now, rev, key))
        if self.on_commit_latency is not None:
            self.on_commit_latency(now, (now - submit_us) / 1000.0)
        if on_commit is not None:
            on_commit(key, value, rev)
        fanout = us(self.profile.watch_fanout_delay_ms)
        for prefix, cb in self.watchers:
            if key.startswith(prefix):
                self.engine.schedule(now + fanout, "watch-notify", cb, key, value, rev)

    def watch(self, prefix: str, callback: Callable) -> None:
        self.watchers.append((prefix, callback))

    def get(self, key: str, default=None):
        item = self.kv.get(key)
        return default if item is None else item[0]

    def oldest_pending_age_ms(self) -> float:
        if not self.pending:
            return 0.0
        return (self.engine.now_us - self.pending[0][0]) / 1000.0


@dataclass
class LeaderLease:
    holder: str
    duration_ms: float = 10000.0
    renew_period_ms: float = 2000.0
    last_renew_commit_us: int | None = None
    renewal_pending: bool = False
    episodes: list = field(default_factory=list)  # (lost_at_us, regained_at_us | None)

    def is_leader(self, now_us: int) -> bool:
        last = self.last_renew_commit_us
        return last is not None and now_us - last < us(self.duration_ms)

    def expiry_us(self) -> int | None:
        if self.last_renew_commit_us is None:
            return None
        return self.last_renew_commit_us + us(self.duration_ms)

    def record_commit(self, commit_us: int) -> bool:
        """Register a committed renewal; returns True when leadership was regained."""
        regained = False
        exp = self.expiry_us()
        if exp is not None and commit_us >= exp:
            self.episodes.append((exp, commit_us))
            regained = True
        self.last_renew_commit_us = commit_us
        self.renewal_pending = False
        return regained

    def outage_intervals(self, end_us: int) -> list[tuple[int, int]]:
        out = list(self.episodes)
        exp = self.expiry_us()
        if exp is not None and exp < end_us:
            out.append((exp, end_us))
        return out


@dataclass
class HpaState:
    min_replicas: int
    max_replicas: int
    target_cpu_ratio: float = 0.8
    sync_period_ms: float = 15000.0
    staleness_ms: float = 30000.0
    tolerance: float = 0.1
    downscale_window_ms: float = 300000.0
    # samples taken this soon after a pod started are ignored
    initial_readiness_delay_ms: float = 30000.0
    last_metrics_window: dict = field(default_factory=dict)  # pod_id -> (cpu_ratio, sample_us)
    recommendations: deque = field(default_factory=deque)  # (at_us, desired)
    stalls: int = 0

    def __post_init__(self):
        if not 0 < self.min_replicas <= self.max_replicas:
            raise ValueError("need 0 < min_replicas <= max_replicas")
        if self.target_cpu_ratio <= 0:
            raise ValueError("target_cpu_ratio must be > 0")


def hpa_decision(h: HpaState, current_target: int, ready_pods, now_us: int,
                 started_us: dict | None = None) -> int | None:
    """Desired replica count, or None when no usable metric exists (stall).

    Usable metrics are those of currently-ready pods not older than the
    staleness bound. When ``started_us`` (pod id -> start time) is given,
    samples taken within the initial readiness delay of a pod's start are
    skipped. Scale-downs are damped by taking the largest recommendation
    inside the downscale window.
    """
    bound = us(h.staleness_ms)
    warmup = us(h.initial_readiness_delay_ms)
    usable = [
        ratio
        for pod_id, (ratio, stamp) in h.last_metrics_window.items()
        if pod_id in ready_pods and now_us - stamp <= bound
        and (started_us is None or stamp - started_us.get(pod_id, 0) >= warmup)
    ]
    if not usable:
        h.stalls += 1
        return None
    current = len(ready_pods)
    mean = sum(usable) / len(usable)
    usage = mean / h.target_cpu_ratio
    if abs(usage - 1.0) <= h.tolerance:
        raw = current_target
    else:
        raw = math.ceil(round(current * usage, 9))
    raw = max(h.min_replicas, min(h.max_replicas, raw))
    win = us(h.downscale_window_ms)
    h.recommendations.append((now_us, raw))
    while h.recommendations and now_us - h.recommendations[0][0] > win:
        h.recommendations.popleft()
    desired = raw
    if raw < current_target:
        desired = min(current_target, max(r for _, r in h.recommendations))
    return max(h.min_replicas, min(h.max_replicas, desired))


def probe_pod(pod: PodState) -> bool | None:
    """Evaluate readiness of every container.

    Returns the new pod readiness when it differs from what was last
    reported to the store, otherwise None.
    """
    if pod.phase is not Phase.RUNNING:
        return None
    for c in pod.containers:
        c.ready = c.alive and not c.in_backoff
    ready = all(c.ready for c in pod.containers)
    if ready != pod.reported_ready:
        return ready
    return None
