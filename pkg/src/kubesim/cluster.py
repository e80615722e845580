"""Nodes, pods, containers and the load-driven memory/OOM mechanism."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

RESTART_BACKOFF_INITIAL_MS = 1000.0
RESTART_BACKOFF_CAP_MS = 60000.0


class Phase(str, Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    TERMINATING = "Terminating"
    DEAD = "Dead"


@dataclass(frozen=True)
class NodeSpec:
    id: int
    cpu_capacity: int = 2000
    mem_capacity: int = 4096
    has_ingress_role: bool = False

    def __post_init__(self):
        if self.cpu_capacity <= 0 or self.mem_capacity <= 0:
            raise ValueError(f"node {self.id}: capacities must be > 0")


@dataclass(frozen=True)
class MemoryModel:
    """Linear garbage accumulation over a per-inflight working-set floor (MiB, MiB/s)."""

    base: float = 20.0
    per_inflight: float = 0.1
    garbage_per_request: float = 0.5
    drain_rate: float = 10.0

    def __post_init__(self):
        if min(self.base, self.per_inflight, self.garbage_per_request) < 0:
            raise ValueError("memory model fields must be >= 0")
        if self.drain_rate <= 0:
            raise ValueError("drain_rate must be > 0")

    def floor(self, inflight: int) -> float:
        return self.base + self.per_inflight * inflight


@dataclass
class ContainerState:
    name: str = "app"
    ready: bool = True
    alive: bool = True
    mem_usage: float = 20.0
    mem_limit: float = 64.0
    restart_count: int = 0
    restart_backoff: float = RESTART_BACKOFF_INITIAL_MS
    inflight: int = 0
    cpu_share: int = 500
    # bumped on every kill so stale completions can be recognised
    incarnation: int = 0
    in_backoff: bool = False


@dataclass
class PodState:
    id: int
    node_id: int | None
    phase: Phase = Phase.PENDING
    containers: list[ContainerState] = field(default_factory=list)
    has_sidecar: bool = False
    # readiness last written to the store by the kubelet
    reported_ready: bool = False
    # serving state of the app container: FIFO queue of requests, one in service
    queue: deque = field(default_factory=deque)
    in_service: object = None
    # integral of the in-flight count over time (count * us) since the last
    # metrics report; each in-flight request demands the pod's full CPU share
    demand_touched_us: int = 0
    demand_area: int = 0
    window_start_us: int = 0
    started_us: int = 0
    mem_updated_us: int = 0

    @property
    def app(self) -> ContainerState:
        return self.containers[0]

    @property
    def routable(self) -> bool:
        return self.phase is Phase.RUNNING and all(c.ready for c in self.containers)

    @property
    def serving(self) -> bool:
        """Whether a request delivered now would be accepted."""
        return self.phase is Phase.RUNNING and all(c.alive and c.ready for c in self.containers)


@dataclass(frozen=True)
class PodTemplate:
    mem_limit: float = 64.0
    cpu_share: int = 500
    has_sidecar: bool = False
    memory: MemoryModel = field(default_factory=MemoryModel)


@dataclass
class DeploymentState:
    replica_target: int
    template: PodTemplate
    pods: list[int] = field(default_factory=list)


@dataclass
class EndpointsView:
    service_id: str
    endpoints: tuple = ()
    version: int = 0

    def commit(self, endpoints) -> int:
        self.endpoints = tuple(endpoints)
        self.version += 1
        return self.version


def new_container(template: PodTemplate, name: str = "app", ready: bool = False) -> ContainerState:
    return ContainerState(
        name=name,
        ready=ready,
        alive=True,
        mem_usage=template.memory.base,
        mem_limit=template.mem_limit,
        cpu_share=template.cpu_share,
    )


def advance_container_memory(c: ContainerState, m: MemoryModel, dt: float, completed: int) -> ContainerState:
    """Advance ``c.mem_usage`` over ``dt`` ms during which ``completed`` requests finished.

    Completed requests leave garbage behind that the collector drains at a
    constant rate; the working set of in-flight requests is a hard floor.
    Mutates and returns ``c``.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    grown = c.mem_usage + m.garbage_per_request * completed - m.drain_rate * dt / 1000.0
    c.mem_usage = max(m.floor(c.inflight), grown)
    return c


def oom_check(pod: PodState) -> int | None:
    """Index of the first container over its memory limit, if any.

    The caller carries out the kill through :func:`kill_container` so the
    data plane can fail the requests it held.
    """
    if pod.phase is not Phase.RUNNING:
        return None
    for i, c in enumerate(pod.containers):
        if c.alive and c.mem_usage > c.mem_limit:
            return i
    return None


def kill_container(c: ContainerState) -> float:
    """Apply an OOM kill; returns the backoff (ms) to wait before restarting."""
    wait = c.restart_backoff
    c.alive = False
    c.ready = False
    c.in_backoff = True
    c.inflight = 0
    c.incarnation += 1
    c.restart_count += 1
    c.restart_backoff = min(c.restart_backoff * 2.0, RESTART_BACKOFF_CAP_MS)
    return wait


def restart_container(c: ContainerState, m: MemoryModel) -> ContainerState:
    """Bring a killed container back; readiness waits for the next probe."""
    if c.alive:
        raise ValueError(f"container {c.name} is not dead")
    c.alive = True
    c.in_backoff = False
    c.ready = False
    c.inflight = 0
    c.mem_usage = m.base
    return c


def place_pods(node_counts: dict[int, int], n: int) -> list[int]:
    """Nodes chosen for ``n`` new pods, least-loaded first, ties by node id."""
    counts = dict(node_counts)
    chosen = []
    for _ in range(n):
        node = min(counts, key=lambda k: (counts[k], k))
        counts[node] += 1
        chosen.append(node)
    return chosen


def reconcile_deployment(d: DeploymentState, pods: dict[int, PodState], node_ids: list[int]) -> tuple[list[int], list[int]]:
    """``(nodes_for_new_pods, pod_ids_to_delete)`` moving the deployment toward its target."""
    live = [pods[p] for p in d.pods if pods[p].phase in (Phase.PENDING, Phase.RUNNING)]
    diff = d.replica_target - len(live)
    if diff > 0:
        counts = {n: 0 for n in node_ids}
        for p in live:
            if p.node_id is not None:
                counts[p.node_id] += 1
        return place_pods(counts, diff), []
    if diff < 0:
        # newest first, the way a replica set prefers young pods
        victims = sorted(live, key=lambda p: p.id, reverse=True)[:-diff]
        return [], [p.id for p in victims]
    return [], []
