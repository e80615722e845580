"""Request routing through the native or the mesh hop sequence.

Native: node port on the ingress node -> kube-proxy/IPVS picks an endpoint
round-robin -> local bridge or VXLAN to the pod.

Mesh: node port -> local bridge to the pinned ingress gateway -> gateway
Envoy picks an endpoint -> bridge or VXLAN -> sidecar Envoy -> localhost call
to the app. The gateway retries failed attempts on another endpoint.

Routers only ever see whole endpoint snapshots delivered by the watch
pipeline, so a dead pod stays routable until its removal has committed and
fanned out.
"""

from __future__ import annotations

from dataclasses import dataclass

from .engine import us

SUCCESS = "success"
HTTP_503 = "http-503"
TIMEOUT = "timeout"

CAUSE_EMPTY = "empty"
CAUSE_STALE = "stale"
CAUSE_KILLED = "killed"
CAUSE_EXHAUSTED = "exhausted"
FAILURE_CAUSES = (CAUSE_STALE, CAUSE_EMPTY, CAUSE_KILLED, CAUSE_EXHAUSTED)


@dataclass(frozen=True)
class HopCostModel:
    """Per-hop costs in ms; the sidecar CPU cost is in millicore*ms of work."""

    nodeport_proxy: float = 0.3
    bridge_local: float = 0.1
    vxlan_remote: float = 0.5
    gateway_envoy: float = 1.0
    sidecar_envoy: float = 1.0
    localhost_call: float = 0.05
    sidecar_cpu_per_request: float = 7500.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"hop cost {name} must be >= 0")

    def transit(self, same_node: bool) -> float:
        return self.bridge_local if same_node else self.vxlan_remote

    def sidecar_service_ms(self, cpu_share: float) -> float:
        """Extra service time a request costs a pod whose sidecar shares ``cpu_share``."""
        return self.sidecar_cpu_per_request / cpu_share


@dataclass(frozen=True)
class DataPlaneKind:
    kind: str = "native"
    max_retries: int = 0
    retry_on_status_ge: int = 500

    def __post_init__(self):
        if self.kind not in ("native", "mesh"):
            raise ValueError(f"unknown data plane {self.kind!r}")
        if self.kind == "native" and self.max_retries:
            raise ValueError("native data plane has no retry policy")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def mesh(cls, max_retries: int = 2) -> "DataPlaneKind":
        return cls("mesh", max_retries=max_retries)


@dataclass
class RouterSnapshot:
    endpoints_version: int = 0
    endpoints: tuple = ()  # ((pod_id, node_id), ...)
    rr_cursor: int = 0

    def next_endpoint(self, exclude=()):
        """Round-robin pick, skipping ``exclude`` while an alternative exists."""
        n = len(self.endpoints)
        if n == 0:
            return None
        for _ in range(n):
            ep = self.endpoints[self.rr_cursor % n]
            self.rr_cursor = (self.rr_cursor + 1) % n
            if ep not in exclude:
                return ep
        return None


def apply_watch_update(snapshot: RouterSnapshot, new_endpoints, version: int) -> RouterSnapshot:
    """Atomically replace ``snapshot`` if ``version`` is newer; stale versions are ignored."""
    if version <= snapshot.endpoints_version:
        return snapshot
    return RouterSnapshot(endpoints_version=version, endpoints=tuple(new_endpoints), rr_cursor=0)


def native_latency(hops: HopCostModel, same_node: bool, service_ms: float, t_rtt: float = 0.0) -> float:
    """Worker-observed latency of a successful native request."""
    return t_rtt + hops.nodeport_proxy + hops.transit(same_node) + service_ms


def mesh_latency(hops: HopCostModel, same_node: bool, service_ms: float, t_rtt: float = 0.0) -> float:
    """Worker-observed latency of a first-attempt mesh success (sidecar CPU excluded)."""
    return (
        t_rtt
        + hops.nodeport_proxy
        + hops.bridge_local
        + hops.gateway_envoy
        + hops.transit(same_node)
        + hops.sidecar_envoy
        + hops.localhost_call
        + service_ms
    )


class Request:
    __slots__ = ("worker", "issue_us", "attempts", "tried", "done", "target", "cause", "timed_out")

    def __init__(self, worker: int, issue_us: int):
        self.worker = worker
        self.issue_us = issue_us
        self.attempts = 0
        self.tried = None
        self.done = False
        self.target = None
        self.cause = None
        self.timed_out = False


class DataPlane:
    """Routes requests on behalf of a cluster world.

    The world supplies ``deliver(req, pod_id)`` (called at the moment a
    request reaches the pod) and receives responses through ``respond``,
    which is handed the worker-side arrival time.
    """

    def __init__(self, engine, kind: DataPlaneKind, hops: HopCostModel, ingress_node: int,
                 t_rtt_ms: float, deliver, respond):
        self.engine = engine
        self.kind = kind
        self.mesh = kind.kind == "mesh"
        self.hops = hops
        self.ingress_node = ingress_node
        self.snapshot = RouterSnapshot()
        self._deliver = deliver
        self._respond = respond
        half = us(t_rtt_ms / 2.0)
        self._half_rtt = half
        self._out_us = half + us(hops.nodeport_proxy)
        if self.mesh:
            self._out_us += us(hops.bridge_local + hops.gateway_envoy)
            self._pod_side_us = us(hops.sidecar_envoy + hops.localhost_call)
        else:
            self._pod_side_us = 0
        self._local_us = us(hops.bridge_local)
        self._remote_us = us(hops.vxlan_remote)
        self.failures_by_cause = dict.fromkeys(FAILURE_CAUSES, 0)

    def update(self, endpoints, version: int) -> None:
        self.snapshot = apply_watch_update(self.snapshot, endpoints, version)

    def route(self, req: Request) -> None:
        now = self.engine.now_us
        ep = self.snapshot.next_endpoint()
        req.attempts = 1
        if ep is None:
            self._fail(req, CAUSE_EMPTY, now + self._out_us)
            return
        if self.mesh and self.kind.max_retries:
            req.tried = {ep}
        self._send(req, ep, now + self._out_us)

    def _send(self, req: Request, ep, at_us: int) -> None:
        pod_id, node_id = ep
        req.target = ep
        hop = self._local_us if node_id == self.ingress_node else self._remote_us
        self.engine.schedule(at_us + hop + self._pod_side_us, "request-arrival", self._deliver, req, pod_id)

    def on_success(self, req: Request) -> None:
        self._respond(req, SUCCESS, None, self.engine.now_us + self._half_rtt)

    def on_failure(self, req: Request, cause: str) -> None:
        """The pod could not answer (dead, unready or killed while holding the request)."""
        now = self.engine.now_us
        if self.mesh and req.attempts <= self.kind.max_retries:
            _, node_id = req.target
            back = self._local_us if node_id == self.ingress_node else self._remote_us
            ep = self.snapshot.next_endpoint(exclude=req.tried)
            if ep is not None:
                req.attempts += 1
                req.tried.add(ep)
                self._send(req, ep, now + back + us(self.hops.gateway_envoy))
                return
            if req.attempts > 1:
                cause = CAUSE_EXHAUSTED
        elif req.attempts > 1:
            cause = CAUSE_EXHAUSTED
        self._fail(req, cause, now)

    def _fail(self, req: Request, cause: str, at_us: int) -> None:
        self.failures_by_cause[cause] += 1
        self._respond(req, HTTP_503, cause, at_us + self._half_rtt)
