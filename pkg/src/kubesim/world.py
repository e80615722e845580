"""The cluster world: wires engine, store, control loops, pods, data plane and workers.

One :class:`ClusterWorld` is one experiment run. Everything it owns lives on a
single engine; nothing is shared between worlds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cluster import (
    DeploymentState,
    EndpointsView,
    NodeSpec,
    Phase,
    PodState,
    PodTemplate,
    advance_container_memory,
    kill_container,
    new_container,
    oom_check,
    place_pods,
    reconcile_deployment,
    restart_container,
)
from .control import EtcdStore, HpaState, LeaderLease, hpa_decision, probe_pod
from .dataplane import CAUSE_KILLED, CAUSE_STALE, DataPlane
from .engine import Engine, us
from .loadgen import ClosedLoopLoadGenerator, SecondCollector, WorkerPopulation
from .scenario import ScenarioSpec

CONTROLLER_MANAGER = "controller-manager"
SCHEDULER = "scheduler"
ROLES = (CONTROLLER_MANAGER, SCHEDULER)

FRAME_COLUMNS = (
    "second",
    "successes",
    "fail_503_stale",
    "fail_503_empty",
    "fail_503_killed",
    "fail_503_exhausted",
    "fail_timeout",
    "mean_rt_ms",
    "p95_rt_ms",
    "ready_pods",
    "desired_pods",
    "leader_ok",
    "etcd_write_p99_ms",
    "oom_kills",
)


@dataclass
class SimulationResult:
    scenario: str
    seed: int
    frames: list[dict]
    # per-second diagnostics that are not part of the persisted frame schema
    mean_cpu_ratio: list[float]
    hpa_stall_ticks: int
    lease_outages: dict[str, list[tuple[int, int]]]
    issued: int
    recorded: int
    unfinished_requests: int
    events_fired: int
    totals: dict = field(default_factory=dict)
    samples: list | None = None
    logs: dict = field(default_factory=dict)

    @property
    def successes(self) -> np.ndarray:
        return np.array([f["successes"] for f in self.frames], dtype=float)

    @property
    def failures(self) -> np.ndarray:
        cols = ("fail_503_stale", "fail_503_empty", "fail_503_killed", "fail_503_exhausted", "fail_timeout")
        return np.array([sum(f[c] for c in cols) for f in self.frames], dtype=float)

    def column(self, name: str) -> np.ndarray:
        return np.array([f[name] for f in self.frames], dtype=float)


class ClusterWorld:
    def __init__(self, spec: ScenarioSpec, seed: int, trace: bool = False,
                 keep_samples: bool = False, diagnostics: bool = False):
        self.spec = spec
        self.seed = seed
        self.engine = eng = Engine(seed, trace=trace)
        self.diagnostics = diagnostics
        cl = spec.cluster
        ctl = spec.control
        self.n_seconds = int(spec.duration)
        self.end_us = us(spec.duration * 1000.0)

        self.rng_etcd = eng.split_rng("etcd")
        self.rng_probe = eng.split_rng("probes")
        self.rng_service = eng.split_rng("service")
        self.rng_phase = eng.split_rng("control-phase")

        self.nodes = [
            NodeSpec(i, cpu_capacity=cl.node_cpu, mem_capacity=cl.node_mem, has_ingress_role=(i == 0))
            for i in range(cl.worker_nodes)
        ]
        self.node_ids = [n.id for n in self.nodes]
        self.ingress = 0
        self.mesh = spec.data_plane.kind == "mesh"
        self.template = PodTemplate(
            mem_limit=cl.mem_limit, cpu_share=cl.cpu_share, has_sidecar=self.mesh, memory=spec.memory_model
        )
        self.memory = spec.memory_model
        t = spec.timing
        self.exec_us = us(t.t_exec)
        self.sidecar_us = us(spec.hop_costs.sidecar_service_ms(cl.cpu_share)) if self.mesh else 0
        self.noise = t.noise
        self.probe_us = us(cl.probe_period_ms)

        self.store = EtcdStore(eng, spec.etcd_profile, self.rng_etcd, io_rate=lambda: self.io_rate)
        self.store.on_commit_latency = self._note_commit_latency
        self.io_rate = 0.0

        self.leases = {
            role: LeaderLease(role, ctl.lease_duration_ms, ctl.lease_renew_ms, last_renew_commit_us=0)
            for role in ROLES
        }
        self.hpa = None
        if spec.hpa_enabled:
            self.hpa = HpaState(
                min_replicas=spec.initial_pods,
                max_replicas=spec.hpa_max,
                target_cpu_ratio=ctl.hpa_target_cpu_ratio,
                sync_period_ms=ctl.hpa_sync_ms,
                staleness_ms=ctl.hpa_staleness_ms,
                tolerance=ctl.hpa_tolerance,
                downscale_window_ms=ctl.hpa_downscale_window_ms,
                initial_readiness_delay_ms=ctl.hpa_initial_readiness_delay_ms,
            )

        self.collector = SecondCollector(self.n_seconds)
        population = WorkerPopulation(spec.workers, spec.loadgen_nodes, t.t_delay, t.t_timeout)
        self.loadgen = ClosedLoopLoadGenerator(
            eng, population, self._route, self.collector, 0, self.end_us,
            deterministic_delay=t.deterministic_delay, keep_samples=keep_samples,
        )
        self.dataplane = DataPlane(
            eng, spec.data_plane, spec.hop_costs, self.ingress, t.t_rtt, self._deliver, self.loadgen.respond
        )

        self.pods: dict[int, PodState] = {}
        self.deployment = DeploymentState(replica_target=spec.initial_pods, template=self.template)
        self.endpoints = EndpointsView("app")
        self._ep_version_by_rev: dict[int, int] = {}
        self._ep_dirty = False
        self._ep_write_pending = False
        self._scale_write_pending = False
        self._reconcile_dirty = False
        self._pending_bind: list[int] = []
        self._next_pod_id = 0

        # per-second bookkeeping
        self._sec_latencies: list[float] = []
        self._completions_sec = 0
        self._demand_sec = 0
        self.oom_kills = 0
        self.frames_ctl: list[dict] = []
        self.mean_cpu_ratio: list[float] = []
        self.logs = {"kills": [], "stale": [], "ep_updates": [], "reconcile": [], "hpa": []} if diagnostics else None

        self._bootstrap()

    # ------------------------------------------------------------------ setup
    def _bootstrap(self):
        eng = self.engine
        placement = place_pods({n: 0 for n in self.node_ids}, self.spec.initial_pods)
        for node in placement:
            pod = self._new_pod(node)
            pod.phase = Phase.RUNNING
            for c in pod.containers:
                c.ready = True
            pod.reported_ready = True
            self.store.kv[f"pods/{pod.id}"] = (True, 0)
        eps = self._committed_endpoints()
        version = self.endpoints.commit(eps)
        self.dataplane.update(eps, version)
        self.store.kv["endpoints/app"] = (eps, 0)

        self.store.watch("pods/", self._on_pod_status)
        self.store.watch("endpoints/", self._on_endpoints_watch)

        for pod in self.pods.values():
            self._start_pod_loops(pod)
        for role in ROLES:
            eng.schedule(us(self.rng_phase.uniform(0, self.spec.control.lease_renew_ms)), "lease-renewal",
                         self._lease_tick, role)
        hb = self.spec.control.node_heartbeat_ms
        for node in self.node_ids:
            eng.schedule(us(self.rng_phase.uniform(0, hb)), "heartbeat", self._heartbeat, node)
        if self.hpa is not None:
            eng.schedule(us(self.rng_phase.uniform(0, self.hpa.sync_period_ms)), "hpa-tick", self._hpa_tick)
        eng.schedule(us(self.spec.cluster.oom_check_ms), "oom-check", self._oom_tick)
        eng.schedule(us(1000.0), "second-tick", self._second_tick, 0)
        self.loadgen.start()

    def _new_pod(self, node_id):
        pid = self._next_pod_id
        self._next_pod_id += 1
        containers = [new_container(self.template, "app")]
        if self.template.has_sidecar:
            sidecar = new_container(self.template, "istio-proxy")
            containers.append(sidecar)
        pod = PodState(id=pid, node_id=node_id, containers=containers, has_sidecar=self.template.has_sidecar)
        pod.mem_updated_us = self.engine.now_us
        self.pods[pid] = pod
        self.deployment.pods.append(pid)
        return pod

    def _start_pod_loops(self, pod: PodState):
        eng = self.engine
        eng.schedule(eng.now_us + us(self.rng_probe.uniform(0, self.spec.cluster.probe_period_ms)),
                     "probe-tick", self._probe_tick, pod)
        eng.schedule(eng.now_us + us(self.rng_phase.uniform(0, self.spec.control.metrics_period_ms)),
                     "metrics-report", self._metrics_report, pod)

    # -------------------------------------------------------------- requests
    def _route(self, req):
        self.dataplane.route(req)

    def _deliver(self, req, pod_id):
        pod = self.pods.get(pod_id)
        if pod is None or not pod.serving:
            if self.logs is not None:
                self.logs["stale"].append((self.engine.now_us, pod_id))
            self.dataplane.on_failure(req, CAUSE_STALE)
            return
        self._touch(pod, self.engine.now_us)
        pod.queue.append(req)
        pod.app.inflight += 1
        if pod.in_service is None:
            self._start_service(pod)

    def _service_us(self):
        s = self.exec_us + self.sidecar_us
        if self.noise.family != "none":
            s += us(self.noise.draw(self.rng_service))
        return s

    def _start_service(self, pod: PodState):
        req = pod.queue.popleft()
        pod.in_service = req
        now = self.engine.now_us
        self.engine.schedule(now + self._service_us(), "service-complete", self._complete, pod, pod.app.incarnation)

    def _touch(self, pod: PodState, now: int):
        """Accumulate in-flight demand up to ``now``; call before inflight changes."""
        d = pod.app.inflight * (now - pod.demand_touched_us)
        pod.demand_area += d
        self._demand_sec += d
        pod.demand_touched_us = now

    def _complete(self, pod: PodState, incarnation: int):
        app = pod.app
        if app.incarnation != incarnation or pod.phase is not Phase.RUNNING:
            return
        now = self.engine.now_us
        self._touch(pod, now)
        req = pod.in_service
        pod.in_service = None
        app.inflight -= 1
        self._completions_sec += 1
        advance_container_memory(app, self.memory, (now - pod.mem_updated_us) / 1000.0, 1)
        pod.mem_updated_us = now
        self.dataplane.on_success(req)
        if oom_check(pod) is not None:
            self._kill(pod)
            return
        if pod.queue:
            self._start_service(pod)

    # -------------------------------------------------------------- memory
    def _oom_tick(self):
        now = self.engine.now_us
        for pod in list(self.pods.values()):
            if pod.phase is not Phase.RUNNING or not pod.app.alive:
                continue
            advance_container_memory(pod.app, self.memory, (now - pod.mem_updated_us) / 1000.0, 0)
            pod.mem_updated_us = now
            if oom_check(pod) is not None:
                self._kill(pod)
        self.engine.schedule(now + us(self.spec.cluster.oom_check_ms), "oom-check", self._oom_tick)

    def _kill(self, pod: PodState):
        now = self.engine.now_us
        app = pod.app
        self._touch(pod, now)
        wait_ms = kill_container(app)
        self.oom_kills += 1
        if self.logs is not None:
            self.logs["kills"].append((now, pod.id))
        victims = []
        if pod.in_service is not None:
            victims.append(pod.in_service)
            pod.in_service = None
        victims.extend(pod.queue)
        pod.queue.clear()
        for req in victims:
            self.dataplane.on_failure(req, CAUSE_KILLED)
        self.store.write(f"events/pod-{pod.id}-oomkilled-{app.restart_count}", now)
        self.engine.schedule(now + us(wait_ms), "restart", self._restart, pod, app.incarnation)

    def _restart(self, pod: PodState, incarnation: int):
        app = pod.app
        if app.incarnation != incarnation or pod.phase is not Phase.RUNNING:
            return
        restart_container(app, self.memory)
        pod.mem_updated_us = self.engine.now_us
        self.store.write(f"events/pod-{pod.id}-started-{app.restart_count}", self.engine.now_us)

    # -------------------------------------------------------------- probes & endpoints
    def _probe_tick(self, pod: PodState):
        if pod.phase is Phase.DEAD:
            return
        new = probe_pod(pod)
        if new is not None:
            pod.reported_ready = new
            self.store.write(f"pods/{pod.id}", new)
        self.engine.schedule(self.engine.now_us + self.probe_us, "probe-tick", self._probe_tick, pod)

    def _committed_endpoints(self):
        eps = []
        for pid in self.deployment.pods:
            pod = self.pods[pid]
            if pod.phase in (Phase.DEAD, Phase.TERMINATING) or pod.node_id is None:
                continue
            if self.store.get(f"pods/{pid}", False):
                eps.append((pid, pod.node_id))
        return tuple(eps)

    def _on_pod_status(self, key, value, rev):
        self._ep_dirty = True
        self._sync_endpoints()

    def _sync_endpoints(self):
        if not self._ep_dirty or self._ep_write_pending:
            return
        if not self.leases[CONTROLLER_MANAGER].is_leader(self.engine.now_us):
            return
        self._ep_dirty = False
        self._ep_write_pending = True
        self.store.write("endpoints/app", self._committed_endpoints(), on_commit=self._endpoints_committed)

    def _endpoints_committed(self, key, eps, rev):
        self._ep_write_pending = False
        self._ep_version_by_rev[rev] = self.endpoints.commit(eps)
        # retry from a fresh event so the watch fan-out of this commit is scheduled first
        if self._ep_dirty:
            self.engine.schedule(self.engine.now_us, "generic", self._sync_endpoints)

    def _on_endpoints_watch(self, key, eps, rev):
        version = self._ep_version_by_rev.get(rev, 0)
        if self.mesh:
            # gateway config travels a second watch hop
            self.engine.schedule(
                self.engine.now_us + us(self.spec.etcd_profile.watch_fanout_delay_ms),
                "watch-notify", self._apply_router_update, eps, version,
            )
        else:
            self._apply_router_update(eps, version)

    def _apply_router_update(self, eps, version):
        self.dataplane.update(eps, version)
        if self.logs is not None:
            self.logs["ep_updates"].append((self.engine.now_us, version, eps))

    # -------------------------------------------------------------- leases
    def _lease_tick(self, role: str):
        lease = self.leases[role]
        if not lease.renewal_pending:
            lease.renewal_pending = True
            self.store.write(f"leases/{role}", role, on_commit=lambda k, v, r: self._lease_committed(role))
        self.engine.schedule(self.engine.now_us + us(lease.renew_period_ms), "lease-renewal", self._lease_tick, role)

    def _lease_committed(self, role: str):
        if self.leases[role].record_commit(self.engine.now_us):
            if role == CONTROLLER_MANAGER:
                self._sync_endpoints()
                if self._reconcile_dirty:
                    self._reconcile()
            else:
                self._bind_pending()

    def is_leader(self, role: str) -> bool:
        return self.leases[role].is_leader(self.engine.now_us)

    def _heartbeat(self, node: int):
        self.store.write(f"nodes/{node}/lease", self.engine.now_us)
        self.engine.schedule(self.engine.now_us + us(self.spec.control.node_heartbeat_ms), "heartbeat",
                             self._heartbeat, node)

    # -------------------------------------------------------------- metrics & HPA
    def _metrics_report(self, pod: PodState):
        if pod.phase is Phase.DEAD:
            return
        now = self.engine.now_us
        period = us(self.spec.control.metrics_period_ms)
        self._touch(pod, now)
        ratio = pod.demand_area / max(now - pod.window_start_us, 1)
        pod.demand_area = 0
        pod.window_start_us = now
        if pod.phase is Phase.RUNNING and pod.app.alive:
            self.store.write(f"metrics/{pod.id}", (ratio, now), on_commit=self._metric_committed)
        self.engine.schedule(now + period, "metrics-report", self._metrics_report, pod)

    def _metric_committed(self, key, value, rev):
        if self.hpa is not None:
            pod_id = int(key.split("/", 1)[1])
            self.hpa.last_metrics_window[pod_id] = value

    def _hpa_tick(self):
        h = self.hpa
        now = self.engine.now_us
        self.engine.schedule(now + us(h.sync_period_ms), "hpa-tick", self._hpa_tick)
        if not self.is_leader(CONTROLLER_MANAGER):
            return
        ready = {pid for pid in self.deployment.pods if self.pods[pid].routable}
        started = {pid: self.pods[pid].started_us for pid in ready}
        desired = hpa_decision(h, self.deployment.replica_target, ready, now, started)
        if self.logs is not None:
            self.logs["hpa"].append((now, desired, len(ready)))
        if desired is None or desired == self.deployment.replica_target or self._scale_write_pending:
            return
        self._scale_write_pending = True
        self.store.write("deployments/app", desired, on_commit=self._scale_committed)

    def _scale_committed(self, key, value, rev):
        self._scale_write_pending = False
        self.deployment.replica_target = value
        self._reconcile()

    # -------------------------------------------------------------- deployment & scheduler
    def _reconcile(self):
        if not self.is_leader(CONTROLLER_MANAGER):
            self._reconcile_dirty = True
            return
        self._reconcile_dirty = False
        creates, deletes = reconcile_deployment(self.deployment, self.pods, self.node_ids)
        if self.logs is not None:
            self.logs["reconcile"].append((self.engine.now_us, len(creates), len(deletes)))
        for _ in creates:
            pod = self._new_pod(None)
            self.store.write(f"pods-spec/{pod.id}", "created", on_commit=self._pod_created)
        for pid in deletes:
            self._terminate(self.pods[pid])

    def _pod_created(self, key, value, rev):
        self._pending_bind.append(int(key.split("/", 1)[1]))
        self._bind_pending()

    def _bind_pending(self):
        if not self._pending_bind or not self.is_leader(SCHEDULER):
            return
        counts = {n: 0 for n in self.node_ids}
        for pid in self.deployment.pods:
            p = self.pods[pid]
            if p.node_id is not None and p.phase in (Phase.PENDING, Phase.RUNNING):
                counts[p.node_id] += 1
        for pid, node in zip(self._pending_bind, place_pods(counts, len(self._pending_bind))):
            self.pods[pid].node_id = node
            self.store.write(f"bindings/{pid}", node, on_commit=self._pod_bound)
        self._pending_bind = []

    def _pod_bound(self, key, node, rev):
        pod = self.pods[int(key.split("/", 1)[1])]
        self.engine.schedule(self.engine.now_us + us(self.spec.cluster.pod_startup_ms), "pod-start",
                             self._pod_start, pod)

    def _pod_start(self, pod: PodState):
        if pod.phase is not Phase.PENDING:
            return
        now = self.engine.now_us
        pod.phase = Phase.RUNNING
        pod.mem_updated_us = now
        pod.demand_touched_us = pod.window_start_us = pod.started_us = now
        self._start_pod_loops(pod)

    def _terminate(self, pod: PodState):
        pod.phase = Phase.TERMINATING
        pod.reported_ready = False
        self.store.write(f"pods/{pod.id}", False)
        self.engine.schedule(self.engine.now_us + us(30000.0), "generic", self._reap, pod)

    def _reap(self, pod: PodState):
        victims = ([pod.in_service] if pod.in_service is not None else []) + list(pod.queue)
        pod.in_service = None
        pod.queue.clear()
        pod.phase = Phase.DEAD
        for req in victims:
            self.dataplane.on_failure(req, CAUSE_KILLED)

    # -------------------------------------------------------------- per-second frame
    def _note_commit_latency(self, now_us, latency_ms):
        self._sec_latencies.append(latency_ms)

    def _second_tick(self, second: int):
        now = self.engine.now_us
        lat = self._sec_latencies
        p99 = float(np.percentile(lat, 99)) if lat else 0.0
        p99 = max(p99, self.store.oldest_pending_age_ms())
        self._sec_latencies = []
        running = [p for p in self.pods.values() if p.phase is Phase.RUNNING]
        for p in running:
            self._touch(p, now)
        alive = sum(1 for p in running if p.app.alive)
        self.mean_cpu_ratio.append(self._demand_sec / 1e6 / alive if alive else 0.0)
        self._demand_sec = 0
        self.frames_ctl.append({
            "ready_pods": sum(1 for p in running if p.routable),
            "desired_pods": self.deployment.replica_target,
            "leader_ok": all(l.is_leader(now) for l in self.leases.values()),
            "etcd_write_p99_ms": p99,
            "oom_kills": self.oom_kills,
        })
        self.io_rate = float(self._completions_sec)
        self._completions_sec = 0
        if second + 1 < self.n_seconds:
            self.engine.schedule(now + 1_000_000, "second-tick", self._second_tick, second + 1)

    # -------------------------------------------------------------- run
    def run(self) -> SimulationResult:
        eng = self.engine
        fired = eng.run_until(self.end_us)
        fired += eng.run_until(self.end_us + us(self.spec.cluster.drain_s * 1000.0))
        rows = self.collector.rows()
        frames = []
        for row, ctl in zip(rows, self.frames_ctl):
            frame = dict(row)
            frame.update(ctl)
            frames.append(frame)
        lg = self.loadgen
        totals = {c: sum(f[c] for f in frames) for c in FRAME_COLUMNS[1:7]}
        return SimulationResult(
            scenario=self.spec.name,
            seed=self.seed,
            frames=frames,
            mean_cpu_ratio=self.mean_cpu_ratio,
            hpa_stall_ticks=self.hpa.stalls if self.hpa else 0,
            lease_outages={r: l.outage_intervals(eng.now_us) for r, l in self.leases.items()},
            issued=lg.issued,
            recorded=lg.recorded,
            unfinished_requests=lg.inflight,
            events_fired=fired,
            totals=totals,
            samples=lg.samples,
            logs=self.logs or {},
        )


def simulate(spec: ScenarioSpec, seed: int, **kwargs) -> SimulationResult:
    """Run one seeded experiment of ``spec`` and return its measurements."""
    return ClusterWorld(spec, seed, **kwargs).run()


def frame_is_contiguous(frames: list[dict], n_seconds: int) -> bool:
    return [f["second"] for f in frames] == list(range(n_seconds))


def check_conservation(result: SimulationResult) -> bool:
    """Issued attempts equal recorded samples plus requests still open at the end."""
    per_second = sum(
        f["successes"] + f["fail_503_stale"] + f["fail_503_empty"] + f["fail_503_killed"]
        + f["fail_503_exhausted"] + f["fail_timeout"]
        for f in result.frames
    )
    return result.issued == result.recorded + result.unfinished_requests and per_second == result.recorded

