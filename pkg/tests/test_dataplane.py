from __future__ import annotations

import pytest

from kubesim.dataplane import (
    CAUSE_EMPTY,
    CAUSE_EXHAUSTED,
    CAUSE_STALE,
    HTTP_503,
    SUCCESS,
    DataPlane,
    DataPlaneKind,
    HopCostModel,
    Request,
    RouterSnapshot,
    apply_watch_update,
    mesh_latency,
    native_latency,
)
from kubesim.engine import Engine, us


class Harness:
    """A data plane whose pods answer instantly, or fail if listed in ``broken``."""

    def __init__(self, kind, endpoints, broken=(), t_rtt=8.0, hops=None):
        self.engine = Engine()
        self.broken = set(broken)
        self.arrivals = []
        self.responses = []
        self.dp = DataPlane(self.engine, kind, hops or HopCostModel(), ingress_node=0, t_rtt_ms=t_rtt,
                            deliver=self.deliver, respond=self.respond)
        self.dp.update(tuple(endpoints), 1)

    def deliver(self, req, pod_id):
        self.arrivals.append((self.engine.now_us, pod_id))
        if pod_id in self.broken:
            self.dp.on_failure(req, CAUSE_STALE)
        else:
            self.dp.on_success(req)

    def respond(self, req, status, cause, at_us):
        self.responses.append((status, cause, at_us, req.attempts))

    def send(self):
        req = Request(0, self.engine.now_us)
        self.dp.route(req)
        self.engine.run_until(self.engine.now_us + us(1000.0))
        return self.responses[-1]


def test_native_latency_matches_hop_sum():
    h = Harness(DataPlaneKind(), [(1, 0)])
    status, cause, at, _ = h.send()
    assert status == SUCCESS and cause is None
    assert at == us(native_latency(HopCostModel(), True, 0.0, 8.0))


def test_mesh_latency_matches_hop_sum_remote():
    h = Harness(DataPlaneKind.mesh(), [(1, 3)])
    status, _, at, _ = h.send()
    assert status == SUCCESS
    assert at == us(mesh_latency(HopCostModel(), False, 0.0, 8.0))


def test_mesh_costs_more_than_native_for_same_path():
    hops = HopCostModel()
    for same in (True, False):
        assert mesh_latency(hops, same, 55.0) > native_latency(hops, same, 55.0)


def test_round_robin_over_endpoints():
    h = Harness(DataPlaneKind(), [(1, 0), (2, 1), (3, 2)])
    for _ in range(6):
        h.send()
    assert [p for _, p in h.arrivals] == [1, 2, 3, 1, 2, 3]


def test_empty_endpoint_set_fails_with_empty_cause():
    h = Harness(DataPlaneKind(), [])
    status, cause, _, _ = h.send()
    assert (status, cause) == (HTTP_503, CAUSE_EMPTY)
    assert h.dp.failures_by_cause[CAUSE_EMPTY] == 1


def test_native_has_no_retry():
    h = Harness(DataPlaneKind(), [(1, 0), (2, 0)], broken={1})
    status, cause, _, attempts = h.send()
    assert (status, cause, attempts) == (HTTP_503, CAUSE_STALE, 1)


def test_mesh_retries_on_another_endpoint():
    h = Harness(DataPlaneKind.mesh(2), [(1, 0), (2, 0)], broken={1})
    status, cause, _, attempts = h.send()
    assert (status, cause, attempts) == (SUCCESS, None, 2)
    assert [p for _, p in h.arrivals] == [1, 2]


def test_mesh_exhausts_retries():
    h = Harness(DataPlaneKind.mesh(2), [(1, 0), (2, 0), (3, 0), (4, 0)], broken={1, 2, 3, 4})
    status, cause, _, attempts = h.send()
    assert (status, cause, attempts) == (HTTP_503, CAUSE_EXHAUSTED, 3)
    # each failure is attributed to exactly one cause
    assert sum(h.dp.failures_by_cause.values()) == 1


def test_mesh_single_endpoint_retry_has_nowhere_to_go():
    h = Harness(DataPlaneKind.mesh(2), [(1, 0)], broken={1})
    status, cause, _, attempts = h.send()
    assert (status, cause, attempts) == (HTTP_503, CAUSE_STALE, 1)


def test_watch_updates_only_move_forward():
    snap = RouterSnapshot(endpoints_version=3, endpoints=((1, 0),))
    assert apply_watch_update(snap, ((2, 0),), 2) is snap
    newer = apply_watch_update(snap, ((2, 0),), 4)
    assert newer.endpoints == ((2, 0),) and newer.endpoints_version == 4


def test_kind_validation():
    with pytest.raises(ValueError):
        DataPlaneKind("native", max_retries=1)
    with pytest.raises(ValueError):
        DataPlaneKind("linkerd")
    with pytest.raises(ValueError):
        HopCostModel(vxlan_remote=-0.1)


def test_sidecar_service_time_from_cpu_share():
    assert HopCostModel(sidecar_cpu_per_request=7500.0).sidecar_service_ms(500) == 15.0
