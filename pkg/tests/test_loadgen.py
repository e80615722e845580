from __future__ import annotations

import math

import pytest

from kubesim.dataplane import CAUSE_KILLED, HTTP_503, SUCCESS, TIMEOUT
from kubesim.engine import Engine, us
from kubesim.loadgen import (
    ClosedLoopLoadGenerator,
    RequestSample,
    SecondCollector,
    WorkerPopulation,
    collect_second,
)
from oracles import closed_loop_rate


def fixed_server(engine, latency_ms, status=SUCCESS, cause=None):
    holder = {}

    def route(req):
        at = engine.now_us + us(latency_ms)
        engine.schedule(at, "generic", holder["lg"].respond, req, status, cause, at)

    return holder, route


def run_loop(L, latency_ms, t_delay, seconds, timeout=math.inf, deterministic=True, status=SUCCESS):
    eng = Engine(seed=5)
    holder, route = fixed_server(eng, latency_ms, status)
    pop = WorkerPopulation(L, 6, t_delay, timeout)
    col = SecondCollector(seconds)
    lg = ClosedLoopLoadGenerator(eng, pop, route, col, 0, us(seconds * 1000.0),
                                 deterministic_delay=deterministic)
    holder["lg"] = lg
    lg.start()
    eng.run_until(us(seconds * 1000.0 + 5000.0))
    return lg, col


def test_workers_split_across_load_nodes():
    assert WorkerPopulation(62, 6).per_node == [11, 11, 10, 10, 10, 10]
    assert sum(WorkerPopulation(5, 6).per_node) == 5


@pytest.mark.parametrize("L", [1, 6, 30])
def test_fixed_latency_loop_matches_rate_law(L):
    seconds = 30
    lg, col = run_loop(L, 63.0, 20.0, seconds)
    measured = sum(col.successes) / seconds
    assert measured == pytest.approx(closed_loop_rate(L, 63.0, 20.0), rel=0.01)
    assert lg.inflight == 0


def test_exponential_think_time_matches_rate_law_on_average():
    seconds = 60
    _, col = run_loop(20, 30.0, 20.0, seconds, deterministic=False)
    assert sum(col.successes) / seconds == pytest.approx(closed_loop_rate(20, 30.0, 20.0), rel=0.03)


def test_timeouts_cap_the_cycle():
    seconds = 20
    lg, col = run_loop(4, 500.0, 20.0, seconds, timeout=100.0)
    assert sum(col.successes) == 0
    assert sum(col.timeouts) / seconds == pytest.approx(closed_loop_rate(4, 500.0, 20.0, 100.0), rel=0.02)


def test_failures_are_counted_by_cause():
    eng = Engine()
    col = SecondCollector(2)
    col.add(0, HTTP_503, CAUSE_KILLED, 10)
    col.add(1, SUCCESS, None, us(20.0))
    col.add(1, TIMEOUT, None, us(30.0))
    col.add(5, SUCCESS, None, 0)  # out of range, ignored
    rows = col.rows()
    assert rows[0]["fail_503_killed"] == 1 and rows[0]["successes"] == 0
    assert rows[1]["successes"] == 1 and rows[1]["fail_timeout"] == 1
    assert rows[1]["mean_rt_ms"] == 20.0
    assert col.total == 3
    assert eng.now_us == 0


def test_collect_second_buckets_by_issue_time():
    samples = [RequestSample(10.0, SUCCESS, 5.0), RequestSample(999.9, SUCCESS, 15.0),
               RequestSample(1000.0, SUCCESS, 7.0)]
    rows = collect_second(samples)
    assert [r["successes"] for r in rows] == [2, 1]
    assert rows[0]["mean_rt_ms"] == pytest.approx(10.0)
    assert rows[0]["p95_rt_ms"] == pytest.approx(14.5)


def test_one_request_per_worker_at_a_time():
    # a slow server would expose a worker that issues twice
    lg, col = run_loop(3, 900.0, 0.0, 10)
    assert lg.issued == lg.recorded + lg.inflight
    assert sum(col.successes) <= 3 * 10 * 1000 / 900 + 3
