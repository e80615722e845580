"""Closed-loop worker population.

Every worker sends one request, waits for the response (or its time-out),
sleeps an exponential delay with mean ``t_delay`` and repeats. Samples are
bucketed per second of issue time, counted from the start of the experiment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .dataplane import CAUSE_EMPTY, CAUSE_EXHAUSTED, CAUSE_KILLED, CAUSE_STALE, SUCCESS, TIMEOUT, Request
from .engine import Engine, us


@dataclass(frozen=True)
class WorkerPopulation:
    total_workers: int
    loadgen_nodes: int = 6
    t_delay: float = 20.0
    t_timeout: float = math.inf

    def __post_init__(self):
        if self.total_workers < 0 or self.loadgen_nodes < 1:
            raise ValueError("need total_workers >= 0 and loadgen_nodes >= 1")

    @property
    def per_node(self) -> list[int]:
        """Workers on each load node; a remainder goes one-per-node to the first nodes."""
        q, r = divmod(self.total_workers, self.loadgen_nodes)
        return [q + (1 if k < r else 0) for k in range(self.loadgen_nodes)]


@dataclass(frozen=True)
class RequestSample:
    issue_time: float  # ms since experiment start
    status: str
    t_resp: float
    attempts: int = 1
    cause: str | None = None


FAIL_COLUMNS = {
    CAUSE_STALE: "fail_503_stale",
    CAUSE_EMPTY: "fail_503_empty",
    CAUSE_KILLED: "fail_503_killed",
    CAUSE_EXHAUSTED: "fail_503_exhausted",
}


class SecondCollector:
    """Incremental per-second aggregation of request samples."""

    def __init__(self, n_seconds: int):
        self.n = n_seconds
        self.successes = [0] * n_seconds
        self.failures = {col: [0] * n_seconds for col in FAIL_COLUMNS.values()}
        self.timeouts = [0] * n_seconds
        self.rts: list[list[int]] = [[] for _ in range(n_seconds)]
        self.total = 0

    def add(self, second: int, status: str, cause: str | None, t_resp_us: int) -> None:
        if not 0 <= second < self.n:
            return
        self.total += 1
        if status == SUCCESS:
            self.successes[second] += 1
            self.rts[second].append(t_resp_us)
        elif status == TIMEOUT:
            self.timeouts[second] += 1
        else:
            self.failures[FAIL_COLUMNS[cause]][second] += 1

    def rows(self) -> list[dict]:
        out = []
        for s in range(self.n):
            rts = self.rts[s]
            if rts:
                arr = np.asarray(rts, dtype=np.float64) / 1000.0
                mean_rt = float(arr.mean())
                p95 = float(np.percentile(arr, 95))
            else:
                mean_rt = p95 = 0.0
            row = {"second": s, "successes": self.successes[s]}
            for col, vals in self.failures.items():
                row[col] = vals[s]
            row["fail_timeout"] = self.timeouts[s]
            row["mean_rt_ms"] = mean_rt
            row["p95_rt_ms"] = p95
            out.append(row)
        return out


def collect_second(samples: Iterable[RequestSample], n_seconds: int | None = None) -> list[dict]:
    """Per-second counters for a finished list of samples (issue times in ms, from 0)."""
    samples = list(samples)
    if n_seconds is None:
        n_seconds = 1 + max((int(s.issue_time // 1000) for s in samples), default=-1)
    col = SecondCollector(n_seconds)
    for s in samples:
        col.add(int(s.issue_time // 1000), s.status, s.cause, us(s.t_resp))
    return col.rows()


class ClosedLoopLoadGenerator:
    """Drives ``population`` against ``route`` on ``engine``.

    ``route(req)`` must eventually call :meth:`respond` exactly once per
    attempt it accepts. Requests are issued in ``[start_us, stop_us)``.
    """

    def __init__(self, engine: Engine, population: WorkerPopulation, route: Callable[[Request], None],
                 collector: SecondCollector, start_us: int, stop_us: int,
                 deterministic_delay: bool = False, keep_samples: bool = False):
        self.engine = engine
        self.pop = population
        self.route = route
        self.collector = collector
        self.start_us = start_us
        self.stop_us = stop_us
        self.deterministic = deterministic_delay
        self.mean_delay_ms = population.t_delay
        self.timeout_us = None if math.isinf(population.t_timeout) else us(population.t_timeout)
        self.rngs = [engine.split_rng(f"loadgen-w{i}") for i in range(population.total_workers)]
        self.issued = 0
        self.recorded = 0
        self.inflight = 0
        self.max_inflight_per_worker = 0
        self._busy = [False] * population.total_workers
        self.samples: list[RequestSample] | None = [] if keep_samples else None

    def _delay_us(self, w: int) -> int:
        if self.mean_delay_ms <= 0:
            return 0
        if self.deterministic:
            return us(self.mean_delay_ms)
        return us(self.rngs[w].expovariate(1.0 / self.mean_delay_ms))

    def start(self) -> None:
        for w in range(self.pop.total_workers):
            # enter the loop as if just finishing a delay
            at = self.start_us + us(self.rngs[w].uniform(0.0, max(self.mean_delay_ms, 1.0)))
            self.engine.schedule(at, "request-arrival", self._issue, w)

    def _issue(self, w: int) -> None:
        now = self.engine.now_us
        if now >= self.stop_us:
            return
        if self._busy[w]:
            raise RuntimeError(f"worker {w} issued a request while one is in flight")
        self._busy[w] = True
        self.issued += 1
        self.inflight += 1
        req = Request(w, now)
        if self.timeout_us is not None:
            self.engine.schedule(now + self.timeout_us, "timeout", self._on_timeout, req)
        self.route(req)

    def _on_timeout(self, req: Request) -> None:
        if req.done:
            return
        req.timed_out = True
        self._finish(req, TIMEOUT, None, self.engine.now_us)

    def respond(self, req: Request, status: str, cause: str | None, at_us: int) -> None:
        """Response for ``req`` reaches its worker at ``at_us`` (>= now)."""
        if req.done or req.timed_out:
            return
        if self.timeout_us is not None and at_us - req.issue_us >= self.timeout_us:
            return  # the timeout event records this one
        self._finish(req, status, cause, at_us)

    def _finish(self, req: Request, status: str, cause: str | None, at_us: int) -> None:
        req.done = True
        w = req.worker
        self._busy[w] = False
        self.inflight -= 1
        self.recorded += 1
        t_resp = at_us - req.issue_us
        rel = req.issue_us - self.start_us
        self.collector.add(rel // 1_000_000, status, cause, t_resp)
        if self.samples is not None:
            self.samples.append(RequestSample(rel / 1000.0, status, t_resp / 1000.0, req.attempts, cause))
        nxt = at_us + self._delay_us(w)
        if nxt < self.stop_us:
            self.engine.schedule(nxt, "request-arrival", self._issue, w)
