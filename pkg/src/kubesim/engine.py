"""Deterministic discrete-event core.

Virtual time is kept in integer microseconds so event ordering never depends
on float rounding. Public helpers convert to and from milliseconds.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from typing import Callable, Iterable, NamedTuple, TextIO

US_PER_MS = 1000


def us(ms: float) -> int:
    """Milliseconds to integer microseconds (round half to even)."""
    return int(round(ms * US_PER_MS))


def ms(t_us: int) -> float:
    return t_us / US_PER_MS


class SimulationFault(RuntimeError):
    """A handler failed; the run cannot be trusted."""

    def __init__(self, message: str, time_us: int, kind: str):
        super().__init__(f"{message} (at t={time_us}us, event kind={kind})")
        self.time_us = time_us
        self.kind = kind


class Event(NamedTuple):
    fire_time_us: int
    seq: int
    kind: str


def derive_seed(master_seed: int, label: str) -> int:
    """64-bit seed for the stream named ``label`` of ``master_seed``."""
    digest = hashlib.blake2b(
        f"{master_seed & 0xFFFFFFFFFFFFFFFF}:{label}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


class SeededRng(random.Random):
    """Mersenne Twister stream keyed by ``(seed, label)``.

    ``random.Random`` seeded from an int produces the same sequence of
    ``random()`` values on every platform, and the variate helpers used here
    (``expovariate``, ``lognormvariate``, ``uniform``) are pure functions of
    that sequence.
    """

    def __new__(cls, seed: int, label: str = ""):
        # random.Random.__new__ only accepts a single seed argument
        return super().__new__(cls)

    def __init__(self, seed: int, label: str = ""):
        self.master_seed = seed
        self.label = label
        super().__init__(derive_seed(seed, label))


class Engine:
    """Single-threaded event loop with a (fire_time, seq) total order."""

    def __init__(self, seed: int = 0, trace: bool = False):
        self.seed = seed
        self._now = 0
        self._seq = 0
        self._heap: list = []
        self._labels: set[str] = set()
        self.trace: list[Event] | None = [] if trace else None

    @property
    def now_us(self) -> int:
        return self._now

    @property
    def now(self) -> float:
        """Current virtual time in milliseconds."""
        return self._now / US_PER_MS

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, at_us: int, kind: str, callback: Callable, *args) -> int:
        """Fire ``callback(*args)`` at virtual time ``at_us``; returns the seq handle."""
        if at_us < self._now:
            raise ValueError(
                f"cannot schedule {kind!r} at {at_us}us, clock is already at {self._now}us"
            )
        seq = self._seq
        self._seq = seq + 1
        heapq.heappush(self._heap, (at_us, seq, kind, callback, args))
        return seq

    def schedule_in(self, delay_us: int, kind: str, callback: Callable, *args) -> int:
        return self.schedule(self._now + delay_us, kind, callback, *args)

    def run_until(self, t_end_us: int) -> int:
        """Fire every event with fire_time <= t_end_us; leaves the clock at t_end_us."""
        if t_end_us < self._now:
            raise ValueError(f"t_end {t_end_us}us is before now {self._now}us")
        heap = self._heap
        pop = heapq.heappop
        trace = self.trace
        fired = 0
        while heap and heap[0][0] <= t_end_us:
            t, seq, kind, callback, args = pop(heap)
            self._now = t
            if trace is not None:
                trace.append(Event(t, seq, kind))
            try:
                callback(*args)
            except SimulationFault:
                raise
            except Exception as exc:
                raise SimulationFault(f"{type(exc).__name__}: {exc}", t, kind) from exc
            fired += 1
        self._now = t_end_us
        return fired

    def split_rng(self, label: str) -> SeededRng:
        if label in self._labels:
            raise ValueError(f"rng stream {label!r} already split from this engine")
        self._labels.add(label)
        return SeededRng(self.seed, label)


def dump_trace(events: Iterable[Event], fh: TextIO) -> None:
    """Write ``fire_time_us,seq,kind`` lines."""
    for ev in events:
        fh.write(f"{ev.fire_time_us},{ev.seq},{ev.kind}\n")


def load_trace(fh: TextIO) -> list[Event]:
    out = []
    for line in fh:
        line = line.strip()
        if not line:
            continue
        t, seq, kind = line.split(",", 2)
        out.append(Event(int(t), int(seq), kind))
    return out
