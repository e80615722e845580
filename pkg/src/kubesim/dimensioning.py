"""First-order queueing arithmetic for sizing pods and load workers.

The pods form a closed resource-sharing system (c = J servers, T = L
customers). Only rates and utilisation are computed here; utilisation of a
closed loop is meaningful as a steady-state figure only below 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

INF = math.inf


@dataclass(frozen=True)
class NoiseModel:
    """Distribution of the additive response-time noise, in ms.

    ``family`` is one of ``none`` (degenerate at 0), ``exponential`` (mean
    ``mean``) or ``uniform`` (on ``[0, 2*mean]``).
    """

    family: str = "none"
    mean: float = 0.0

    def __post_init__(self):
        if self.family not in ("none", "exponential", "uniform"):
            raise ValueError(f"unknown noise family {self.family!r}")
        if self.mean < 0:
            raise ValueError("noise mean must be >= 0")

    @property
    def expected(self) -> float:
        return 0.0 if self.family == "none" else self.mean

    def draw(self, rng) -> float:
        if self.family == "none" or self.mean == 0:
            return 0.0
        if self.family == "exponential":
            return rng.expovariate(1.0 / self.mean)
        return rng.uniform(0.0, 2.0 * self.mean)


@dataclass(frozen=True)
class TimingModel:
    t_exec: float = 55.0
    t_rtt: float = 8.0
    t_delay: float = 20.0
    t_timeout: float = INF
    noise: NoiseModel = field(default_factory=NoiseModel)
    deterministic_delay: bool = False

    def __post_init__(self):
        if self.t_exec < 0 or self.t_rtt < 0:
            raise ValueError("t_exec and t_rtt must be >= 0")
        if self.t_delay < 0:
            raise ValueError("t_delay must be >= 0")
        if self.t_timeout <= 0:
            raise ValueError("t_timeout must be > 0 (use inf for none)")

    @property
    def t_resp(self) -> float:
        """Unloaded response time: execution + round trip + expected noise."""
        return self.t_exec + self.t_rtt + self.noise.expected


@dataclass(frozen=True)
class QueueingEstimates:
    lam: float
    mu_j: float
    mu: float
    rho: float
    valid: bool
    saturation_workers: int | None = None
    model_note: str = ""

    def summary(self) -> str:
        tail = "" if self.valid else "  (rho >= 1: not valid as a steady-state figure, system is overloaded)"
        line = f"lambda={self.lam:.3f}/s mu_j={self.mu_j:.3f}/s mu={self.mu:.3f}/s rho={self.rho:.4f}{tail}"
        if self.saturation_workers is not None:
            line += f"\nL*={self.saturation_workers}"
        return line


def worker_rate(t_resp: float, t_timeout: float, t_delay: float) -> float:
    """Requests per second one closed-loop worker issues."""
    cycle = min(t_resp, t_timeout) + t_delay
    if cycle <= 0:
        raise ValueError("worker cycle time must be > 0")
    return 1000.0 / cycle


def population_rate(L: int, t_resp: float, t_timeout: float, t_delay: float) -> float:
    """Total offered rate of ``L`` identical workers, requests/s."""
    if L < 0:
        raise ValueError("L must be >= 0")
    if L == 0:
        return 0.0
    return L * worker_rate(t_resp, t_timeout, t_delay)


def service_rate(J: int, timing: TimingModel) -> tuple[float, float]:
    """``(mu_j, mu)`` in responses/s."""
    denom = timing.t_exec + timing.t_rtt + timing.noise.expected
    if denom <= 0:
        raise ValueError("t_exec + t_rtt + E[Z] must be > 0")
    if J < 0:
        raise ValueError("J must be >= 0")
    mu_j = 1000.0 / denom
    return mu_j, J * mu_j


def utilization(lam: float, mu: float) -> tuple[float, bool]:
    """``(rho, valid)`` where ``valid`` is False once rho reaches 1."""
    if mu <= 0:
        raise ValueError("mu must be > 0")
    rho = lam / mu
    return rho, rho < 1.0


def saturation_workers(J: int, timing: TimingModel) -> int:
    """Smallest worker count whose offered rate reaches total capacity."""
    mu_j, mu = service_rate(J, timing)
    r = worker_rate(timing.t_resp, timing.t_timeout, timing.t_delay)
    if r <= 0:
        raise ValueError("per-worker rate is zero")
    # guard the ceiling against float noise such as 1.0000000000000002
    return math.ceil(round(mu / r, 9))


def estimate(J: int, L: int, timing: TimingModel) -> QueueingEstimates:
    if J <= 0:
        raise ValueError("J must be > 0")
    mu_j, mu = service_rate(J, timing)
    lam = population_rate(L, timing.t_resp, timing.t_timeout, timing.t_delay)
    rho, valid = utilization(lam, mu)
    return QueueingEstimates(
        lam=lam,
        mu_j=mu_j,
        mu=mu,
        rho=rho,
        valid=valid,
        saturation_workers=saturation_workers(J, timing),
        model_note=f"closed <T/M/M/c>-RS, c=J={J}, T=L={L}",
    )
