"""Statistics over persisted frames: Kruskal-Wallis H-test, variability, comparisons."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.special import gammaincc
from scipy.stats import rankdata

from .scenario import ScenarioSpec


@dataclass(frozen=True)
class HTestResult:
    H: float
    dof: int
    p: float
    tie_corrected: bool
    group_sizes: tuple


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail of the chi-square distribution, Q(dof/2, x/2)."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    if x <= 0:
        return 1.0
    return float(gammaincc(dof / 2.0, x / 2.0))


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> HTestResult:
    """Kruskal-Wallis H over ``groups`` with midranks and the tie correction."""
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    arrays = [np.asarray(g, dtype=float).ravel() for g in groups]
    sizes = tuple(len(a) for a in arrays)
    if min(sizes) == 0:
        raise ValueError("every group needs at least one sample")
    pooled = np.concatenate(arrays)
    n = len(pooled)
    if n < 3:
        raise ValueError("need at least three samples in total")
    if np.any(~np.isfinite(pooled)):
        raise ValueError("samples must be finite")
    dof = len(arrays) - 1
    _, tie_counts = np.unique(pooled, return_counts=True)
    ties = float(np.sum(tie_counts.astype(float) ** 3 - tie_counts))
    correction = 1.0 - ties / (n ** 3 - n)
    if correction <= 0:
        # every sample identical
        return HTestResult(0.0, dof, 1.0, True, sizes)
    ranks = rankdata(pooled)  # midranks
    bounds = np.cumsum((0,) + sizes)
    s = sum(ranks[bounds[i]:bounds[i + 1]].sum() ** 2 / sizes[i] for i in range(len(sizes)))
    h = 12.0 / (n * (n + 1)) * s - 3.0 * (n + 1)
    h = max(h / correction, 0.0)
    return HTestResult(float(h), dof, chi2_sf(h, dof), bool(ties > 0), sizes)


# ---------------------------------------------------------------- experiments

class Experiment(NamedTuple):
    id: str
    scenario_name: str
    spec: ScenarioSpec
    frames: list


def metric_values(exp: Experiment, metric: str) -> np.ndarray:
    if not exp.frames:
        return np.zeros(0)
    if metric not in exp.frames[0]:
        raise KeyError(f"unknown metric {metric!r}")
    return np.array([float(f[metric]) for f in exp.frames])


FILTER_KEYS = {
    "scenario": lambda s: s.name,
    "dataplane": lambda s: s.data_plane.kind,
    "etcd": lambda s: s.etcd_profile.name,
    "pods": lambda s: str(s.initial_pods),
    "workers": lambda s: str(s.workers),
    "hpa": lambda s: "true" if s.hpa_enabled else "false",
    "retries": lambda s: str(s.data_plane.max_retries),
}


def parse_filter(text: str) -> dict[str, str]:
    """``"dataplane=native,pods=10"`` -> ``{"dataplane": "native", "pods": "10"}``."""
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        key, sep, value = part.partition("=")
        if not sep or not value:
            raise ValueError(f"filter term {part!r} must look like key=value")
        if key not in FILTER_KEYS:
            raise ValueError(f"unknown filter key {key!r}; choose from {sorted(FILTER_KEYS)}")
        out[key] = value
    if not out:
        raise ValueError("empty filter")
    return out


def matches(spec: ScenarioSpec, flt: dict[str, str]) -> bool:
    return all(FILTER_KEYS[k](spec) == v for k, v in flt.items())


def select(experiments: Iterable[Experiment], flt: dict[str, str]) -> list[Experiment]:
    return [e for e in experiments if matches(e.spec, flt)]


@dataclass
class Comparison:
    label_a: str
    label_b: str
    metric: str
    test: HTestResult
    mean_a: float  # pooled over all seconds of all experiments
    mean_b: float
    mean_of_means_a: float  # per-experiment means first
    mean_of_means_b: float
    n_experiments_a: int
    n_experiments_b: int

    @property
    def higher(self) -> str:
        if self.mean_a > self.mean_b:
            return "a"
        if self.mean_b > self.mean_a:
            return "b"
        return "equal"


def compare(experiments: list[Experiment], filter_a: dict, filter_b: dict, metric: str = "successes",
            label_a: str | None = None, label_b: str | None = None) -> Comparison:
    """H-test of the pooled per-second ``metric`` of two disjoint experiment groups."""
    a = select(experiments, filter_a)
    b = select(experiments, filter_b)
    if not a or not b:
        raise ValueError(f"no experiments match {filter_a if not a else filter_b}")
    overlap = {e.id for e in a} & {e.id for e in b}
    if overlap:
        raise ValueError(f"filters overlap on {len(overlap)} experiment(s)")
    va = [metric_values(e, metric) for e in a]
    vb = [metric_values(e, metric) for e in b]
    pa, pb = np.concatenate(va), np.concatenate(vb)
    return Comparison(
        label_a=label_a or _label(filter_a),
        label_b=label_b or _label(filter_b),
        metric=metric,
        test=kruskal_wallis([pa, pb]),
        mean_a=float(pa.mean()),
        mean_b=float(pb.mean()),
        mean_of_means_a=float(np.mean([v.mean() for v in va])),
        mean_of_means_b=float(np.mean([v.mean() for v in vb])),
        n_experiments_a=len(a),
        n_experiments_b=len(b),
    )


def _label(flt: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in flt.items())


@dataclass
class ScenarioAggregate:
    scenario_name: str
    n_experiments: int
    mean_success_rate: float  # pooled over every second of every experiment
    std_success_rate: float  # mean of the per-experiment standard deviations
    per_experiment_means: list = field(default_factory=list)
    per_experiment_stds: list = field(default_factory=list)

    @property
    def mean_of_experiment_means(self) -> float:
        return float(np.mean(self.per_experiment_means))


def success_std(successes: Sequence[float]) -> float:
    """Population standard deviation of a per-second success trace."""
    return float(np.std(np.asarray(successes, dtype=float)))


def scenario_variability(experiments: Iterable[Experiment]) -> list[ScenarioAggregate]:
    by_name: dict[str, list[Experiment]] = {}
    for e in experiments:
        by_name.setdefault(e.scenario_name, []).append(e)
    out = []
    for name in sorted(by_name):
        traces = [metric_values(e, "successes") for e in by_name[name]]
        out.append(ScenarioAggregate(
            scenario_name=name,
            n_experiments=len(traces),
            mean_success_rate=float(np.concatenate(traces).mean()),
            std_success_rate=float(np.mean([success_std(t) for t in traces])),
            per_experiment_means=[float(t.mean()) for t in traces],
            per_experiment_stds=[success_std(t) for t in traces],
        ))
    return out


# ---------------------------------------------------------------- CSV output

def write_analysis_csv(path, comparisons: list[Comparison]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_a", "group_b", "metric", "H", "dof", "p", "mean_a", "mean_b",
                    "mean_of_means_a", "mean_of_means_b", "n_experiments_a", "n_experiments_b", "higher"])
        for c in comparisons:
            w.writerow([c.label_a, c.label_b, c.metric, repr(c.test.H), c.test.dof, repr(c.test.p),
                        repr(c.mean_a), repr(c.mean_b), repr(c.mean_of_means_a), repr(c.mean_of_means_b),
                        c.n_experiments_a, c.n_experiments_b, c.higher])


def write_aggregates_csv(path, aggregates: list[ScenarioAggregate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_name", "n_experiments", "mean_success_rate", "mean_of_experiment_means",
                    "std_success_rate", "per_experiment_means", "per_experiment_stds"])
        for a in aggregates:
            w.writerow([a.scenario_name, a.n_experiments, repr(a.mean_success_rate),
                        repr(a.mean_of_experiment_means), repr(a.std_success_rate),
                        " ".join(repr(round(m, 6)) for m in a.per_experiment_means),
                        " ".join(repr(round(s, 6)) for s in a.per_experiment_stds)])


def write_densities_csv(path, experiments: Iterable[Experiment]) -> int:
    """Long-format (scenario, second, successes) rows for density plots; returns the row count."""
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "second", "successes"])
        for e in sorted(experiments, key=lambda e: (e.scenario_name, e.id)):
            for f in e.frames:
                w.writerow([e.scenario_name, f["second"], f["successes"]])
                rows += 1
    return rows
