"""Planning, fair scheduling, execution and persistence of experiments.

Layout of an output directory::

    plan.json               master seed and the fully-resolved scenarios
    experiments.jsonl       one line per status transition of any record
    experiments/<id>/       meta.json + frames.csv of a finished experiment
    quarantine/             experiment directories that failed validation

The last line of ``experiments.jsonl`` for an id is that record's state.
``running`` is only held in memory while an attempt executes, so a crashed
process leaves its record planned or unfinished and therefore re-runnable.
Index lines that still say ``running`` (hand edits, older tools) are
recovered as unfinished.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import io
import json
import logging
import os
import random
import shutil
import tempfile
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .engine import SimulationFault, derive_seed
from .scenario import ScenarioSpec, build, to_plain
from .world import FRAME_COLUMNS, SimulationResult, check_conservation, frame_is_contiguous, simulate

log = logging.getLogger(__name__)

PLANNED = "planned"
RUNNING = "running"
UNFINISHED = "unfinished"
FINISHED = "finished"
STATUSES = (PLANNED, RUNNING, UNFINISHED, FINISHED)


class PlanError(ValueError):
    pass


class NoneRemaining(LookupError):
    """Every planned experiment is finished."""


class PostconditionError(RuntimeError):
    pass


@dataclass
class ExperimentRecord:
    id: str
    scenario_name: str
    seed: int
    status: str = PLANNED
    config_hash: str = ""
    repetition: int = 0
    started_at: str | None = None
    ended_at: str | None = None
    diagnostic: str | None = None

    def transition(self, status: str, **fields) -> "ExperimentRecord":
        if status not in STATUSES:
            raise ValueError(f"unknown status {status!r}")
        return dataclasses.replace(self, status=status, **fields)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(**{f.name: d.get(f.name) for f in dataclasses.fields(cls) if f.name in d})


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="milliseconds")


def experiment_id(master_seed: int, scenario_name: str, repetition: int) -> str:
    raw = derive_seed(master_seed, f"id:{scenario_name}:{repetition}").to_bytes(8, "big")
    raw += derive_seed(master_seed, f"id2:{scenario_name}:{repetition}").to_bytes(8, "big")
    return str(uuid.UUID(bytes=raw, version=4))


def experiment_seed(master_seed: int, scenario_name: str, repetition: int) -> int:
    return derive_seed(master_seed, f"experiment:{scenario_name}:{repetition}")


def plan(scenarios: list[ScenarioSpec], repetitions: int | None = None, master_seed: int = 0,
         start_repetition: int = 0) -> list[ExperimentRecord]:
    """Planned records for every scenario; ``repetitions`` defaults to each scenario's target."""
    names = [s.name for s in scenarios]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise PlanError(f"duplicate scenario names: {', '.join(dupes)}")
    if repetitions is not None and repetitions < 1:
        raise PlanError("repetitions must be >= 1")
    out = []
    for spec in scenarios:
        reps = repetitions if repetitions is not None else spec.repetitions_target
        h = spec.config_hash()
        for r in range(start_repetition, start_repetition + reps):
            out.append(ExperimentRecord(
                id=experiment_id(master_seed, spec.name, r),
                scenario_name=spec.name,
                seed=experiment_seed(master_seed, spec.name, r),
                config_hash=h,
                repetition=r,
            ))
    return out


def finished_counts(records: Iterable[ExperimentRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in records:
        counts.setdefault(r.scenario_name, 0)
        if r.status == FINISHED:
            counts[r.scenario_name] += 1
    return counts


def next_experiment(records: list[ExperimentRecord], rng: random.Random) -> ExperimentRecord:
    """Pick uniformly among runnable experiments of the least-finished scenarios."""
    counts = finished_counts(records)
    runnable = [r for r in records if r.status in (PLANNED, UNFINISHED)]
    if not runnable:
        raise NoneRemaining("all experiments are finished")
    low = min(counts[r.scenario_name] for r in runnable)
    pool = sorted((r for r in runnable if counts[r.scenario_name] == low), key=lambda r: r.id)
    return pool[rng.randrange(len(pool))]


# ---------------------------------------------------------------- frames I/O

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(round(v, 6))
    return str(v)


def frames_to_csv(frames: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRAME_COLUMNS)
    for f in frames:
        w.writerow([_fmt(f[c]) for c in FRAME_COLUMNS])
    return buf.getvalue()


_INT_COLUMNS = {
    "second", "successes", "fail_503_stale", "fail_503_empty", "fail_503_killed",
    "fail_503_exhausted", "fail_timeout", "ready_pods", "desired_pods", "oom_kills",
}


def read_frames(source) -> list[dict]:
    """Parse a frames.csv given as a path or an open text file."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="") as fh:
            return _parse_frames(fh, str(source))
    return _parse_frames(source, "<frames>")


def _parse_frames(fh, name: str) -> list[dict]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(header) != FRAME_COLUMNS:
        raise ValueError(f"{name}: unexpected header {header}")
    out = []
    for row in reader:
        if len(row) != len(FRAME_COLUMNS):
            raise ValueError(f"{name}: malformed row {row}")
        f = {}
        for c, v in zip(FRAME_COLUMNS, row):
            if c in _INT_COLUMNS:
                f[c] = int(v)
            elif c == "leader_ok":
                f[c] = v == "1"
            else:
                f[c] = float(v)
        out.append(f)
    return out


# ---------------------------------------------------------------- single run

def verify_postconditions(spec: ScenarioSpec, result: SimulationResult) -> None:
    n = int(spec.duration)
    if not frame_is_contiguous(result.frames, n):
        raise PostconditionError(f"frames are not contiguous 0..{n - 1}")
    if not check_conservation(result):
        raise PostconditionError(
            f"conservation violated: issued={result.issued} recorded={result.recorded} "
            f"open={result.unfinished_requests}"
        )


def execute(spec: ScenarioSpec, seed: int) -> SimulationResult:
    """Fresh world for (spec, seed): the simulator's analogue of wiping the cluster."""
    result = simulate(spec, seed)
    verify_postconditions(spec, result)
    return result


def _execute_to_csv(spec_dict: dict, seed: int):
    # process-pool entry point: ship plain data both ways
    spec = build(ScenarioSpec, spec_dict)
    try:
        result = execute(spec, seed)
    except (SimulationFault, PostconditionError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    return frames_to_csv(result.frames), None


class ExperimentStore:
    """File-backed record store (see module docstring for the layout)."""

    def __init__(self, root):
        self.root = Path(root)
        self.index = self.root / "experiments.jsonl"
        self.exp_dir = self.root / "experiments"
        self.quarantine_dir = self.root / "quarantine"
        self.plan_file = self.root / "plan.json"

    # plan ---------------------------------------------------------------
    def exists(self) -> bool:
        return self.plan_file.exists()

    def save_plan(self, master_seed: int, scenarios: list[ScenarioSpec], records: list[ExperimentRecord]) -> bool:
        """Persist a new plan; returns False if an identical one was already there."""
        doc = {"master_seed": master_seed, "scenarios": [to_plain(s) for s in scenarios]}
        if self.exists():
            old = json.loads(self.plan_file.read_text())
            if old == json.loads(json.dumps(doc)):
                return False
            raise PlanError(f"{self.root} already holds a different plan")
        self.root.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.plan_file, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        for r in records:
            self.append(r)
        return True

    def load_plan(self) -> tuple[int, dict[str, ScenarioSpec]]:
        if not self.exists():
            raise PlanError(f"no plan in {self.root}")
        doc = json.loads(self.plan_file.read_text())
        specs = {d["name"]: build(ScenarioSpec, d, d["name"]) for d in doc["scenarios"]}
        return doc["master_seed"], specs

    # records ------------------------------------------------------------
    def append(self, record: ExperimentRecord) -> None:
        with open(self.index, "a") as fh:
            fh.write(record.to_json() + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def records_raw(self) -> list[ExperimentRecord]:
        """Every transition in the index, oldest first."""
        out = []
        if not self.index.exists():
            return out
        with open(self.index) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(ExperimentRecord.from_dict(json.loads(line)))
                except (json.JSONDecodeError, TypeError):
                    log.warning("skipping unreadable index line: %r", line[:80])
        return out

    def records(self) -> list[ExperimentRecord]:
        """Current state of each record, in planning order."""
        latest: dict[str, ExperimentRecord] = {}
        for rec in self.records_raw():
            latest[rec.id] = rec
        return list(latest.values())

    def frames_path(self, exp_id: str) -> Path:
        return self.exp_dir / exp_id / "frames.csv"

    def load_frames(self, exp_id: str) -> list[dict]:
        return read_frames(self.frames_path(exp_id))

    # persistence --------------------------------------------------------
    def persist(self, record: ExperimentRecord, frames_csv: str) -> None:
        """Write meta.json + frames.csv into a temp dir, then rename it into place."""
        self.exp_dir.mkdir(parents=True, exist_ok=True)
        final = self.exp_dir / record.id
        if final.exists():
            self.quarantine(record.id, "leftover directory before persist")
        tmp = Path(tempfile.mkdtemp(prefix=f".tmp-{record.id}-", dir=self.exp_dir))
        try:
            (tmp / "frames.csv").write_text(frames_csv)
            (tmp / "meta.json").write_text(json.dumps(dataclasses.asdict(record), indent=2, sort_keys=True) + "\n")
            os.replace(tmp, final)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise

    def quarantine(self, exp_id: str, reason: str) -> Path:
        self.quarantine_dir.mkdir(parents=True, exist_ok=True)
        src = self.exp_dir / exp_id
        k = 0
        while (dest := self.quarantine_dir / f"{exp_id}.{k}").exists():
            k += 1
        shutil.move(str(src), str(dest))
        (dest / "QUARANTINE_REASON").write_text(reason + "\n")
        log.warning("quarantined %s: %s", exp_id, reason)
        return dest

    def validate_dir(self, record: ExperimentRecord, spec: ScenarioSpec) -> str | None:
        """Reason the directory of ``record`` is unusable, or None when it is sound."""
        d = self.exp_dir / record.id
        try:
            meta = json.loads((d / "meta.json").read_text())
            if meta.get("id") != record.id or meta.get("config_hash") != spec.config_hash():
                return "meta.json does not match the record"
            frames = read_frames(d / "frames.csv")
        except (OSError, ValueError) as exc:
            return f"unreadable: {exc}"
        if not frame_is_contiguous(frames, int(spec.duration)):
            return "frames not contiguous"
        return None

    def recover(self, specs: dict[str, ScenarioSpec]) -> list[str]:
        """Reconcile the index with the directories; returns a report line per repair."""
        report = []
        for rec in self.records():
            d = self.exp_dir / rec.id
            if rec.status == FINISHED:
                reason = self.validate_dir(rec, specs[rec.scenario_name]) if d.exists() else "directory missing"
                if reason is not None:
                    if d.exists():
                        self.quarantine(rec.id, reason)
                    self.append(rec.transition(UNFINISHED, diagnostic=f"corrupt result: {reason}"))
                    report.append(f"{rec.id}: {reason}; marked unfinished")
            else:
                if d.exists():
                    self.quarantine(rec.id, f"directory present for a {rec.status} record")
                    report.append(f"{rec.id}: stray directory quarantined")
                if rec.status == RUNNING:
                    self.append(rec.transition(UNFINISHED, diagnostic="interrupted while running"))
                    report.append(f"{rec.id}: interrupted run marked unfinished")
        for stray in self.exp_dir.glob(".tmp-*") if self.exp_dir.exists() else []:
            shutil.rmtree(stray, ignore_errors=True)
        return report


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class Runner:
    """Drives ``next_experiment`` -> run -> persist over an :class:`ExperimentStore`."""

    def __init__(self, store: ExperimentStore, parallel: int = 1,
                 postcheck: Callable[[ScenarioSpec, list[dict]], None] | None = None):
        self.store = store
        self.parallel = max(1, int(parallel))
        self.master_seed, self.specs = store.load_plan()
        self.postcheck = postcheck
        self.report = store.recover(self.specs)

    def preflight(self, rec: ExperimentRecord) -> None:
        """Check the output side is usable and holds no trace of an earlier attempt."""
        if not os.access(self.store.root, os.W_OK):
            raise PlanError(f"{self.store.root} is not writable")
        if (self.store.exp_dir / rec.id).exists():
            self.store.quarantine(rec.id, "leftover directory found at preflight")

    def _rng(self, step: int) -> random.Random:
        return random.Random(derive_seed(self.master_seed, f"select:{step}"))

    def _finish(self, rec: ExperimentRecord, frames_csv: str | None, error: str | None) -> ExperimentRecord:
        spec = self.specs[rec.scenario_name]
        if error is None and self.postcheck is not None:
            try:
                self.postcheck(spec, read_frames(io.StringIO(frames_csv)))
            except PostconditionError as exc:
                error = f"PostconditionError: {exc}"
        if error is not None:
            done = rec.transition(UNFINISHED, ended_at=_now(), diagnostic=error)
            self.store.append(done)
            log.warning("experiment %s unfinished: %s", rec.id, error)
            return done
        done = rec.transition(FINISHED, ended_at=_now(), diagnostic=None)
        self.store.persist(done, frames_csv)
        self.store.append(done)
        return done

    def run(self, count: int | None = None) -> list[ExperimentRecord]:
        """Run until ``count`` experiments ended (finished or not) or none remain.

        Each record is attempted at most once per call, so an experiment that
        keeps failing is left unfinished for a later invocation instead of
        being retried forever.
        """
        ended: list[ExperimentRecord] = []
        attempted: set[str] = set()
        records = {r.id: r for r in self.store.records()}
        # selection stream position: one draw per attempt that ever ended
        step = sum(1 for r in self.store.records_raw() if r.status in (FINISHED, UNFINISHED))

        def pick():
            nonlocal step
            candidates = [r for r in records.values() if r.id not in attempted or r.status == FINISHED]
            rec = next_experiment(candidates, self._rng(step))
            attempted.add(rec.id)
            step += 1
            spec = self.specs[rec.scenario_name]
            if rec.config_hash != spec.config_hash():
                raise PlanError(f"{rec.id}: config hash differs from the stored plan")
            self.preflight(rec)
            # the running state stays in memory: an attempt appends exactly one
            # transition to the index when it ends
            started = rec.transition(RUNNING, started_at=_now(), ended_at=None, diagnostic=None)
            records[rec.id] = started
            return started

        def budget_left():
            return count is None or len(ended) < count

        if self.parallel == 1:
            while budget_left():
                try:
                    rec = pick()
                except NoneRemaining:
                    break
                spec = self.specs[rec.scenario_name]
                frames_csv, error = _execute_to_csv(to_plain(spec), rec.seed)
                done = self._finish(rec, frames_csv, error)
                records[rec.id] = done
                ended.append(done)
            return ended

        with ProcessPoolExecutor(max_workers=self.parallel) as pool:
            inflight = {}
            while True:
                while len(inflight) < self.parallel and (count is None or len(ended) + len(inflight) < count):
                    try:
                        rec = pick()
                    except NoneRemaining:
                        break
                    fut = pool.submit(_execute_to_csv, to_plain(self.specs[rec.scenario_name]), rec.seed)
                    inflight[fut] = rec
                if not inflight:
                    break
                fut = next(iter(_wait_first(inflight)))
                rec = inflight.pop(fut)
                try:
                    frames_csv, error = fut.result()
                except Exception as exc:  # worker crashed
                    frames_csv, error = None, f"{type(exc).__name__}: {exc}"
                done = self._finish(rec, frames_csv, error)
                records[rec.id] = done
                ended.append(done)
        return ended


def _wait_first(futures):
    from concurrent.futures import FIRST_COMPLETED, wait

    done, _ = wait(list(futures), return_when=FIRST_COMPLETED)
    return sorted(done, key=lambda f: futures[f].id)


def load_experiments(store: ExperimentStore):
    """Finished experiments of ``store`` with their specs and frames."""
    from .analysis import Experiment

    _, specs = store.load_plan()
    out = []
    for rec in store.records():
        if rec.status != FINISHED:
            continue
        out.append(Experiment(rec.id, rec.scenario_name, specs[rec.scenario_name], store.load_frames(rec.id)))
    return out
