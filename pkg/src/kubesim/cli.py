"""``kubesim`` command line: plan, run, analyze, dimension.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .analysis import (
    compare,
    parse_filter,
    scenario_variability,
    write_aggregates_csv,
    write_analysis_csv,
    write_densities_csv,
)
from .dimensioning import TimingModel, estimate, service_rate, worker_rate
from .runner import ExperimentStore, PlanError, Runner, load_experiments, plan
from .scenario import ScenarioError, load_scenario_file

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _scenario_table(scenarios) -> str:
    head = f"{'scenario':<20} {'J':>3} {'L':>4} {'plane':<6} {'etcd':<13} {'lambda/s':>9} {'mu/s':>8} {'rho':>7} {'L*':>4}  hash"
    lines = [head]
    for s in scenarios:
        q = estimate(s.initial_pods, s.workers, s.timing)
        flag = "" if q.valid else " !"
        lines.append(
            f"{s.name:<20} {s.initial_pods:>3} {s.workers:>4} {s.data_plane.kind:<6} {s.etcd_profile.name:<13} "
            f"{q.lam:>9.1f} {q.mu:>8.1f} {q.rho:>7.3f}{flag:<2}{q.saturation_workers:>3}  {s.config_hash()}"
        )
    if any(not estimate(s.initial_pods, s.workers, s.timing).valid for s in scenarios):
        lines.append("! rho >= 1: overloaded, the steady-state figures are not valid")
    return "\n".join(lines)


def cmd_plan(args) -> int:
    doc = load_scenario_file(args.file)
    records = plan(doc.scenarios, args.reps, doc.master_seed)
    store = ExperimentStore(args.out)
    created = store.save_plan(doc.master_seed, doc.scenarios, records)
    print(_scenario_table(doc.scenarios))
    verb = "planned" if created else "already planned"
    print(f"{len(records)} experiments {verb} in {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    store = ExperimentStore(args.out)
    runner = Runner(store, parallel=args.parallel)
    for line in runner.report:
        print(f"recovered: {line}")
    count = None if args.until_done else args.count
    ended = runner.run(count=count)
    failed = 0
    for rec in ended:
        print(f"{rec.status:<10} {rec.scenario_name:<20} {rec.id}" + (f"  {rec.diagnostic}" if rec.diagnostic else ""))
        failed += rec.status != "finished"
    if not ended:
        print("nothing left to run")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_analyze(args) -> int:
    store = ExperimentStore(args.out)
    experiments = load_experiments(store)
    if not experiments:
        print("no finished experiments", file=sys.stderr)
        return EXIT_RUNTIME
    report_dir = Path(args.report_dir or args.out)
    report_dir.mkdir(parents=True, exist_ok=True)
    did = False
    if args.compare:
        try:
            fa, fb = parse_filter(args.compare[0]), parse_filter(args.compare[1])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        try:
            c = compare(experiments, fa, fb, args.metric, args.compare[0], args.compare[1])
        except KeyError as exc:
            raise UsageError(str(exc)) from None
        except ValueError as exc:
            print(f"compare: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        write_analysis_csv(report_dir / "analysis.csv", [c])
        print(f"{c.label_a} vs {c.label_b} on {c.metric}: H={c.test.H:.4f} dof={c.test.dof} p={c.test.p:.4g} "
              f"mean_a={c.mean_a:.3f} mean_b={c.mean_b:.3f} higher={c.higher}")
        did = True
    if args.variability:
        aggs = scenario_variability(experiments)
        write_aggregates_csv(report_dir / "aggregates.csv", aggs)
        for a in aggs:
            print(f"{a.scenario_name:<20} n={a.n_experiments} mean={a.mean_success_rate:.2f}/s "
                  f"std={a.std_success_rate:.2f}/s")
        did = True
    if args.densities:
        n = write_densities_csv(report_dir / "densities.csv", experiments)
        print(f"densities.csv: {n} rows")
        did = True
    if not did:
        raise UsageError("choose at least one of --compare, --variability, --densities")
    return EXIT_OK


def _positive(name, v, allow_zero=False):
    if v is None:
        return
    if not math.isfinite(v) and not math.isinf(v):
        raise UsageError(f"{name} must be a number")
    if v < 0 or (v == 0 and not allow_zero):
        raise UsageError(f"{name} must be {'>= 0' if allow_zero else '> 0'}")


def cmd_dimension(args) -> int:
    if args.pods < 1:
        raise UsageError("--pods must be >= 1")
    _positive("--texec", args.texec)
    _positive("--trtt", args.trtt, allow_zero=True)
    _positive("--tdelay", args.tdelay, allow_zero=True)
    _positive("--timeout", args.timeout)
    timeout = math.inf if args.timeout is None else args.timeout
    timing = TimingModel(t_exec=args.texec, t_rtt=args.trtt, t_delay=args.tdelay, t_timeout=timeout)
    r = worker_rate(timing.t_resp, timing.t_timeout, timing.t_delay)
    mu_j, mu = service_rate(args.pods, timing)
    print(f"per-worker rate={r:.2f}/s (t_resp={timing.t_resp:g}ms, t_delay={timing.t_delay:g}ms)")
    print(f"per-pod rate mu_j={mu_j:.3f}/s, total mu={mu:.3f}/s for J={args.pods}")
    if args.workers is not None:
        if args.workers < 0:
            raise UsageError("--workers must be >= 0")
        print(estimate(args.pods, args.workers, timing).summary())
    else:
        print(f"L*={estimate(args.pods, 1, timing).saturation_workers}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kubesim", description="Simulated cluster performance experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan", help="resolve a scenario file and plan experiments")
    sp.add_argument("file")
    sp.add_argument("--reps", type=int, default=None, help="repetitions per scenario (default: repetitions_target)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("run", help="run planned experiments, least-finished scenario first")
    sp.add_argument("--out", required=True)
    sp.add_argument("--parallel", type=int, default=1)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--until-done", action="store_true")
    g.add_argument("--count", type=int)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("analyze", help="statistics over finished experiments")
    sp.add_argument("--out", required=True)
    sp.add_argument("--compare", nargs=2, metavar=("A", "B"), help="filters like dataplane=native")
    sp.add_argument("--metric", default="successes")
    sp.add_argument("--variability", action="store_true")
    sp.add_argument("--densities", action="store_true")
    sp.add_argument("--report-dir", default=None, help="where to write CSVs (default: --out)")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("dimension", help="closed-loop rate and utilization estimates")
    sp.add_argument("--pods", type=int, required=True)
    sp.add_argument("--texec", type=float, required=True)
    sp.add_argument("--trtt", type=float, required=True)
    sp.add_argument("--tdelay", type=float, required=True)
    sp.add_argument("--timeout", type=float, default=None)
    sp.add_argument("--workers", type=int, default=None)
    sp.set_defaults(func=cmd_dimension)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if getattr(args, "count", None) is not None and args.count < 1:
            raise UsageError("--count must be >= 1")
        if getattr(args, "parallel", 1) < 1:
            raise UsageError("--parallel must be >= 1")
        return args.func(args)
    except (UsageError, ScenarioError, PlanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
