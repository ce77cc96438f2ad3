"""Command-line front end: model checking, random schedules and threaded stress runs.

Report schema (one JSON object, keys sorted):

``mode, lock, local, remote, budget, backend, seed``
    the run settings
``verdicts``
    property name -> holds | violated | inconclusive-cap-hit
``states``
    states explored (checker modes)
``acquisitions``
    process -> critical sections entered (run, stress)
``total_cs_entries``
    sum of ``acquisitions``
``max_monopoly``, ``max_monopoly_requesting``
    longest run of same-class critical sections while the other class is
    announced at the global lock / anywhere past ``enter`` (run mode)
``metrics``
    process -> operation counters; ``ticks`` adds the remote tick cost
``violations``
    occupancy or mutual-exclusion violations observed
``counter``, ``throughput``, ``elapsed``
    stress mode only; stepwise reports carry no timing so that they are
    byte-identical across reruns
``trace``
    path of the trace file written for a violation, else null

The checker modes explore the lock with an indivisible enqueue step; run
and stress modes execute the library, which enqueues with a loop of remote
CAS attempts.

With ``--out PATH`` the report goes to PATH and a one-line CSV summary to
``PATH.csv``; otherwise the report is printed.

Exit status: 0 when every checked property holds and no assertion fired,
2 on a violation (a trace file is written), 3 when the state cap was hit
before a verdict, 1 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import checker
from .alock import ALock
from .asym_memory import Backend, ConcurrentMemory, ProcId
from .baselines import FlagLock, Peterson2
from .checker import CheckConfig

MODES = ("check-safety", "check-liveness", "run", "stress")
LOCKS = {"alock": "alock", "naive-rcas": "naive_rcas", "mixed-cas": "mixed_cas", "peterson2": "peterson2"}

EXIT_OK, EXIT_USAGE, EXIT_VIOLATED, EXIT_INCONCLUSIVE = 0, 1, 2, 3


class UsageError(ValueError):
    pass


@dataclass
class RunSpec:
    mode: str
    lock_kind: str = "alock"
    n_local: int = 1
    n_remote: int = 1
    budget: int = 1
    backend: Backend = Backend.SEQ_CST
    seed: int = 0
    steps: int = 100_000
    acquisitions: int = 1_000
    remote_tick_cost: int = 0
    state_cap: int = 5_000_000
    out: Optional[str] = None
    trace_out: Optional[str] = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise UsageError(f"--mode must be one of {', '.join(MODES)}")
        if self.lock_kind not in LOCKS.values():
            raise UsageError(f"--lock must be one of {', '.join(LOCKS)}")
        if self.mode == "stress" and self.backend is not Backend.SEQ_CST:
            raise UsageError("stress mode runs real threads and needs --backend seqcst")
        for name in ("n_local", "n_remote", "seed", "remote_tick_cost"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be non-negative")
        for name in ("budget", "steps", "acquisitions", "state_cap"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        try:
            self.check_config()
        except ValueError as e:
            raise UsageError(str(e)) from None

    def check_config(self) -> CheckConfig:
        # the checkers explore the modeled algorithm; run mode schedules the
        # library's own steps, whose enqueue is a loop of remote CAS attempts
        swap = "cas_loop" if self.mode == "run" else "atomic"
        return CheckConfig(
            self.n_local, self.n_remote, self.budget, self.backend, self.lock_kind, state_cap=self.state_cap, swap=swap
        )

    def default_trace_path(self) -> str:
        lock = next(k for k, v in LOCKS.items() if v == self.lock_kind)
        return f"trace-{self.mode}-{lock}-{self.n_local}l{self.n_remote}r.csv"


@dataclass
class RunReport:
    spec: RunSpec
    verdicts: dict[str, str] = field(default_factory=dict)
    states: Optional[int] = None
    metrics: dict[str, dict] = field(default_factory=dict)
    acquisitions: dict[str, int] = field(default_factory=dict)
    max_monopoly: Optional[int] = None
    max_monopoly_requesting: Optional[int] = None
    violations: int = 0
    counter: Optional[int] = None
    elapsed: Optional[float] = None
    throughput: Optional[float] = None
    trace: Optional[str] = None

    @property
    def total_cs_entries(self) -> int:
        return sum(self.acquisitions.values())

    def to_record(self) -> dict:
        s = self.spec
        rec = {
            "mode": s.mode,
            "lock": next(k for k, v in LOCKS.items() if v == s.lock_kind),
            "local": s.n_local,
            "remote": s.n_remote,
            "budget": s.budget,
            "backend": s.backend.value,
            "seed": s.seed,
            "verdicts": self.verdicts,
            "states": self.states,
            "metrics": self.metrics,
            "acquisitions": self.acquisitions,
            "total_cs_entries": self.total_cs_entries,
            "max_monopoly": self.max_monopoly,
            "max_monopoly_requesting": self.max_monopoly_requesting,
            "violations": self.violations,
            "trace": self.trace,
        }
        if s.mode == "stress":
            rec.update(counter=self.counter, elapsed=round(self.elapsed, 3), throughput=round(self.throughput, 1))
        return rec

    def summary_row(self) -> dict:
        rec = self.to_record()
        verdicts = ";".join(f"{k}={v}" for k, v in sorted(self.verdicts.items()))
        keep = ("mode", "lock", "local", "remote", "budget", "backend", "seed", "states", "total_cs_entries")
        row = {k: rec[k] for k in keep}
        row.update(
            verdicts=verdicts,
            max_monopoly=self.max_monopoly,
            violations=self.violations,
            remote_ops_class0=sum(m["remote_total"] for p, m in self.metrics.items() if p.startswith("p0.")),
            elapsed=None if self.elapsed is None else round(self.elapsed, 3),
        )
        return row

    def exit_code(self) -> int:
        if self.violations or checker.VIOLATED in self.verdicts.values():
            return EXIT_VIOLATED
        if checker.INCONCLUSIVE in self.verdicts.values():
            return EXIT_INCONCLUSIVE
        return EXIT_OK


def _metric_record(m, ticks: Optional[int] = None) -> dict:
    rec = m.as_dict()
    rec["local_total"] = m.local_total
    rec["remote_total"] = m.remote_total
    if ticks is not None:
        rec["ticks"] = ticks
    return rec


def _write_violation(spec: RunSpec, rep: RunReport, cfg: CheckConfig, prop: checker.PropertyReport, chained: bool):
    path = spec.trace_out or spec.default_trace_path()
    checker.write_trace(path, cfg, prop.trace, prop.initial_index, prop.loop_start, chained)
    rep.trace = path


def check_safety(spec: RunSpec) -> RunReport:
    cfg = spec.check_config()
    prop = checker.check_safety(cfg)
    rep = RunReport(spec, {prop.name: prop.verdict}, prop.states)
    rep.metrics = {str(p): _metric_record(m) for p, m in prop.metrics.items()}
    if prop.verdict == checker.VIOLATED:
        _write_violation(spec, rep, cfg, prop, chained=True)
    return rep


def check_liveness(spec: RunSpec) -> RunReport:
    cfg = spec.check_config()
    props = checker.check_liveness(cfg)
    rep = RunReport(spec, {p.name: p.verdict for p in props}, props[0].states)
    rep.metrics = {str(p): _metric_record(m) for p, m in props[0].metrics.items()}
    bad = [p for p in props if p.verdict == checker.VIOLATED]
    if bad:
        _write_violation(spec, rep, cfg, bad[0], chained=False)
    return rep


def run(spec: RunSpec) -> RunReport:
    cfg = spec.check_config()
    res = checker.random_fair_run(cfg, spec.seed, spec.steps, record_trace=True, remote_tick_cost=spec.remote_tick_cost)
    rep = RunReport(spec)
    rep.metrics = {str(p): _metric_record(m, res.ticks[p]) for p, m in res.metrics.items()}
    rep.acquisitions = {str(p): n for p, n in res.acquisitions.items()}
    rep.max_monopoly = res.max_monopoly
    rep.max_monopoly_requesting = res.max_monopoly_requesting
    rep.violations = res.me_violations
    if res.first_violation_step is not None:
        schedule = [i for i, _ in res.trace[: res.first_violation_step + 1]]
        steps = checker.run_schedule(cfg, res.initial_index, schedule)
        path = spec.trace_out or spec.default_trace_path()
        checker.write_trace(path, cfg, steps, res.initial_index)
        rep.trace = path
    return rep


def build_lock(lock_kind: str, mem, budget: int = 1):
    if lock_kind == "alock":
        return ALock(mem, 0, budget)
    if lock_kind == "peterson2":
        return Peterson2(mem, 0)
    return FlagLock(mem, 0, loopback=lock_kind == "naive_rcas")


def stress(spec: RunSpec) -> RunReport:
    """One thread per process, each looping acquire, critical section, release."""
    if spec.backend is not Backend.SEQ_CST:
        raise UsageError("stress mode needs the seqcst backend")
    mem = ConcurrentMemory(1 + spec.n_remote, spec.remote_tick_cost)
    lock = build_lock(spec.lock_kind, mem, spec.budget)
    procs = [ProcId(0, i) for i in range(spec.n_local)] + [ProcId(1 + j, 0) for j in range(spec.n_remote)]
    cell = {"occupant": None, "counter": 0}
    violations = []
    done = {p: 0 for p in procs}
    errors = []

    def worker(p: ProcId) -> None:
        try:
            for _ in range(spec.acquisitions):
                tok = lock.acquire(p)
                if cell["occupant"] is not None:
                    violations.append((p, cell["occupant"]))
                cell["occupant"] = p
                cell["counter"] = cell["counter"] + 1  # deliberately unsynchronized
                if cell["occupant"] != p:
                    violations.append((p, cell["occupant"]))
                cell["occupant"] = None
                lock.release(tok)
                done[p] += 1
        except BaseException as e:  # surfaced after join
            errors.append(e)

    threads = [threading.Thread(target=worker, args=(p,), name=str(p), daemon=True) for p in procs]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    if errors:
        raise errors[0]
    rep = RunReport(spec)
    rep.metrics = {str(p): _metric_record(mem.op_counts(p), mem.ticks(p)) for p in procs}
    rep.acquisitions = {str(p): n for p, n in done.items()}
    rep.violations = len(violations)
    rep.counter = cell["counter"]
    rep.elapsed = elapsed
    rep.throughput = rep.total_cs_entries / elapsed if elapsed > 0 else 0.0
    if rep.counter != rep.total_cs_entries:
        rep.violations += 1
    return rep


RUNNERS = {"check-safety": check_safety, "check-liveness": check_liveness, "run": run, "stress": stress}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="asymlock",
        description="Model-check, simulate or stress the asymmetric lock and its baselines.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    ap.add_argument("--mode", required=True, choices=MODES, help="what to do")
    ap.add_argument("--lock", default="alock", choices=list(LOCKS), help="lock under test")
    ap.add_argument("--local", type=int, default=1, help="processes on the home node")
    ap.add_argument("--remote", type=int, default=1, help="remote processes, one per node")
    ap.add_argument("--budget", type=int, default=1, help="cohort hand-offs before the global lock is offered")
    ap.add_argument("--backend", default="seqcst", choices=[b.value for b in Backend], help="atomicity of remote CAS")
    ap.add_argument("--seed", type=int, default=0, help="scheduler seed for run mode")
    ap.add_argument("--steps", type=int, default=100_000, help="scheduler steps in run mode")
    ap.add_argument("--acquisitions", type=int, default=1_000, help="acquire/release cycles per thread in stress mode")
    ap.add_argument("--remote-tick-cost", type=int, default=0, help="extra ticks charged per remote operation")
    ap.add_argument("--state-cap", type=int, default=5_000_000, help="checker gives up after this many states")
    ap.add_argument("--out", default=None, help="report path (PATH.csv gets a summary row); default stdout")
    ap.add_argument("--trace-out", default=None, help="trace file for a violation; default derived from the run")
    return ap


def spec_from_args(args: argparse.Namespace) -> RunSpec:
    return RunSpec(
        mode=args.mode,
        lock_kind=LOCKS[args.lock],
        n_local=args.local,
        n_remote=args.remote,
        budget=args.budget,
        backend=Backend(args.backend),
        seed=args.seed,
        steps=args.steps,
        acquisitions=args.acquisitions,
        remote_tick_cost=args.remote_tick_cost,
        state_cap=args.state_cap,
        out=args.out,
        trace_out=args.trace_out,
    )


def emit(rep: RunReport) -> None:
    text = json.dumps(rep.to_record(), indent=2, sort_keys=True) + "\n"
    if rep.spec.out is None:
        sys.stdout.write(text)
        return
    with open(rep.spec.out, "w") as fh:
        fh.write(text)
    row = rep.summary_row()
    with open(rep.spec.out + ".csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    spec = spec_from_args(args)
    try:
        spec.validate()
    except UsageError as e:
        ap.print_usage(sys.stderr)
        print(f"{ap.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    rep = RUNNERS[spec.mode](spec)
    emit(rep)
    print(f"{spec.mode}: exit {rep.exit_code()} after {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    if rep.trace:
        print(f"trace written to {rep.trace}", file=sys.stderr)
    return rep.exit_code()


if __name__ == "__main__":
    sys.exit(main())
