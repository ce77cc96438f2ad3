"""Explicit-state exploration of the lock step machines.

States are ``(register values, per-process frames)``.  Every handler call is
one transition, so the interleavings explored are exactly those of the
labeled algorithm.  Safety is a breadth-first search for a bad state; the
temporal properties are decided on the full reachable graph:

* leads-to ``P ~> Q`` is violated iff some reachable ``P and not Q`` state
  reaches, through ``not Q`` states only, a strongly connected set that a
  weakly fair schedule may stay in forever;
* the two precedence properties ("whoever is waiting at label W when j is at
  ``enter`` reaches ``cs`` before j does") are violated iff j can reach
  ``cs`` from such a state without i passing through ``cs`` first.

Weak fairness is per process; steps taken at exempt labels (``ncs`` by
default) carry no obligation, so a process may idle there forever.
"""

from __future__ import annotations

import csv
import functools
import json
import itertools
import random
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Optional, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .alock import ALock
from .asym_memory import NULL, Backend, Blocked, Memory, OpMetrics, ProcId, RegisterId, Word, format_word
from .baselines import FlagLock, Peterson2
from .machine import Frame, execute, next_field
from .peterson_global import WAIT_LABELS

LOCK_KINDS = ("alock", "naive_rcas", "mixed_cas", "peterson2")

MUTUAL_EXCLUSION = "MutualExclusion"
EXECS_CS_INFINITELY_OFTEN = "ExecsCriticalSectionInfinitelyOften"
STARVATION_FREE = "StarvationFree"
DEAD_AND_LIVELOCK_FREE = "DeadAndLivelockFree"
COHORT_FAIRNESS = "CohortFairness"
GLOBAL_FAIRNESS = "GlobalFairness"
LIVENESS_PROPERTIES = (
    EXECS_CS_INFINITELY_OFTEN,
    STARVATION_FREE,
    DEAD_AND_LIVELOCK_FREE,
    COHORT_FAIRNESS,
    GLOBAL_FAIRNESS,
)

HOLDS = "holds"
VIOLATED = "violated"
INCONCLUSIVE = "inconclusive-cap-hit"

# labels between entering the critical section and leaving the cohort queue
CRITICAL_REGION = frozenset({"cs", "exit", "r0", "cas", "r1", "r2"})
QUEUED = frozenset(
    {"cwait", "c2", "c3", "c4", "c5", "c6", "c7", "c8", "c9", "c10", "p2", "g1", "g4"}
    | WAIT_LABELS
    | CRITICAL_REGION
)


@dataclass(frozen=True)
class FairnessAnnotation:
    """Labels whose steps are exempt from weak fairness; all others are fair."""

    exempt: frozenset = frozenset({"ncs"})

    def is_fair(self, label: str) -> bool:
        return label not in self.exempt


@dataclass(frozen=True)
class CheckConfig:
    """One configuration to explore.

    ``swap="atomic"`` (the default) enqueues with one indivisible
    read-and-store of the tail, the atomic unit of the modeled algorithm;
    ``"cas_loop"`` explores the library's RDMA emulation of that step
    instead, a retry loop of remote CAS attempts.
    """

    n_local: int = 1
    n_remote: int = 1
    k_init_budget: int = 1
    backend: Backend = Backend.SEQ_CST
    lock_kind: str = "alock"
    initial_victim: Union[int, str] = "both"
    state_cap: int = 5_000_000
    fairness: FairnessAnnotation = FairnessAnnotation()
    swap: str = "atomic"

    def __post_init__(self):
        if self.n_local < 0 or self.n_remote < 0 or self.n_local + self.n_remote < 1:
            raise ValueError("need n_local, n_remote >= 0 and at least one process")
        if self.k_init_budget < 1:
            raise ValueError("k_init_budget must be >= 1")
        if self.lock_kind not in LOCK_KINDS:
            raise ValueError(f"lock_kind must be one of {LOCK_KINDS}")
        if self.initial_victim not in (0, 1, "both"):
            raise ValueError("initial_victim must be 0, 1 or 'both'")
        if self.swap not in ("cas_loop", "atomic"):
            raise ValueError("swap must be 'cas_loop' or 'atomic'")
        if self.lock_kind == "peterson2" and (self.n_local > 1 or self.n_remote > 1):
            raise ValueError("peterson2 takes at most one process per class")


class LabeledState(NamedTuple):
    values: tuple
    frames: tuple

    def pcs(self) -> tuple[str, ...]:
        return tuple(f.pc for f in self.frames)


class TraceStep(NamedTuple):
    index: int
    proc: ProcId
    label: str
    changes: tuple  # of (register, old, new)
    state: LabeledState


@dataclass
class PropertyReport:
    name: str
    verdict: str
    states: int
    transitions: int
    wall_time: float
    trace: Optional[list[TraceStep]] = None
    loop_start: Optional[int] = None  # index in ``trace`` where a lasso's cycle begins
    initial_index: Optional[int] = None
    detail: str = ""
    metrics: dict = field(default_factory=dict)
    spin_violations: int = 0

    @property
    def holds(self) -> bool:
        return self.verdict == HOLDS


class Model:
    """The transition system of one configuration.

    With ``reduce=True`` two reductions apply, both of which preserve which
    combinations of labels are reachable at ``cs``: a step into a silent
    label is chained with that label's own step, and states are stored up to
    a renaming of same-class processes (with their descriptors).
    """

    def __init__(self, cfg: CheckConfig, reduce: bool = False):
        self.cfg = cfg
        self.reduce = reduce
        self.mem = Memory(1 + cfg.n_remote, cfg.backend)
        mem = self.mem
        victim = 0 if cfg.initial_victim == "both" else cfg.initial_victim
        if cfg.lock_kind == "alock":
            lock = ALock(mem, 0, cfg.k_init_budget, victim, cfg.swap)
        elif cfg.lock_kind == "peterson2":
            lock = Peterson2(mem, 0, victim)
        else:
            lock = FlagLock(mem, 0, loopback=cfg.lock_kind == "naive_rcas")
        self.lock = lock
        self.procs = [ProcId(0, i) for i in range(cfg.n_local)] + [ProcId(1 + j, 0) for j in range(cfg.n_remote)]
        self.sessions = [lock.session(p, reserve_descriptor=True) for p in self.procs]
        self.handlers = lock.handlers
        self.cids = [s.cid for s in self.sessions]
        frames = tuple(Frame("ncs", desc=s.desc) for s in self.sessions)
        victims = (0, 1) if cfg.initial_victim == "both" else (victim,)
        self._initial = []
        for v in victims:
            if hasattr(lock, "g"):
                mem.init(lock.g.victim, v)
            self._initial.append(LabeledState(mem.snapshot(), frames))
            if not hasattr(lock, "g"):
                break
        self.registers = mem.registers()
        self.reg_index = {r: k for k, r in enumerate(self.registers)}
        self.spin_labels = lock.spin_labels
        self.silent_labels = lock.silent_labels if reduce else frozenset()
        self.spin_violations = 0
        self._symmetries = self._renamings() if reduce else []

    def _renamings(self) -> list[tuple[dict, list[int], list[int], dict]]:
        """Every non-trivial class-preserving process permutation, as (reference
        map, value source positions, frame source positions, frame cache)."""
        classes = [[i for i, c in enumerate(self.cids) if c == k] for k in (0, 1)]
        out = []
        for p0 in itertools.permutations(classes[0]):
            for p1 in itertools.permutations(classes[1]):
                perm = dict(zip(classes[0] + classes[1], p0 + p1))
                if all(a == b for a, b in perm.items()):
                    continue
                refs, vsrc, fsrc = {}, list(range(len(self.registers))), [0] * len(perm)
                for i, j in perm.items():
                    fsrc[j] = i
                    di, dj = self.sessions[i].desc, self.sessions[j].desc
                    if di is None:
                        continue  # flag locks keep no per-process registers
                    refs[di] = dj
                    for fi, fj in ((di.reg, dj.reg), (next_field(di), next_field(dj))):
                        vsrc[self.reg_index[fj]] = self.reg_index[fi]
                out.append((refs, vsrc, fsrc, {}))
        return out

    def canonical(self, s: LabeledState) -> LabeledState:
        """A fixed representative of ``s`` under same-class renaming."""
        if not self._symmetries:
            return s
        best, best_h = s, hash(s)
        old_values, old_frames = s.values, s.frames
        for refs, vsrc, fsrc, renamed in self._symmetries:
            values = tuple([refs.get(v, v) for v in [old_values[k] for k in vsrc]])
            frames = []
            for k in fsrc:
                f = old_frames[k]
                g = renamed.get(f)
                if g is None:
                    g = renamed[f] = _rename_frame(f, refs)
                frames.append(g)
            t = LabeledState(values, tuple(frames))
            h = hash(t)
            if h < best_h:
                best, best_h = t, h
        return best

    def initial_states(self) -> list[LabeledState]:
        return list(self._initial)

    def step(self, s: LabeledState, i: int, log: bool = False) -> tuple[LabeledState, Optional[list]]:
        """Successor of ``s`` when process ``i`` moves; raises ``Blocked`` if it cannot."""
        mem = self.mem
        mem.load(s.values)
        frames = s.frames
        if self.cfg.backend is Backend.HAZARD:
            mem.busy = {f.pending[0]: self.procs[k] for k, f in enumerate(frames) if f.pending is not None}
        f = frames[i]
        spin = f.pc in self.spin_labels
        mem.log = [] if (log or spin) else None
        try:
            nf = execute(self.handlers, self.sessions[i], mem, f)
            while nf.pc in self.silent_labels and nf.pending is None:
                nf = execute(self.handlers, self.sessions[i], mem, nf)
        finally:
            if spin:
                node = self.procs[i].node
                self.spin_violations += sum(1 for op in mem.log if op[2].node != node)
        ops = mem.log
        mem.log = None
        return LabeledState(mem.snapshot(), frames[:i] + (nf,) + frames[i + 1 :]), ops

    def successors(self, s: LabeledState) -> list[tuple[ProcId, LabeledState]]:
        out = []
        for i, p in enumerate(self.procs):
            try:
                out.append((p, self.step(s, i)[0]))
            except Blocked:
                pass
        return out

    def value(self, s: LabeledState, r: RegisterId) -> Word:
        return s.values[self.reg_index[r]]

    def step_label(self, before: Frame, after: Frame) -> str:
        if after.pending is not None:
            return before.pc + ".observe"
        if before.pending is not None:
            return before.pc + ".store"
        return before.pc


def _rename_frame(f: Frame, refs: dict) -> Frame:
    pending = f.pending
    if pending is not None:
        pending = (pending[0], refs.get(pending[1], pending[1]))
    return f._replace(curr=refs.get(f.curr, f.curr), desc=refs.get(f.desc, f.desc), pending=pending)


@functools.lru_cache(maxsize=8)
def _model_for(cfg: CheckConfig) -> Model:
    return Model(cfg)


def successors(s: LabeledState, cfg: CheckConfig) -> set[tuple[ProcId, LabeledState]]:
    """One successor per process whose next step is enabled in ``s``."""
    return set(_model_for(cfg).successors(s))


def initial_states(cfg: CheckConfig) -> list[LabeledState]:
    return _model_for(cfg).initial_states()


# -- exploration ------------------------------------------------------------


class _Explored:
    """Reachable graph with breadth-first parent pointers."""

    def __init__(self, model: Model):
        self.model = model
        self.states: list[LabeledState] = []
        self.parent: list[int] = []
        self.parent_proc: list[int] = []
        self.src: list[int] = []
        self.dst: list[int] = []
        self.pid: list[int] = []
        self.fair_enabled: list[int] = []
        self.capped = False
        self.bad: Optional[int] = None


def _explore(
    model: Model,
    order: str = "bfs",
    keep_edges: bool = False,
    bad: Optional[Callable[[LabeledState], bool]] = None,
) -> _Explored:
    cfg = model.cfg
    ex = _Explored(model)
    ids: dict[LabeledState, int] = {}
    frame_pool: dict[Frame, Frame] = {}
    n = len(model.procs)
    fair = cfg.fairness

    def add(s: LabeledState, par: int, proc: int) -> int:
        s = LabeledState(s.values, tuple(frame_pool.setdefault(f, f) for f in s.frames))
        k = len(ex.states)
        ids[s] = k
        ex.states.append(s)
        ex.parent.append(par)
        ex.parent_proc.append(proc)
        return k

    pending: deque[int] = deque()
    canonical = model.canonical
    for s in model.initial_states():
        s = canonical(s)
        if s not in ids:
            pending.append(add(s, -1, -1))
            if bad is not None and bad(s):
                ex.bad = ids[s]
                return ex
    pop = pending.popleft if order == "bfs" else pending.pop
    step = model.step
    while pending:
        u = pop()
        s = ex.states[u]
        mask = 0
        for i in range(n):
            try:
                t, _ = step(s, i)
            except Blocked:
                continue
            if fair.is_fair(s.frames[i].pc):
                mask |= 1 << i
            t = canonical(t)
            v = ids.get(t)
            if v is None:
                if len(ex.states) >= cfg.state_cap:
                    ex.capped = True
                    return ex
                v = add(t, u, i)
                pending.append(v)
                if bad is not None and bad(t):
                    ex.bad = v
                    return ex
            if keep_edges:
                ex.src.append(u)
                ex.dst.append(v)
                ex.pid.append(i)
        if keep_edges:
            ex.fair_enabled.append(mask)
    return ex


def count_states(cfg: CheckConfig, order: str = "bfs", reduce: bool = False) -> int:
    """Number of reachable states, by breadth- or depth-first traversal.

    >>> count_states(CheckConfig(1, 1)), count_states(CheckConfig(1, 1), "dfs")
    (634, 634)
    """
    if order not in ("bfs", "dfs"):
        raise ValueError("order must be 'bfs' or 'dfs'")
    return len(_explore(Model(cfg, reduce), order).states)


def _path_to(ex: _Explored, k: int) -> tuple[int, list[int]]:
    """(initial state index, process choices) reaching state ``k`` along BFS parents."""
    chain = [k]
    while ex.parent[k] != -1:
        k = ex.parent[k]
        chain.append(k)
    chain.reverse()
    model = ex.model
    if not model.reduce:
        return model.initial_states().index(ex.states[k]), [ex.parent_proc[c] for c in chain[1:]]
    # stored states are representatives; rebuild a concrete run that visits their orbits
    inits = model.initial_states()
    init = next(n for n, s in enumerate(inits) if model.canonical(s) == ex.states[chain[0]])
    cur, procs = inits[init], []
    for c in chain[1:]:
        for i in range(len(model.procs)):
            try:
                nxt, _ = model.step(cur, i)
            except Blocked:
                continue
            if model.canonical(nxt) == ex.states[c]:
                cur = nxt
                procs.append(i)
                break
        else:
            raise AssertionError("lost the run while rebuilding a trace")
    return init, procs


def replay(model: Model, initial_index: int, procs: Iterable[int]) -> list[TraceStep]:
    """Re-execute a schedule, recording labels and register changes of each step."""
    s = model.initial_states()[initial_index]
    out = []
    for k, i in enumerate(procs):
        before = s.frames[i]
        s, ops = model.step(s, i, log=True)
        changes = tuple((op[2], op[3], op[4]) for op in ops if op[3] != op[4])
        out.append(TraceStep(k, model.procs[i], model.step_label(before, s.frames[i]), changes, s))
    return out


def _metrics(model: Model) -> dict:
    return {p: model.mem.op_counts(p) for p in model.procs}


def two_in_cs(s: LabeledState) -> bool:
    return sum(1 for f in s.frames if f.pc == "cs") >= 2


def check_safety(cfg: CheckConfig, reduce: bool = True) -> PropertyReport:
    """Search every reachable state for two processes at ``cs``."""
    t0 = time.perf_counter()
    model = Model(cfg, reduce)
    ex = _explore(model, "bfs", bad=two_in_cs)
    rep = PropertyReport(
        MUTUAL_EXCLUSION,
        HOLDS,
        len(ex.states),
        0,
        0.0,
        metrics=_metrics(model),
        spin_violations=model.spin_violations,
    )
    if ex.bad is not None:
        init, procs = _path_to(ex, ex.bad)
        rep.verdict = VIOLATED
        rep.initial_index = init
        rep.trace = replay(Model(cfg, reduce), init, procs)
        rep.detail = "two processes at cs"
    elif ex.capped:
        rep.verdict = INCONCLUSIVE
    rep.wall_time = time.perf_counter() - t0
    return rep


# -- state invariants of the composed lock ----------------------------------


def structural_violations(model: Model, s: LabeledState) -> list[str]:
    """Queue integrity, hand-off exclusivity, budget bound and two-party exclusion."""
    lock = model.lock
    if not isinstance(lock, ALock):
        return []
    out = []
    k = lock.k_init_budget
    desc_owner = {sess.desc: i for i, sess in enumerate(model.sessions)}
    for sess in model.sessions:
        b = model.value(s, sess.desc.reg)
        if not -1 <= b <= k:
            out.append(f"budget {b} of {sess.pid} outside [-1, {k}]")
    for c in (0, 1):
        members = {i for i, f in enumerate(s.frames) if model.cids[i] == c and f.pc in QUEUED}
        tail = model.value(s, lock.g.cohort[c].tail)
        if (tail is NULL) != (not members):
            out.append(f"cohort {c}: tail {format_word(tail)} with members {sorted(members)}")
            continue
        if tail is not NULL and desc_owner.get(tail) not in members:
            out.append(f"cohort {c}: tail points outside the queue")
        nexts = {}
        for i in members:
            nxt = model.value(s, next_field(model.sessions[i].desc))
            if nxt is not NULL:
                if desc_owner.get(nxt) not in members:
                    out.append(f"cohort {c}: {model.procs[i]} links outside the queue")
                nexts[i] = desc_owner.get(nxt)
        if len(set(nexts.values())) != len(nexts):
            out.append(f"cohort {c}: descriptor linked twice")
        for i in nexts:
            seen, j = set(), i
            while j in nexts:
                if j in seen:
                    out.append(f"cohort {c}: cycle through {model.procs[i]}")
                    break
                seen.add(j)
                j = nexts[j]
        heads = [i for i in members if model.value(s, model.sessions[i].desc.reg) >= 0]
        if len(heads) > 1:
            out.append(f"cohort {c}: several descriptors hold a hand-off")
    inside = {model.cids[i] for i, f in enumerate(s.frames) if f.pc in CRITICAL_REGION}
    if len(inside) > 1:
        out.append("both classes inside the global lock")
    return out


def check_invariants(cfg: CheckConfig, reduce: bool = True) -> PropertyReport:
    t0 = time.perf_counter()
    model = Model(cfg, reduce)
    ex = _explore(model, "bfs", bad=lambda s: bool(structural_violations(model, s)))
    rep = PropertyReport("StructuralInvariants", HOLDS, len(ex.states), 0, 0.0)
    if ex.bad is not None:
        init, procs = _path_to(ex, ex.bad)
        rep.verdict = VIOLATED
        rep.initial_index = init
        rep.trace = replay(Model(cfg, reduce), init, procs)
        rep.detail = "; ".join(structural_violations(model, ex.states[ex.bad]))
    elif ex.capped:
        rep.verdict = INCONCLUSIVE
    rep.wall_time = time.perf_counter() - t0
    return rep


# -- graph analysis for liveness --------------------------------------------


class _Graph:
    def __init__(self, ex: _Explored):
        self.ex = ex
        self.n = len(ex.states)
        src = np.asarray(ex.src, dtype=np.int64)
        order = np.argsort(src, kind="stable")
        self.src = src[order]
        self.dst = np.asarray(ex.dst, dtype=np.int64)[order]
        self.pid = np.asarray(ex.pid, dtype=np.int64)[order]
        self.indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.src, minlength=self.n), out=self.indptr[1:])
        self.fair_enabled = np.asarray(ex.fair_enabled, dtype=np.int64)
        n_procs = len(ex.model.procs)
        self.all_mask = (1 << n_procs) - 1
        labels = sorted({f.pc for s in ex.states for f in s.frames})
        self.label_id = {lab: k for k, lab in enumerate(labels)}
        self.pc = np.array([[self.label_id[f.pc] for f in s.frames] for s in ex.states], dtype=np.int16).reshape(
            self.n, n_procs
        )

    def at(self, i: int, label: str) -> np.ndarray:
        lid = self.label_id.get(label)
        if lid is None:
            return np.zeros(self.n, dtype=bool)
        return self.pc[:, i] == lid

    def at_any(self, i: int, labels: Iterable[str]) -> np.ndarray:
        out = np.zeros(self.n, dtype=bool)
        for lab in labels:
            out |= self.at(i, lab)
        return out

    def bfs(self, sources: np.ndarray, allowed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """States reachable from ``sources`` through ``allowed`` states, with parent edges."""
        visited = np.zeros(self.n, dtype=bool)
        parent_edge = np.full(self.n, -1, dtype=np.int64)
        frontier = np.unique(sources)
        visited[frontier] = True
        while frontier.size:
            starts = self.indptr[frontier]
            counts = self.indptr[frontier + 1] - starts
            total = int(counts.sum())
            if total == 0:
                break
            offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
            edges = np.repeat(starts, counts) + offsets
            nbr = self.dst[edges]
            keep = allowed[nbr] & ~visited[nbr]
            nbr, edges = nbr[keep], edges[keep]
            nbr, first = np.unique(nbr, return_index=True)
            parent_edge[nbr] = edges[first]
            visited[nbr] = True
            frontier = nbr
        return visited, parent_edge

    def edge_path(self, parent_edge: np.ndarray, target: int) -> list[int]:
        path = []
        while parent_edge[target] != -1:
            e = int(parent_edge[target])
            path.append(e)
            target = int(self.src[e])
        path.reverse()
        return path

    def fair_components(self, members: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Strong components of the subgraph on ``members``; returns (labels, fair flags, taken masks)."""
        inner = members[self.src] & members[self.dst]
        m = csr_matrix(
            (np.ones(int(inner.sum()), dtype=np.int8), (self.src[inner], self.dst[inner])), shape=(self.n, self.n)
        )
        _, comp = connected_components(m, directed=True, connection="strong")
        n_comp = int(comp.max()) + 1 if self.n else 0
        internal = inner & (comp[self.src] == comp[self.dst])
        taken = np.zeros(n_comp, dtype=np.int64)
        np.bitwise_or.at(taken, comp[self.src[internal]], np.left_shift(1, self.pid[internal]))
        has_edge = np.zeros(n_comp, dtype=bool)
        has_edge[comp[self.src[internal]]] = True
        idle = np.zeros(n_comp, dtype=np.int64)
        idx = np.flatnonzero(members)
        np.bitwise_or.at(idle, comp[idx], ~self.fair_enabled[idx] & self.all_mask)
        stutter = np.zeros(n_comp, dtype=bool)
        stutter[comp[idx[self.fair_enabled[idx] == 0]]] = True
        fair = stutter | (has_edge & ((taken | idle) == self.all_mask))
        in_members = np.zeros(n_comp, dtype=bool)
        in_members[comp[idx]] = True
        return comp, fair & in_members, taken


def _lasso(g: _Graph, members: np.ndarray, parent_edge: np.ndarray) -> Optional[tuple[int, list[int], int]]:
    """A fair lasso inside ``members``: (source state, edge list, index where the cycle starts)."""
    comp, fair, taken = g.fair_components(members)
    fair_ids = np.flatnonzero(fair)
    if fair_ids.size == 0:
        return None
    c = int(fair_ids[0])
    in_c = comp == c
    in_c &= members
    nodes = np.flatnonzero(in_c)
    entry = int(nodes[0])
    stem = g.edge_path(parent_edge, entry)
    source = int(g.src[stem[0]]) if stem else entry

    def walk(a: int, b: int) -> list[int]:
        if a == b:
            return []
        _, pe = g.bfs(np.array([a]), in_c)
        return g.edge_path(pe, b)

    idle_nodes = nodes[g.fair_enabled[nodes] == 0]
    if idle_nodes.size:
        return source, stem + walk(entry, int(idle_nodes[0])), len(stem) + len(walk(entry, int(idle_nodes[0])))
    cycle: list[int] = []
    cur = entry
    internal = np.flatnonzero(in_c[g.src] & in_c[g.dst])
    for k in range(len(g.ex.model.procs)):
        by_k = internal[g.pid[internal] == k]
        if by_k.size:
            e = int(by_k[0])
            cycle += walk(cur, int(g.src[e])) + [e]
            cur = int(g.dst[e])
        else:
            blocked = nodes[(g.fair_enabled[nodes] >> k) & 1 == 0]
            cycle += walk(cur, int(blocked[0]))
            cur = int(blocked[0])
    if not cycle:
        e = int(internal[g.src[internal] == entry][0])
        cycle = [e]
        cur = int(g.dst[e])
    cycle += walk(cur, entry)
    return source, stem + cycle, len(stem)


def _schedule(g: _Graph, source: int, edges: list[int]) -> tuple[int, list[int]]:
    init, procs = _path_to(g.ex, source)
    return init, procs + [int(g.pid[e]) for e in edges]


def _leads_to(g: _Graph, p: np.ndarray, q: np.ndarray):
    """None if ``p ~> q`` holds under weak fairness, else (initial, schedule, loop start)."""
    starts = np.flatnonzero(p & ~q)
    if starts.size == 0:
        return None
    reach, parent_edge = g.bfs(starts, ~q)
    found = _lasso(g, reach, parent_edge)
    if found is None:
        return None
    source, edges, loop = found
    init, procs = _schedule(g, source, edges)
    return init, procs, loop + len(procs) - len(edges)


def _precedes(g: _Graph, i: int, j: int, wait_label: str):
    """None if i, waiting at ``wait_label`` while j is at ``enter``, always reaches cs first."""
    trig = g.at(i, wait_label) & g.at(j, "enter")
    if not trig.any():
        return None
    reach, parent_edge = g.bfs(np.flatnonzero(trig), ~g.at(i, "cs"))
    bad = np.flatnonzero(reach & g.at(j, "cs"))
    if bad.size == 0:
        return None
    edges = g.edge_path(parent_edge, int(bad[0]))
    source = int(g.src[edges[0]]) if edges else int(bad[0])
    init, procs = _schedule(g, source, edges)
    return init, procs, None


def check_liveness(cfg: CheckConfig, properties: Iterable[str] = LIVENESS_PROPERTIES) -> list[PropertyReport]:
    """Decide each temporal property on the full reachable graph."""
    t0 = time.perf_counter()
    model = Model(cfg)
    ex = _explore(model, "bfs", keep_edges=True)
    explored_in = time.perf_counter() - t0
    common = dict(states=len(ex.states), transitions=len(ex.src), metrics=_metrics(model))
    if ex.capped:
        return [PropertyReport(name, INCONCLUSIVE, wall_time=explored_in, **common) for name in properties]
    g = _Graph(ex)
    n = len(model.procs)
    cids = model.cids
    reports = []
    for name in properties:
        t1 = time.perf_counter()
        found, who = None, ""
        if name == EXECS_CS_INFINITELY_OFTEN:
            everywhere = np.ones(g.n, dtype=bool)
            for i in range(n):
                found = _leads_to(g, everywhere, g.at(i, "cs"))
                if found:
                    who = f"{model.procs[i]} stops reaching cs"
                    break
        elif name == STARVATION_FREE:
            for i in range(n):
                found = _leads_to(g, g.at(i, "enter"), g.at(i, "cs"))
                if found:
                    who = f"{model.procs[i]} starves"
                    break
        elif name == DEAD_AND_LIVELOCK_FREE:
            anyone_enter = np.zeros(g.n, dtype=bool)
            anyone_cs = np.zeros(g.n, dtype=bool)
            for i in range(n):
                anyone_enter |= g.at(i, "enter")
                anyone_cs |= g.at(i, "cs")
            found = _leads_to(g, anyone_enter, anyone_cs)
            who = "no process reaches cs" if found else ""
        elif name in (COHORT_FAIRNESS, GLOBAL_FAIRNESS):
            wait = "cwait" if name == COHORT_FAIRNESS else "gwait"
            for i in range(n):
                found = _leads_to(g, g.at(i, wait), g.at(i, "cs"))
                if found:
                    who = f"{model.procs[i]} waits at {wait} forever"
                    break
                for j in range(n):
                    if j == i or (name == COHORT_FAIRNESS and cids[i] != cids[j]):
                        continue
                    found = _precedes(g, i, j, wait)
                    if found:
                        who = f"{model.procs[j]} overtakes {model.procs[i]} waiting at {wait}"
                        break
                if found:
                    break
        else:
            raise ValueError(f"unknown property {name}")
        rep = PropertyReport(name, HOLDS, wall_time=explored_in + time.perf_counter() - t1, **common)
        if found:
            init, procs, loop = found
            rep.verdict = VIOLATED
            rep.initial_index = init
            rep.trace = replay(Model(cfg), init, procs)
            rep.loop_start = loop
            rep.detail = who
        reports.append(rep)
    return reports


# -- random schedules -------------------------------------------------------


@dataclass
class RunResult:
    steps: int
    trace: Optional[list[tuple[int, str]]]
    metrics: dict[ProcId, OpMetrics]
    ticks: dict[ProcId, int]
    acquisitions: dict[ProcId, int]
    me_violations: int
    spin_violations: int
    max_monopoly: int
    max_monopoly_requesting: int
    initial_victim: Optional[int]
    initial_index: int = 0
    first_violation_step: Optional[int] = None

    @property
    def cs_entries(self) -> int:
        return sum(self.acquisitions.values())


def random_fair_run(
    cfg: CheckConfig,
    seed: int,
    max_steps: int,
    window: Optional[int] = None,
    record_trace: bool = True,
    remote_tick_cost: int = 0,
) -> RunResult:
    """Schedule a uniformly random enabled process each step, for ``max_steps`` steps.

    A process that has sat at a fair label for more than ``window`` steps
    without moving is tried first, so no enabled step is postponed forever.

    Two monopoly figures are tracked: the longest run of same-class cs
    entries while some process of the other class is announced at the global
    lock (``gwait``/``g2``/``g3``), and the same while some process of the
    other class is anywhere between ``enter`` and ``cs``.
    """
    model = Model(cfg)
    mem = model.mem
    mem.remote_tick_cost = remote_tick_cost
    rng = random.Random(seed)
    inits = model.initial_states()
    initial_index = rng.randrange(len(inits)) if len(inits) > 1 else 0
    start = inits[initial_index]
    victim = model.value(start, model.lock.g.victim) if hasattr(model.lock, "g") else None
    mem.load(start.values)
    mem.busy = {}
    frames = list(start.frames)
    n = len(frames)
    procs, sessions, handlers, cids = model.procs, model.sessions, model.handlers, model.cids
    fair = cfg.fairness
    window = window if window is not None else 8 * n
    idle = [0] * n
    trace: Optional[list] = [] if record_trace else None
    acquisitions = [0] * n
    in_cs = 0
    me_violations = 0
    first_violation = None
    spin_violations = 0
    spin_labels = model.spin_labels
    announced = [0, 0]  # per class: processes in the global-lock wait loop
    requesting = [0, 0]  # per class: processes between enter and cs
    run_a = [0, 0]
    run_r = [0, 0]
    best_a = best_r = 0
    order = list(range(n))

    for t in range(max_steps):
        forced = [i for i in range(n) if idle[i] > window and fair.is_fair(frames[i].pc)]
        if forced:
            candidates = sorted(forced, key=lambda i: -idle[i])
        else:
            first = rng.randrange(n)
            candidates = [first]
        moved = None
        tried = set()
        while moved is None:
            for i in candidates:
                if i in tried:
                    continue
                tried.add(i)
                f = frames[i]
                spin = f.pc in spin_labels
                mem.log = [] if spin else None
                try:
                    nf = execute(handlers, sessions[i], mem, f)
                except Blocked:
                    idle[i] = 0
                    continue
                finally:
                    if spin:
                        spin_violations += sum(1 for op in mem.log if op[2].node != procs[i].node)
                        mem.log = None
                moved = i
                break
            if moved is None:
                rest = [i for i in order if i not in tried]
                if not rest:
                    raise RuntimeError(f"deadlock at step {t}")
                rng.shuffle(rest)
                candidates = rest
        i = moved
        old, new = frames[i].pc, nf.pc
        frames[i] = nf
        for k in range(n):
            idle[k] += 1
        idle[i] = 0
        if trace is not None:
            trace.append((i, model.step_label(f, nf)))
        if old == new:
            continue
        c = cids[i]
        if old in WAIT_LABELS and new not in WAIT_LABELS:
            announced[c] -= 1
        elif new in WAIT_LABELS and old not in WAIT_LABELS:
            announced[c] += 1
        if new == "enter":
            requesting[c] += 1
        elif new == "cs":
            requesting[c] -= 1
            acquisitions[i] += 1
            in_cs += 1
            if in_cs > 1:
                me_violations += 1
                if first_violation is None:
                    first_violation = t
            run_a[1 - c] = run_r[1 - c] = 0
            run_a[c] = run_a[c] + 1 if announced[1 - c] else 0
            run_r[c] = run_r[c] + 1 if requesting[1 - c] else 0
            best_a = max(best_a, run_a[c])
            best_r = max(best_r, run_r[c])
        if old == "cs":
            in_cs -= 1

    return RunResult(
        steps=max_steps,
        trace=trace,
        metrics={p: mem.op_counts(p) for p in procs},
        ticks={p: mem.ticks(p) for p in procs},
        acquisitions={p: acquisitions[k] for k, p in enumerate(procs)},
        me_violations=me_violations,
        spin_violations=spin_violations,
        max_monopoly=best_a,
        max_monopoly_requesting=best_r,
        initial_victim=victim,
        initial_index=initial_index,
        first_violation_step=first_violation,
    )


def run_schedule(cfg: CheckConfig, initial_index: int, schedule: list[int]) -> list[TraceStep]:
    """Replay the process choices of a random run with full change records."""
    return replay(Model(cfg), initial_index, schedule)


# -- trace files ------------------------------------------------------------

TRACE_COLUMNS = ("step_index", "proc", "label", "changed_register", "old", "new")


def config_record(cfg: CheckConfig) -> dict:
    return {
        "lock_kind": cfg.lock_kind,
        "n_local": cfg.n_local,
        "n_remote": cfg.n_remote,
        "k_init_budget": cfg.k_init_budget,
        "backend": cfg.backend.value,
        "initial_victim": cfg.initial_victim,
        "swap": cfg.swap,
    }


def write_trace(
    path,
    cfg: CheckConfig,
    steps: list[TraceStep],
    initial_index: int,
    loop_start: Optional[int] = None,
    reduced: bool = False,
) -> None:
    """One row per changed register (a step that changes nothing gets one row
    with empty register fields).  ``#`` lines carry what replay needs."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config {json.dumps(config_record(cfg), sort_keys=True)}\n")
        fh.write(f"# initial {initial_index}\n")
        fh.write(f"# chained {int(reduced)}\n")
        if loop_start is not None:
            fh.write(f"# loop {loop_start}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for st in steps:
            rows = [(str(r), format_word(a), format_word(b)) for r, a, b in st.changes] or [("", "", "")]
            for row in rows:
                w.writerow((st.index, str(st.proc), st.label) + row)


@dataclass
class TraceFile:
    cfg: CheckConfig
    initial_index: int
    chained: bool
    loop_start: Optional[int]
    steps: list[tuple[int, str, str]]  # (step index, process, label)


def read_trace(path) -> TraceFile:
    meta = {}
    body = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(" ")
                meta[key] = value
            else:
                body.append(line)
    rows = list(csv.DictReader(body))
    rec = json.loads(meta["config"])
    cfg = CheckConfig(
        rec["n_local"],
        rec["n_remote"],
        rec["k_init_budget"],
        Backend(rec["backend"]),
        rec["lock_kind"],
        rec["initial_victim"],
        swap=rec.get("swap", "atomic"),
    )
    steps = []
    for row in rows:
        k = int(row["step_index"])
        if not steps or steps[-1][0] != k:
            steps.append((k, row["proc"], row["label"]))
    loop = int(meta["loop"]) if "loop" in meta else None
    return TraceFile(cfg, int(meta.get("initial", 0)), meta.get("chained", "0") == "1", loop, steps)


def replay_trace_file(path) -> list[TraceStep]:
    """Re-execute a trace file, checking every recorded label on the way."""
    tf = read_trace(path)
    model = Model(tf.cfg, tf.chained)
    by_name = {str(p): i for i, p in enumerate(model.procs)}
    out = replay(model, tf.initial_index, [by_name[proc] for _, proc, _ in tf.steps])
    for st, (_, _, label) in zip(out, tf.steps):
        if st.label != label:
            raise ValueError(f"step {st.index}: trace says {label}, replay took {st.label}")
    return out
