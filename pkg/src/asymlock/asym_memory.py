"""Simulated RDMA-accessible memory with local/remote operation asymmetry.

Memory is partitioned among nodes.  A process may use the local operations
(``read``/``write``/``cas``) only on registers of its own node; the remote
operations (``r_read``/``r_write``/``r_cas``) are enabled for every process,
including loopback onto its own node.

Two backends are provided:

``SEQ_CST``
    every operation is a single atomic step (global atomicity).
``HAZARD``
    a remote CAS is two scheduler-visible micro-steps (observe, then
    conditional store).  Between them, local ``write``/``cas`` on the same
    register by other processes may land and be overwritten; local ``read``
    and all remote operations on that register are held back, because the
    NIC serializes remote RMWs and local reads stay atomic with them.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Union


class ProcId(NamedTuple):
    node: int
    local_index: int

    def __str__(self) -> str:
        return f"p{self.node}.{self.local_index}"


class RegisterId(NamedTuple):
    node: int
    slot: int

    def __str__(self) -> str:
        return f"r{self.node}.{self.slot}"


class Ref(NamedTuple):
    """A word holding the address of a register (descriptor pointer)."""

    reg: RegisterId

    def __str__(self) -> str:
        return f"&{self.reg}"


NULL = None
Word = Union[int, Ref, None]


def format_word(v: Word) -> str:
    return "null" if v is None else str(v)


class Backend(enum.Enum):
    SEQ_CST = "seqcst"
    HAZARD = "hazard"


class LocalityViolation(Exception):
    """A local operation was issued against a register on another node."""


class Blocked(Exception):
    """The step cannot take effect now.

    Raised either by an ``await`` whose condition is false or, under the
    hazard backend, by an operation that must not interleave with a pending
    remote CAS.  ``regs`` names the registers whose change may unblock it.
    """

    def __init__(self, regs: tuple[RegisterId, ...] = ()):
        super().__init__(regs)
        self.regs = regs


class MicroStep(Exception):
    """Observe phase of a hazard-mode remote CAS has completed."""

    def __init__(self, reg: RegisterId, observed: Word):
        super().__init__(reg, observed)
        self.reg = reg
        self.observed = observed


@dataclass(slots=True)
class OpMetrics:
    local_reads: int = 0
    local_writes: int = 0
    local_cas: int = 0
    remote_reads: int = 0
    remote_writes: int = 0
    remote_cas: int = 0
    # successful CAS attempts; not part of the totals, which count attempts
    local_cas_ok: int = 0
    remote_cas_ok: int = 0

    @property
    def local_total(self) -> int:
        return self.local_reads + self.local_writes + self.local_cas

    @property
    def remote_total(self) -> int:
        return self.remote_reads + self.remote_writes + self.remote_cas

    def copy(self) -> "OpMetrics":
        return OpMetrics(**asdict(self))

    def __add__(self, other: "OpMetrics") -> "OpMetrics":
        return OpMetrics(*(a + b for a, b in zip(asdict(self).values(), asdict(other).values())))

    def __sub__(self, other: "OpMetrics") -> "OpMetrics":
        return OpMetrics(*(a - b for a, b in zip(asdict(self).values(), asdict(other).values())))

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


class Memory:
    """Single-threaded memory, driven step by step by a scheduler.

    The op log (``log``) is a list of ``(op, proc, reg, old, new)`` tuples
    appended to by every operation while it is not ``None``.

    >>> mem = Memory(2)
    >>> tail = mem.alloc_register(0, NULL)
    >>> mem.r_cas(ProcId(1, 0), tail, NULL, 7) is NULL
    True
    >>> mem.peek(tail), mem.op_counts(ProcId(1, 0)).remote_cas
    (7, 1)
    """

    def __init__(self, n_nodes: int, backend: Backend = Backend.SEQ_CST, remote_tick_cost: int = 0):
        if n_nodes < 1:
            raise ValueError("need at least one node")
        self.n_nodes = n_nodes
        self.backend = backend
        self.remote_tick_cost = remote_tick_cost
        self._index: dict[RegisterId, int] = {}
        self._values: list[Word] = []
        self._sizes = [0] * n_nodes
        self._metrics: dict[ProcId, OpMetrics] = {}
        self._ticks: dict[ProcId, int] = {}
        self.log: Optional[list] = None
        # register -> process with a remote CAS between its two micro-steps
        self.busy: dict[RegisterId, ProcId] = {}
        # (register, observed) when re-running a step to finish its remote CAS
        self.replay: Optional[tuple[RegisterId, Word]] = None

    # -- allocation -------------------------------------------------------

    def alloc_register(self, node: int, init: Word = NULL) -> RegisterId:
        return self.alloc_block(node, (init,))

    def alloc_block(self, node: int, inits: tuple[Word, ...]) -> RegisterId:
        """Allocate consecutive slots on ``node``; returns the first one."""
        if not 0 <= node < self.n_nodes:
            raise ValueError(f"unknown node {node}")
        first = RegisterId(node, self._sizes[node])
        for k, v in enumerate(inits):
            self._index[RegisterId(node, first.slot + k)] = len(self._values)
            self._values.append(v)
        self._sizes[node] += len(inits)
        return first

    def init(self, r: RegisterId, v: Word) -> None:
        """Initialize a register that no other process can reach yet (uncounted)."""
        self._values[self._index[r]] = v

    def registers(self) -> list[RegisterId]:
        return list(self._index)

    def peek(self, r: RegisterId) -> Word:
        """Read without counting or locality checks (for monitors and tests)."""
        return self._values[self._index[r]]

    # -- snapshots (stepwise exploration) ---------------------------------

    def snapshot(self) -> tuple:
        return tuple(self._values)

    def load(self, values: tuple) -> None:
        self._values[:] = values

    # -- accounting -------------------------------------------------------

    def _metric(self, p: ProcId) -> OpMetrics:
        m = self._metrics.get(p)
        if m is None:
            m = self._metrics[p] = OpMetrics()
            self._ticks[p] = 0
        return m

    def op_counts(self, p: ProcId) -> OpMetrics:
        m = self._metrics.get(p)
        return m.copy() if m is not None else OpMetrics()

    def all_counts(self) -> dict[ProcId, OpMetrics]:
        return {p: m.copy() for p, m in self._metrics.items()}

    def ticks(self, p: ProcId) -> int:
        return self._ticks.get(p, 0)

    def reset_counts(self) -> None:
        self._metrics.clear()
        self._ticks.clear()

    # -- access checks ----------------------------------------------------

    def _local_index(self, p: ProcId, r: RegisterId) -> int:
        if p.node != r.node:
            raise LocalityViolation(f"{p} issued a local access to {r}")
        return self._index[r]

    def _hold_back(self, p: ProcId, r: RegisterId) -> None:
        owner = self.busy.get(r)
        if owner is not None and owner != p:
            raise Blocked((r,))

    def _record(self, op: str, p: ProcId, r: RegisterId, old: Word, new: Word) -> None:
        if self.log is not None:
            self.log.append((op, p, r, old, new))

    # -- local operations -------------------------------------------------

    def read(self, p: ProcId, r: RegisterId) -> Word:
        i = self._local_index(p, r)
        if self.busy:
            self._hold_back(p, r)
        self._metric(p).local_reads += 1
        self._ticks[p] += 1
        v = self._values[i]
        self._record("read", p, r, v, v)
        return v

    def write(self, p: ProcId, r: RegisterId, v: Word) -> None:
        i = self._local_index(p, r)
        self._metric(p).local_writes += 1
        self._ticks[p] += 1
        old = self._values[i]
        self._values[i] = v
        self._record("write", p, r, old, v)

    def cas(self, p: ProcId, r: RegisterId, expected: Word, swap: Word) -> Word:
        i = self._local_index(p, r)
        self._metric(p).local_cas += 1
        self._ticks[p] += 1
        old = self._values[i]
        if old == expected:
            self._values[i] = swap
            self._metrics[p].local_cas_ok += 1
        self._record("cas", p, r, old, self._values[i])
        return old

    # -- remote operations ------------------------------------------------

    def _remote_tick(self, p: ProcId) -> None:
        self._ticks[p] += 1 + self.remote_tick_cost

    def r_read(self, p: ProcId, r: RegisterId) -> Word:
        i = self._index[r]
        if self.busy:
            self._hold_back(p, r)
        self._metric(p).remote_reads += 1
        self._remote_tick(p)
        v = self._values[i]
        self._record("r_read", p, r, v, v)
        return v

    def r_write(self, p: ProcId, r: RegisterId, v: Word) -> None:
        i = self._index[r]
        if self.busy:
            self._hold_back(p, r)
        self._metric(p).remote_writes += 1
        self._remote_tick(p)
        old = self._values[i]
        self._values[i] = v
        self._record("r_write", p, r, old, v)

    def r_cas(self, p: ProcId, r: RegisterId, expected: Word, swap: Word) -> Word:
        if self.replay is not None:
            reg, observed = self.replay
            self.replay = None
            return self.r_cas_commit(p, reg, expected, swap, observed)
        if self.backend is Backend.HAZARD:
            raise MicroStep(r, self.r_cas_observe(p, r))
        i = self._index[r]
        if self.busy:
            self._hold_back(p, r)
        self._metric(p).remote_cas += 1
        self._remote_tick(p)
        old = self._values[i]
        if old == expected:
            self._values[i] = swap
            self._metrics[p].remote_cas_ok += 1
        self._record("r_cas", p, r, old, self._values[i])
        return old

    def r_cas_observe(self, p: ProcId, r: RegisterId) -> Word:
        """First micro-step of a hazard-mode remote CAS; the register stays busy."""
        i = self._index[r]
        self._hold_back(p, r)
        self._metric(p).remote_cas += 1
        self._remote_tick(p)
        self.busy[r] = p
        v = self._values[i]
        self._record("r_cas.observe", p, r, v, v)
        return v

    def r_cas_commit(self, p: ProcId, r: RegisterId, expected: Word, swap: Word, observed: Word) -> Word:
        """Second micro-step: store ``swap`` iff the *observed* value matched."""
        if self.busy.get(r) == p:
            del self.busy[r]
        i = self._index[r]
        old = self._values[i]
        if observed == expected:
            self._values[i] = swap
            self._metric(p).remote_cas_ok += 1
        self._record("r_cas.store", p, r, old, self._values[i])
        return observed

    def hint_idle(self, p: ProcId, regs: tuple[RegisterId, ...]) -> None:
        """A polling loop made no progress; stepwise memory ignores this."""


class ConcurrentMemory(Memory):
    """Thread-safe memory: every operation is one step of a single total order.

    Waiting steps (``Blocked`` or idle polls) park the calling thread until a
    register it last observed is written, instead of burning the interpreter.
    """

    def __init__(self, n_nodes: int, remote_tick_cost: int = 0):
        super().__init__(n_nodes, Backend.SEQ_CST, remote_tick_cost)
        self._mutex = threading.Lock()
        self._versions: list[int] = []
        self._seen: dict[ProcId, dict[int, int]] = {}
        # parked processes: register index -> waiting processes, and each
        # waiter's held lock plus the indices it watches
        self._watchers: dict[int, set[ProcId]] = {}
        self._parks: dict[ProcId, threading.Lock] = {}
        self._watching: dict[ProcId, list[int]] = {}

    def alloc_block(self, node: int, inits: tuple[Word, ...]) -> RegisterId:
        with self._mutex:
            first = super().alloc_block(node, inits)
            self._versions.extend([0] * len(inits))
            return first

    def init(self, r: RegisterId, v: Word) -> None:
        with self._mutex:
            self._values[self._index[r]] = v
            self._bump(self._index[r])

    def snapshot(self) -> tuple:
        with self._mutex:
            return tuple(self._values)

    def load(self, values: tuple) -> None:
        raise TypeError("concurrent memory cannot be rewound")

    def op_counts(self, p: ProcId) -> OpMetrics:
        with self._mutex:
            return super().op_counts(p)

    def all_counts(self) -> dict[ProcId, OpMetrics]:
        with self._mutex:
            return super().all_counts()

    def _bump(self, i: int) -> None:
        self._versions[i] += 1
        waiters = self._watchers.get(i)
        if waiters:
            for q in list(waiters):
                for j in self._watching.pop(q):
                    self._watchers[j].discard(q)
                self._parks[q].release()

    def _account(self, p: ProcId, field: str, ticks: int) -> None:
        m = self._metrics.get(p) or self._metric(p)
        setattr(m, field, getattr(m, field) + 1)
        self._ticks[p] += ticks

    def _saw(self, p: ProcId, i: int) -> None:
        seen = self._seen.get(p)
        if seen is None:
            seen = self._seen[p] = {}
        seen[i] = self._versions[i]

    # Operations are implemented directly: there is no split remote CAS to
    # honor, so one critical section per operation is the whole story.

    def _load(self, p: ProcId, r: RegisterId, field: str, ticks: int, op: str) -> Word:
        i = self._index[r]
        with self._mutex:
            self._account(p, field, ticks)
            v = self._values[i]
            self._saw(p, i)
            self._record(op, p, r, v, v)
            return v

    def _store(self, p: ProcId, r: RegisterId, v: Word, field: str, ticks: int, op: str) -> None:
        i = self._index[r]
        with self._mutex:
            self._account(p, field, ticks)
            old = self._values[i]
            self._values[i] = v
            self._bump(i)
            self._record(op, p, r, old, v)

    def _rmw(self, p: ProcId, r: RegisterId, expected: Word, swap: Word, field: str, ticks: int, op: str) -> Word:
        i = self._index[r]
        with self._mutex:
            self._account(p, field, ticks)
            old = self._values[i]
            if old == expected:
                self._values[i] = swap
                self._bump(i)
                self._account(p, field + "_ok", 0)
            self._saw(p, i)
            self._record(op, p, r, old, self._values[i])
            return old

    def read(self, p, r):
        self._local_index(p, r)
        return self._load(p, r, "local_reads", 1, "read")

    def write(self, p, r, v):
        self._local_index(p, r)
        self._store(p, r, v, "local_writes", 1, "write")

    def cas(self, p, r, expected, swap):
        self._local_index(p, r)
        return self._rmw(p, r, expected, swap, "local_cas", 1, "cas")

    def r_read(self, p, r):
        return self._load(p, r, "remote_reads", 1 + self.remote_tick_cost, "r_read")

    def r_write(self, p, r, v):
        self._store(p, r, v, "remote_writes", 1 + self.remote_tick_cost, "r_write")

    def r_cas(self, p, r, expected, swap):
        return self._rmw(p, r, expected, swap, "remote_cas", 1 + self.remote_tick_cost, "r_cas")

    def wait_change(self, p: ProcId, regs: tuple[RegisterId, ...]) -> None:
        """Block until one of ``regs`` is written after ``p`` last observed it."""
        if not regs:
            return
        with self._mutex:
            seen = self._seen.get(p, {})
            idx = [self._index[r] for r in regs]
            if any(self._versions[i] != seen.get(i, -1) for i in idx):
                return
            park = self._parks.get(p)
            if park is None:
                park = self._parks[p] = threading.Lock()
                park.acquire()
            self._watching[p] = idx
            for i in idx:
                self._watchers.setdefault(i, set()).add(p)
        park.acquire()  # released by the write that bumps a watched register

    def hint_idle(self, p: ProcId, regs: tuple[RegisterId, ...]) -> None:
        self.wait_change(p, regs)
