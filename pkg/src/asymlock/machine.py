"""Labeled step machines shared by every lock in the package.

A lock is written once, as a table of label -> handler.  A handler performs
one atomic step for one process: it issues its memory operations against a
``Memory`` and returns the process's next ``Frame``.  The same tables drive
blocking calls from threads (``run_until``), random schedules, and the
exhaustive checker (``execute``).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

from .asym_memory import (
    NULL,
    Backend,
    Blocked,
    ConcurrentMemory,
    Memory,
    MicroStep,
    ProcId,
    Ref,
    RegisterId,
    Word,
)


class Frame(NamedTuple):
    """Program counter plus the process-local variables of one process."""

    pc: str
    curr: Word = NULL  # CAS-loop expectation / predecessor; successor on release
    passed: bool = False
    ret: str = "cs"  # return label of the global-lock procedure
    desc: Optional[Ref] = None
    pending: Optional[tuple[RegisterId, Word]] = None  # hazard r_cas in flight

    def goto(self, pc: str) -> "Frame":
        """Same frame at label ``pc`` (a cheaper ``_replace(pc=...)``)."""
        return tuple.__new__(Frame, (pc,) + self[1:])


Handler = Callable[["Session", Memory, Frame], Frame]


def next_field(desc: Ref) -> RegisterId:
    """Address of a descriptor's ``next`` word (the slot after ``budget``)."""
    return RegisterId(desc.reg.node, desc.reg.slot + 1)


def execute(handlers: dict[str, Handler], s: "Session", mem: Memory, f: Frame) -> Frame:
    """Take one scheduler step for the process whose frame is ``f``.

    Raises ``Blocked`` when the step is disabled.  Under the hazard backend a
    step issuing ``r_cas`` takes two calls: the first returns the same label
    with ``pending`` set, the second finishes the CAS and the handler.
    """
    if f.pending is not None:
        mem.replay = f.pending
        try:
            return handlers[f.pc](s, mem, f._replace(pending=None))
        finally:
            mem.replay = None
    try:
        return handlers[f.pc](s, mem, f)
    except MicroStep as ms:
        return f._replace(pending=(ms.reg, ms.observed))


def run_until(handlers: dict[str, Handler], s: "Session", mem: Memory, f: Frame, stop: str) -> Frame:
    """Run steps of one process until it reaches label ``stop``, waiting when blocked."""
    # without the hazard backend no step is ever split, so skip the wrapper
    split = mem.backend is Backend.HAZARD
    while True:
        try:
            f = execute(handlers, s, mem, f) if split else handlers[f.pc](s, mem, f)
        except Blocked as b:
            if isinstance(mem, ConcurrentMemory):
                mem.wait_change(s.pid, b.regs)
                continue
            raise
        if f.pc == stop:
            return f


@dataclass
class Session:
    """Static, per-process view of a lock plus that process's current frame.

    ``desc`` is a descriptor reserved for this process; when it is ``None`` a
    fresh descriptor is allocated for every acquisition.
    """

    lock: "StepLock"
    pid: ProcId
    cid: int
    desc: Optional[Ref] = None
    frame: Frame = field(default_factory=lambda: Frame("ncs"))

    @property
    def mem(self) -> Memory:
        return self.lock.mem

    def run(self, stop: str) -> None:
        self.frame = run_until(self.lock.handlers, self, self.mem, self.frame, stop)


@dataclass(frozen=True)
class Token:
    """Proof of possession handed out by ``acquire`` and consumed by ``release``."""

    lock_id: int
    pid: ProcId
    serial: int


class LockMisuse(RuntimeError):
    pass


class StepLock:
    """Base for locks defined by a handler table over a fixed home node.

    Subclasses fill in ``handlers``, the set of labels at which a waiting
    process spins (``spin_labels``), and ``session``.  ``silent_labels``
    lists labels whose step touches no memory and cannot block; a checker
    may chain such a step onto the step before it.
    """

    handlers: dict[str, Handler] = {}
    spin_labels: frozenset[str] = frozenset()
    silent_labels: frozenset[str] = frozenset()

    def __init__(self, mem: Memory, home: int = 0):
        if not 0 <= home < mem.n_nodes:
            raise ValueError(f"unknown home node {home}")
        self.mem = mem
        self.home = home
        self._sessions: dict[ProcId, Session] = {}
        self._held: dict[ProcId, Token] = {}
        self._serial = 0
        self._guard = threading.Lock()

    def get_cid(self, p: ProcId) -> int:
        return 0 if p.node == self.home else 1

    def session(self, p: ProcId, reserve_descriptor: bool = False) -> Session:
        raise NotImplementedError

    def _session_for(self, p: ProcId) -> Session:
        with self._guard:
            s = self._sessions.get(p)
            if s is None:
                # a queue node is free again once its release returns, so reuse one per process
                s = self._sessions[p] = self.session(p, reserve_descriptor=True)
            return s

    def acquire(self, p: ProcId) -> Token:
        s = self._session_for(p)
        with self._guard:
            if p in self._held:
                raise LockMisuse(f"{p} already holds the lock")
        s.frame = Frame("ncs", desc=s.frame.desc)
        s.run("cs")
        with self._guard:
            self._serial += 1
            tok = self._held[p] = Token(id(self), p, self._serial)
        return tok

    def release(self, token: Token) -> None:
        with self._guard:
            if token.lock_id != id(self) or self._held.get(token.pid) != token:
                raise LockMisuse(f"stale or foreign token {token}")
            del self._held[token.pid]
        s = self._sessions[token.pid]
        s.run("ncs")

    def holders(self) -> list[ProcId]:
        with self._guard:
            return list(self._held)
