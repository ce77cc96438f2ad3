"""Budgeted MCS queue lock used as the per-class cohort lock.

One implementation serves both flavors: the remote flavor reaches the shared
tail and other processes' descriptors with RDMA operations, the local flavor
uses plain local operations.  A process's own descriptor always lives in its
own partition and is always accessed locally, so the wait for a hand-off is
a local spin.

A descriptor is two consecutive words: ``budget`` (``-1`` while waiting, then
the number of acquisitions the cohort may still take) and ``next``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from .asym_memory import NULL, Blocked, Memory, ProcId, Ref, RegisterId, Word
from .machine import Frame, Session, next_field

if TYPE_CHECKING:
    from .peterson_global import GlobalLockState

WAITING = -1


@dataclass
class CohortHandle:
    tail: RegisterId
    k_init_budget: int
    remote: bool
    glock: Optional["GlobalLockState"] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.k_init_budget < 1:
            raise ValueError("k_init_budget must be >= 1")

    def read(self, mem: Memory, p: ProcId, r: RegisterId) -> Word:
        return mem.r_read(p, r) if self.remote else mem.read(p, r)

    def write(self, mem: Memory, p: ProcId, r: RegisterId, v: Word) -> None:
        if self.remote:
            mem.r_write(p, r, v)
        else:
            mem.write(p, r, v)

    def cas(self, mem: Memory, p: ProcId, r: RegisterId, expected: Word, swap: Word) -> Word:
        return mem.r_cas(p, r, expected, swap) if self.remote else mem.cas(p, r, expected, swap)


def new_descriptor(s: Session) -> Ref:
    """Descriptor for one acquisition, with budget ``-1`` and no successor."""
    if s.desc is not None:
        s.mem.init(s.desc.reg, WAITING)
        s.mem.init(next_field(s.desc), NULL)
        return s.desc
    return Ref(s.mem.alloc_block(s.pid.node, (WAITING, NULL)))


def _cohort(s: Session) -> CohortHandle:
    return s.lock.g.cohort[s.cid]


# -- acquire (qLock) --------------------------------------------------------


def _c1(s: Session, mem: Memory, f: Frame) -> Frame:
    return f._replace(pc="swap", curr=NULL, desc=new_descriptor(s))


def _swap(s: Session, mem: Memory, f: Frame) -> Frame:
    # RDMA has CAS but no swap: retry with the value the failed CAS returned.
    h = _cohort(s)
    seen = h.cas(mem, s.pid, h.tail, f.curr, f.desc)
    if seen == f.curr:
        return f.goto("cwait")
    return f._replace(curr=seen)


def _swap_atomic(s: Session, mem: Memory, f: Frame) -> Frame:
    # read and store in one indivisible step; a checker abstraction, not an RDMA verb
    h = _cohort(s)
    pred = h.read(mem, s.pid, h.tail)
    h.write(mem, s.pid, h.tail, f.desc)
    return f._replace(pc="cwait", curr=pred)


def _cwait(s: Session, mem: Memory, f: Frame) -> Frame:
    return f.goto("c8" if f.curr is NULL else "c2")


def _c2(s: Session, mem: Memory, f: Frame) -> Frame:
    _cohort(s).write(mem, s.pid, next_field(f.curr), f.desc)
    return f.goto("c3")


def _c3(s: Session, mem: Memory, f: Frame) -> Frame:
    if mem.read(s.pid, f.desc.reg) < 0:
        raise Blocked((f.desc.reg,))
    return f.goto("c4")


def _c4(s: Session, mem: Memory, f: Frame) -> Frame:
    exhausted = mem.read(s.pid, f.desc.reg) == 0
    return f.goto("c5" if exhausted else "c7")


def _c5(s: Session, mem: Memory, f: Frame) -> Frame:
    return f._replace(pc="g1", ret="c6")


def _c6(s: Session, mem: Memory, f: Frame) -> Frame:
    mem.write(s.pid, f.desc.reg, _cohort(s).k_init_budget)
    return f.goto("c7")


def _c7(s: Session, mem: Memory, f: Frame) -> Frame:
    return f._replace(pc="c10", passed=True)


def _c8(s: Session, mem: Memory, f: Frame) -> Frame:
    mem.write(s.pid, f.desc.reg, _cohort(s).k_init_budget)
    return f.goto("c9")


def _c9(s: Session, mem: Memory, f: Frame) -> Frame:
    return f._replace(pc="c10", passed=False)


def _c10(s: Session, mem: Memory, f: Frame) -> Frame:
    # the predecessor is not needed after this point
    return f._replace(pc="p2", curr=NULL)


# -- release (qUnlock) ------------------------------------------------------


def _r0(s: Session, mem: Memory, f: Frame) -> Frame:
    succ = mem.read(s.pid, next_field(f.desc))
    if succ is NULL:
        return f.goto("cas")
    return f._replace(pc="r2", curr=succ)


def _cas(s: Session, mem: Memory, f: Frame) -> Frame:
    h = _cohort(s)
    if h.cas(mem, s.pid, h.tail, f.desc, NULL) == f.desc:
        return f.goto("r3")
    return f.goto("r1")


def _r1(s: Session, mem: Memory, f: Frame) -> Frame:
    succ = mem.read(s.pid, next_field(f.desc))
    if succ is NULL:
        raise Blocked((next_field(f.desc),))
    return f._replace(pc="r2", curr=succ)


def _r2(s: Session, mem: Memory, f: Frame) -> Frame:
    budget = mem.read(s.pid, f.desc.reg)
    _cohort(s).write(mem, s.pid, f.curr.reg, budget - 1)
    return f.goto("r3")


def _r3(s: Session, mem: Memory, f: Frame) -> Frame:
    return f._replace(pc="ncs", curr=NULL)


HANDLERS = {
    "c1": _c1,
    "swap": _swap,
    "cwait": _cwait,
    "c2": _c2,
    "c3": _c3,
    "c4": _c4,
    "c5": _c5,
    "c6": _c6,
    "c7": _c7,
    "c8": _c8,
    "c9": _c9,
    "c10": _c10,
    "r0": _r0,
    "cas": _cas,
    "r1": _r1,
    "r2": _r2,
    "r3": _r3,
}

# labels at which a process waits on its own descriptor
SPIN_LABELS = frozenset({"c3", "r1"})


# -- blocking API -----------------------------------------------------------


def q_lock(s: Session) -> bool:
    """Enqueue and wait for the cohort lock.

    Returns True when the queue was empty (the caller leads its cohort and
    must still win the global lock), False when the lock was handed over by
    a predecessor.  A hand-off with an exhausted budget yields the global
    lock once (``p_reacquire``) before returning.
    """
    s.frame = Frame("c1", desc=s.frame.desc)
    s.run("p2")
    return not s.frame.passed


def q_unlock(s: Session) -> None:
    s.frame = s.frame._replace(pc="r0")
    s.run("ncs")


def q_is_locked(mem: Memory, p: ProcId, h: CohortHandle) -> bool:
    return h.read(mem, p, h.tail) is not NULL
