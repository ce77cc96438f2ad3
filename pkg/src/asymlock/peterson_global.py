"""Two-party Peterson lock between the local-class and remote-class leaders.

The "flags" of classic Peterson are the two cohort tails: a class wants the
global lock exactly when its cohort queue is non-empty.  ``p_reacquire``
lets the current class yield once to a waiting leader of the other class.
"""

from __future__ import annotations

from dataclasses import dataclass

from .asym_memory import NULL, Memory, ProcId, RegisterId
from .machine import Frame, Session
from .mcs_cohort import CohortHandle, q_lock, q_unlock


@dataclass
class GlobalLockState:
    cohort: tuple[CohortHandle, CohortHandle]  # class 0 = local, class 1 = remote
    victim: RegisterId


def get_cid(p: ProcId, home: int) -> int:
    return 0 if p.node == home else 1


def _flavor(s: Session) -> CohortHandle:
    # class-1 leaders reach the home node through the NIC, class 0 locally
    return s.lock.g.cohort[s.cid]


def _g1(s: Session, mem: Memory, f: Frame) -> Frame:
    _flavor(s).write(mem, s.pid, s.lock.g.victim, s.cid)
    return f.goto("gwait")


def _gwait(s: Session, mem: Memory, f: Frame) -> Frame:
    return f.goto("g2")


def _g2(s: Session, mem: Memory, f: Frame) -> Frame:
    other = s.lock.g.cohort[1 - s.cid]
    if _flavor(s).read(mem, s.pid, other.tail) is NULL:
        return f.goto("g4")
    return f.goto("g3")


def _g3(s: Session, mem: Memory, f: Frame) -> Frame:
    g = s.lock.g
    if _flavor(s).read(mem, s.pid, g.victim) != s.cid:
        return f.goto("g4")
    mem.hint_idle(s.pid, (g.cohort[1 - s.cid].tail, g.victim))
    return f.goto("gwait")


def _g4(s: Session, mem: Memory, f: Frame) -> Frame:
    return f._replace(pc=f.ret, ret="cs")


HANDLERS = {"g1": _g1, "gwait": _gwait, "g2": _g2, "g3": _g3, "g4": _g4}

# labels that make up the wait loop entered after announcing via victim
WAIT_LABELS = frozenset({"gwait", "g2", "g3"})


def p_lock(s: Session) -> None:
    """Acquire the cohort lock and, as its leader, the global lock."""
    if q_lock(s):
        s.frame = s.frame._replace(pc="g1", ret="cs")
        s.run("cs")
    else:
        s.frame = s.frame._replace(pc="cs")


def p_unlock(s: Session) -> None:
    q_unlock(s)


def p_reacquire(s: Session) -> None:
    """Name the own class victim, then wait to get the global lock back."""
    resume = s.frame
    s.frame = resume._replace(pc="g1", ret="_returned")
    s.run("_returned")
    s.frame = s.frame._replace(pc=resume.pc, ret=resume.ret)
