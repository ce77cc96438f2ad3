"""Comparison locks: CAS spinlocks over one flag, and bare two-party Peterson."""

from __future__ import annotations

from . import peterson_global
from .alock import BODY
from .asym_memory import NULL, Memory, ProcId
from .machine import Frame, Session, StepLock
from .mcs_cohort import CohortHandle
from .peterson_global import GlobalLockState

FREE, HELD = 0, 1


class FlagLock(StepLock):
    """Test-and-set lock on a flag at the home node.

    ``loopback=True`` forces every process, local ones included, through
    remote CAS (safe, but local processes pay RDMA costs).  With
    ``loopback=False`` local processes use local CAS on the same flag,
    which races with remote CAS when the NIC does not provide global
    atomicity.
    """

    spin_labels = frozenset({"acq"})
    silent_labels = frozenset({"enter"})

    def __init__(self, mem: Memory, home: int = 0, loopback: bool = True):
        super().__init__(mem, home)
        self.loopback = loopback
        self.flag = mem.alloc_register(home, FREE)
        self.handlers = {
            "ncs": BODY["ncs"],
            "enter": lambda s, mem, f: f.goto("acq"),
            "acq": self._acq,
            "cs": BODY["cs"],
            "exit": self._exit,
        }

    def _remote(self, s: Session) -> bool:
        return self.loopback or s.cid == 1

    def _acq(self, s: Session, mem: Memory, f: Frame) -> Frame:
        if self._remote(s):
            seen = mem.r_cas(s.pid, self.flag, FREE, HELD)
        else:
            seen = mem.cas(s.pid, self.flag, FREE, HELD)
        if seen == FREE:
            return f.goto("cs")
        mem.hint_idle(s.pid, (self.flag,))
        return f

    def _exit(self, s: Session, mem: Memory, f: Frame) -> Frame:
        if self._remote(s):
            mem.r_write(s.pid, self.flag, FREE)
        else:
            mem.write(s.pid, self.flag, FREE)
        return f.goto("ncs")

    def session(self, p: ProcId, reserve_descriptor: bool = False) -> Session:
        return Session(self, p, self.get_cid(p))


def naive_rcas(mem: Memory, home: int = 0) -> FlagLock:
    return FlagLock(mem, home, loopback=True)


def mixed_cas(mem: Memory, home: int = 0) -> FlagLock:
    return FlagLock(mem, home, loopback=False)


def _flag(s: Session, mem: Memory, f: Frame) -> Frame:
    h = s.lock.g.cohort[s.cid]
    h.write(mem, s.pid, h.tail, HELD)
    return f._replace(pc="g1", ret="cs")


def _unflag(s: Session, mem: Memory, f: Frame) -> Frame:
    h = s.lock.g.cohort[s.cid]
    h.write(mem, s.pid, h.tail, NULL)
    return f.goto("ncs")


class Peterson2(StepLock):
    """The global lock alone, with one process per class standing in for a cohort."""

    silent_labels = frozenset({"enter", "gwait", "g4", "exit"})

    handlers = {
        "ncs": BODY["ncs"],
        "enter": lambda s, mem, f: f.goto("flag"),
        "flag": _flag,
        **peterson_global.HANDLERS,
        "cs": BODY["cs"],
        "exit": lambda s, mem, f: f.goto("unflag"),
        "unflag": _unflag,
    }

    def __init__(self, mem: Memory, home: int = 0, victim: int = 0):
        super().__init__(mem, home)
        victim_reg = mem.alloc_register(home, victim)
        cohorts = (
            CohortHandle(mem.alloc_register(home, NULL), 1, remote=False),
            CohortHandle(mem.alloc_register(home, NULL), 1, remote=True),
        )
        self.g = GlobalLockState(cohorts, victim_reg)
        self._members: dict[int, ProcId] = {}

    def session(self, p: ProcId, reserve_descriptor: bool = False) -> Session:
        cid = self.get_cid(p)
        if self._members.setdefault(cid, p) != p:
            raise ValueError(f"peterson2 admits one process per class; class {cid} has {self._members[cid]}")
        return Session(self, p, cid)
