"""The combined asymmetric lock: budgeted MCS cohorts inside a Peterson lock.

Local processes (on the home node) only ever issue local operations; remote
processes use RDMA operations for everything outside their own partition.

    >>> from asymlock.asym_memory import ConcurrentMemory, ProcId
    >>> mem = ConcurrentMemory(n_nodes=2)
    >>> lock = new_alock(mem, home=0, k_init_budget=2)
    >>> tok = lock.acquire(ProcId(1, 0))
    >>> lock.release(tok)
"""

from __future__ import annotations

from . import mcs_cohort, peterson_global
from .asym_memory import NULL, ConcurrentMemory, Memory, ProcId, Ref
from .machine import Frame, Session, StepLock
from .mcs_cohort import WAITING, CohortHandle
from .peterson_global import GlobalLockState


def _ncs(s: Session, mem: Memory, f: Frame) -> Frame:
    return f.goto("enter")


def _enter(s: Session, mem: Memory, f: Frame) -> Frame:
    return f.goto("c1")


def _p2(s: Session, mem: Memory, f: Frame) -> Frame:
    if f.passed:
        return f.goto("cs")
    return f._replace(pc="g1", ret="cs")


def _cs(s: Session, mem: Memory, f: Frame) -> Frame:
    return f.goto("exit")


def _exit(s: Session, mem: Memory, f: Frame) -> Frame:
    return f.goto("r0")


BODY = {"ncs": _ncs, "enter": _enter, "p2": _p2, "cs": _cs, "exit": _exit}


class ALock(StepLock):
    handlers = {**BODY, **mcs_cohort.HANDLERS, **peterson_global.HANDLERS}
    spin_labels = mcs_cohort.SPIN_LABELS
    silent_labels = frozenset(
        {"enter", "cwait", "c5", "c7", "c9", "c10", "p2", "gwait", "g4", "exit", "r3"}
    )

    def __init__(
        self, mem: Memory, home: int = 0, k_init_budget: int = 1, victim: int = 0, swap: str = "cas_loop"
    ):
        """``swap="atomic"`` replaces the CAS retry loop that enqueues a
        descriptor with a single indivisible exchange.  No RDMA verb provides
        that, so it is only accepted on a stepwise ``Memory``, where one step
        is atomic by construction."""
        if k_init_budget < 1:
            raise ValueError("k_init_budget must be >= 1")
        if victim not in (0, 1):
            raise ValueError("victim must be 0 or 1")
        if swap not in ("cas_loop", "atomic"):
            raise ValueError("swap must be 'cas_loop' or 'atomic'")
        if swap == "atomic" and isinstance(mem, ConcurrentMemory):
            raise ValueError("an atomic swap cannot be built from thread-shared memory operations")
        super().__init__(mem, home)
        if swap == "atomic":
            self.handlers = {**self.handlers, "swap": mcs_cohort._swap_atomic}
        self.k_init_budget = k_init_budget
        victim_reg = mem.alloc_register(home, victim)
        local = CohortHandle(mem.alloc_register(home, NULL), k_init_budget, remote=False)
        remote = CohortHandle(mem.alloc_register(home, NULL), k_init_budget, remote=True)
        self.g = GlobalLockState((local, remote), victim_reg)
        local.glock = remote.glock = self.g

    def session(self, p: ProcId, reserve_descriptor: bool = False) -> Session:
        desc = Ref(self.mem.alloc_block(p.node, (WAITING, NULL))) if reserve_descriptor else None
        return Session(self, p, self.get_cid(p), desc)


def new_alock(memory: Memory, home: int = 0, k_init_budget: int = 1, victim: int = 0) -> ALock:
    return ALock(memory, home, k_init_budget, victim)
