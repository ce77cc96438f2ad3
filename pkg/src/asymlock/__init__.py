"""Asymmetric mutual exclusion for RDMA, with a simulated memory and a checker."""

from .alock import ALock, new_alock
from .asym_memory import (
    NULL,
    Backend,
    ConcurrentMemory,
    LocalityViolation,
    Memory,
    OpMetrics,
    ProcId,
    Ref,
    RegisterId,
)
from .machine import LockMisuse, Token

__all__ = [
    "ALock",
    "Backend",
    "ConcurrentMemory",
    "LocalityViolation",
    "LockMisuse",
    "Memory",
    "NULL",
    "OpMetrics",
    "ProcId",
    "Ref",
    "RegisterId",
    "Token",
    "new_alock",
]
