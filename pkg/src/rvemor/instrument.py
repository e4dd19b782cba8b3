"""Lightweight instrumentation counters.

The online surrogate stage claims to be equation-free: it must commit exactly
one stress update per quadrature point per increment and never factorise or
solve a global system.  These counters make that claim checkable.  Every
global linear solve in the package goes through :func:`count_system_solve`
and every constitutive update batch reports its size through
:func:`count_stress_updates`.

Local 4x4 Newton solves inside the return mapping are part of a stress
update and are intentionally *not* counted as system solves.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass


@dataclass
class CounterState:
    system_solves: int = 0
    stress_updates: int = 0


_lock = threading.Lock()
_state = CounterState()


def count_system_solve(n: int = 1) -> None:
    with _lock:
        _state.system_solves += n


def count_stress_updates(n: int) -> None:
    with _lock:
        _state.stress_updates += n


def snapshot() -> CounterState:
    """Copy of the current counter values."""
    with _lock:
        return CounterState(_state.system_solves, _state.stress_updates)


def delta_since(before: CounterState) -> CounterState:
    now = snapshot()
    return CounterState(now.system_solves - before.system_solves,
                        now.stress_updates - before.stress_updates)


def reset() -> None:
    with _lock:
        _state.system_solves = 0
        _state.stress_updates = 0
