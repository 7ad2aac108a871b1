"""Small deterministic discrete-event kernel with generator processes.

Processes are generators that yield :class:`Event` objects and are resumed
with the event's value once it fires. Events dispatch in ``(time, sequence)``
order; the sequence number is assigned when the event is scheduled, so
events at the same instant fire in scheduling order.
"""

from __future__ import annotations

import heapq
import logging
from collections import deque
from enum import Enum
from itertools import count

from .errors import ConfigError, DeadlockError

log = logging.getLogger(__name__)


class EventKind(Enum):
    TIMEOUT = "timeout-expiry"
    SIGNAL = "signal"
    INTERRUPT = "interrupt"


class ProcessState(Enum):
    RUNNABLE = "runnable"
    WAITING = "waiting"
    TERMINATED = "terminated"


class Interrupt(Exception):
    """Thrown into a process by :meth:`Engine.interrupt`."""

    @property
    def cause(self):
        return self.args[0]


class Event:
    __slots__ = ("engine", "kind", "label", "callbacks", "value",
                 "time", "sequence", "scheduled", "processed")

    def __init__(self, engine, kind=EventKind.SIGNAL, label=None):
        self.engine = engine
        self.kind = kind
        self.label = label
        self.callbacks = []
        self.value = None
        self.time = None
        self.sequence = None
        self.scheduled = False
        self.processed = False

    def succeed(self, value=None):
        """Fire the event at the current instant."""
        if self.scheduled:
            raise RuntimeError(f"event {self!r} already triggered")
        self.value = value
        self.engine._schedule(self, 0.0)
        return self

    def __repr__(self):
        return f"<Event {self.kind.value} {self.label or ''} t={self.time}>"


class Process:
    __slots__ = ("engine", "id", "name", "state", "_gen", "_target",
                 "_interrupts", "result")

    def __init__(self, engine, pid, gen, name=None):
        self.engine = engine
        self.id = pid
        self.name = name or f"process-{pid}"
        self.state = ProcessState.RUNNABLE
        self._gen = gen
        self._target = None
        self._interrupts = deque()
        self.result = None

    @property
    def alive(self):
        return self.state is not ProcessState.TERMINATED

    @property
    def target(self):
        return self._target

    def _resume(self, event):
        if self._interrupts:
            return  # the pending interrupt wins
        self._step(event.value, None)

    def _step(self, value, exc):
        self.state = ProcessState.RUNNABLE
        self._target = None
        try:
            if exc is None:
                ev = self._gen.send(value)
            else:
                ev = self._gen.throw(exc)
        except StopIteration as stop:
            self.state = ProcessState.TERMINATED
            self.result = stop.value
            self._interrupts.clear()
            return
        except Interrupt as raised:
            if raised is not exc:
                raise
            # interrupted before its first step: nothing to unwind
            self.state = ProcessState.TERMINATED
            self._interrupts.clear()
            return
        if not isinstance(ev, Event):
            raise TypeError(f"{self.name} yielded {ev!r}, expected an Event")
        self.state = ProcessState.WAITING
        self._target = ev
        if self._interrupts:
            self.engine._deliver_later(self)
        elif ev.processed:
            relay = Event(self.engine, EventKind.SIGNAL, "relay")
            relay.value = ev.value
            relay.callbacks.append(self._resume)
            self.engine._schedule(relay, 0.0)
        else:
            ev.callbacks.append(self._resume)

    def __repr__(self):
        return f"<Process {self.name} {self.state.value}>"


class Engine:
    """Virtual clock plus a heap of pending events."""

    def __init__(self):
        self._now = 0.0
        self._heap = []
        self._seq = count()
        self._pids = count()
        self._processes = []
        self._stopped = False
        self.dispatched = 0
        self.observer = None

    def now(self) -> float:
        return self._now

    def _schedule(self, event, delay):
        event.time = self._now + delay
        event.sequence = next(self._seq)
        event.scheduled = True
        heapq.heappush(self._heap, (event.time, event.sequence, event))

    def event(self, label=None) -> Event:
        return Event(self, EventKind.SIGNAL, label)

    def timeout(self, delay, value=None, label=None) -> Event:
        if delay < 0:
            raise ConfigError(f"negative delay {delay}")
        ev = Event(self, EventKind.TIMEOUT, label)
        ev.value = value
        self._schedule(ev, delay)
        return ev

    def schedule_timeout(self, process: Process, delay) -> Event:
        """Schedule a timeout whose expiry resumes ``process``."""
        if not process.alive:
            raise ValueError(f"{process!r} is terminated")
        ev = self.timeout(delay)
        ev.callbacks.append(process._resume)
        return ev

    def process(self, gen, name=None) -> Process:
        proc = Process(self, next(self._pids), gen, name)
        self._processes.append(proc)
        start = Event(self, EventKind.SIGNAL, f"start {proc.name}")
        start.callbacks.append(proc._resume)
        self._schedule(start, 0.0)
        return proc

    def interrupt(self, process: Process, cause=None) -> bool:
        """Abort the pending wait of ``process`` and throw ``Interrupt(cause)``.

        Delivery happens at the current instant. The process is detached from
        whatever it waited on right away, so nothing else can resume it
        first. Returns False (and logs a warning) for a terminated process.
        """
        if not process.alive:
            log.warning("interrupt of terminated %r ignored", process)
            return False
        process._interrupts.append(cause)
        if len(process._interrupts) == 1:
            self._deliver_later(process)
        return True

    def _deliver_later(self, process):
        target = process._target
        if target is not None and not target.processed:
            try:
                target.callbacks.remove(process._resume)
            except ValueError:
                pass
        process._target = None
        ev = Event(self, EventKind.INTERRUPT, f"interrupt {process.name}")
        ev.callbacks.append(lambda _ev, p=process: self._deliver(p))
        self._schedule(ev, 0.0)

    def _deliver(self, process):
        if not process.alive or not process._interrupts:
            return
        cause = process._interrupts.popleft()
        process._step(None, Interrupt(cause))

    def stop(self):
        """End :meth:`run_until_idle` after the current event."""
        self._stopped = True

    @property
    def processes(self):
        return list(self._processes)

    def run_until_idle(self) -> float:
        heap = self._heap
        observer = self.observer
        while heap and not self._stopped:
            time, _, event = heapq.heappop(heap)
            self._now = time
            event.processed = True
            callbacks, event.callbacks = event.callbacks, []
            for cb in callbacks:
                cb(event)
            self.dispatched += 1
            if observer is not None:
                observer(self)
        if not self._stopped:
            blocked = [p for p in self._processes
                       if p.state is ProcessState.WAITING]
            if blocked:
                edges = [(p.name, p._target.label if p._target else None)
                         for p in blocked]
                raise DeadlockError(
                    f"{len(blocked)} process(es) waiting with no pending "
                    f"events at t={self._now}", edges)
        return self._now

    run = run_until_idle
