"""Workers pulling stencil tasks from a global queue on the event engine.

Each worker is one engine process running :func:`worker_loop`: pop the head
of the queue, wait for the task's inputs, fetch remote inputs, log the task
closure to its guard, send an entry checkpoint when the task is an entry of
its checkpoint triangle, then process it. Recovery (see
:mod:`rollbacksim.resilience`) runs inside a single engine callback and uses
the hooks at the bottom of :class:`Simulation`.
"""

from __future__ import annotations

import heapq
from collections import deque
from enum import Enum
from itertools import count

from .engine import Engine, Interrupt
from .errors import DeadlockError, IntegrityError
from .metrics import RunSummary, Trace, summarize
from .resilience import (CheckpointStore, FailureSchedule, RingAssignment,
                         Strategy, TaskLogStore, on_failure)
from .stencil import StencilKernel


class Status(Enum):
    PENDING = "PENDING"
    WAITING = "WAITING"
    FETCHING = "FETCHING"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    CANCELLED = "CANCELLED"


PENDING, WAITING, FETCHING, RUNNING, COMPLETED, CANCELLED = Status
HELD = (WAITING, FETCHING)

IDLE = "idle"
WAIT = "waiting"
COMM = "checkpointing_and_comm"
PROC = "processing"
RECOMP = "recompute"


class Signal:
    """Completion flag of one task result (global or replica)."""

    __slots__ = ("engine", "done", "producer", "time", "waiters")

    def __init__(self, engine):
        self.engine = engine
        self.done = False
        self.producer = None
        self.time = None
        self.waiters = []

    def wait(self):
        ev = self.engine.event("signal")
        self.waiters.append(ev)
        return ev

    def complete(self, producer):
        self.done = True
        self.producer = producer
        self.time = self.engine._now
        waiters, self.waiters = self.waiters, []
        for ev in waiters:
            if not ev.scheduled:
                ev.succeed()

    def reset(self):
        self.done = False
        self.producer = None
        self.time = None


class TaskInstance:
    """One attempt at executing a task; replays run on data replicas."""

    __slots__ = ("kernel", "index", "attempt", "status", "worker", "is_replay",
                 "enqueue_time", "start_time", "finish_time", "wait_on",
                 "ckpt_reads", "signal", "rank", "group")

    def __init__(self, kernel, index, attempt, wait_on, is_replay=False,
                 signal=None, ckpt_reads=0, group=None):
        self.kernel = kernel
        self.index = index
        self.attempt = attempt
        self.status = PENDING
        self.worker = None
        self.is_replay = is_replay
        self.enqueue_time = None
        self.start_time = None
        self.finish_time = None
        self.wait_on = wait_on
        self.ckpt_reads = ckpt_reads
        self.signal = signal
        self.rank = kernel.rank[index]
        self.group = group

    @property
    def id(self):
        return self.kernel.task_id(self.index)

    def __repr__(self):
        tag = "replay" if self.is_replay else f"a{self.attempt}"
        return f"<{self.id!r} {tag} {self.status.value}>"


class GlobalQueue:
    """Shared queue ordered by scheduling rank, then by enqueue order.

    Initial tasks go in horizontal order, so pops are FIFO; requeued
    instances land at their horizontal position. Entries whose status is no
    longer PENDING are skipped lazily. Blocked workers are served FIFO.
    """

    def __init__(self, engine, capacity):
        self.engine = engine
        self.capacity = capacity
        self._heap = []
        self._seq = count()
        self.getters = deque()
        self.suspended = False
        self.closed = False
        self.pops = 0

    def put(self, inst):
        inst.enqueue_time = self.engine._now
        heapq.heappush(self._heap, (inst.rank, next(self._seq), inst))
        if self.getters and not self.suspended:
            self.dispatch()

    def _next(self):
        heap = self._heap
        while heap:
            inst = heapq.heappop(heap)[2]
            if inst.status is PENDING:
                return inst
        return None

    def try_pop(self, worker):
        if self.getters and not self.suspended:
            self.dispatch()
        if self.getters or self.suspended:
            return None
        inst = self._next()
        if inst is not None:
            self.pops += 1
            worker.hold(inst)
        return inst

    def request(self, worker):
        ev = self.engine.event("pop")
        self.getters.append((worker, ev))
        return ev

    def cancel_get(self, worker):
        self.getters = deque(g for g in self.getters if g[0] is not worker)

    def dispatch(self):
        while self.getters:
            inst = self._next()
            if inst is None:
                return
            worker, ev = self.getters.popleft()
            self.pops += 1
            worker.hold(inst)
            ev.succeed(inst)

    def resume(self):
        self.suspended = False
        self.dispatch()

    def pending(self):
        return sum(1 for _, _, inst in self._heap if inst.status is PENDING)

    def close(self):
        self.closed = True
        self.getters.clear()


class CostModel:
    __slots__ = ("process_cost", "backup_cost", "log_cost", "fetch_cost")

    def __init__(self, process_cost, backup_cost, log_cost=0.0,
                 fetch_cost=None):
        self.process_cost = float(process_cost)
        self.backup_cost = float(backup_cost)
        self.log_cost = float(log_cost)
        self.fetch_cost = float(backup_cost if fetch_cost is None
                                else fetch_cost)
        for name in self.__slots__:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_config(cls, config):
        return cls(config.process_cost, config.backup_cost, config.log_cost,
                   config.fetch_cost)


class WorkerState:
    __slots__ = ("id", "slot", "alive", "current", "process", "join_time",
                 "category", "phase_start", "times", "completed")

    def __init__(self, wid, slot, now):
        self.id = wid
        self.slot = slot
        self.alive = True
        self.current = None
        self.process = None
        self.join_time = now
        self.category = IDLE
        self.phase_start = now
        self.times = dict.fromkeys((PROC, RECOMP, COMM, WAIT, IDLE), 0.0)
        self.completed = 0

    def hold(self, inst):
        inst.status = WAITING
        inst.worker = self.id
        self.current = inst

    def __repr__(self):
        return f"<Worker {self.id} slot={self.slot} alive={self.alive}>"


class ReplayGroup:
    """Replays created by one dependency-aware recovery."""

    def __init__(self, plan):
        self.plan = plan
        self.replays: dict[int, TaskInstance] = {}

    @property
    def open(self):
        return any(r.status is not COMPLETED and r.status is not CANCELLED
                   for r in self.replays.values())


class Simulation:
    PENDING, WAITING, FETCHING, RUNNING, COMPLETED, CANCELLED = Status

    def __init__(self, config, keep_trace=False, kernel=None):
        self.config = config
        self.kernel = kernel or StencilKernel(config.grid,
                                              config.checkpoint_level)
        k = self.kernel
        self.costs = CostModel.from_config(config)
        self.engine = Engine()
        self.trace = Trace(keep=keep_trace)
        self.strategy = Strategy(config.recovery)
        self.checkpointing = bool(config.checkpoint)
        self.size = k.size

        eng = self.engine
        self.signals = [Signal(eng) for _ in range(k.size)]
        self.dep_signals = [tuple(self.signals[u] for u in d) for d in k.deps]
        self.current: list[TaskInstance | None] = [None] * k.size
        self.instance: list[TaskInstance | None] = [None] * k.size
        self.attempts = [0] * k.size
        self.done_count = 0
        self.history = []  # (index, start, finish, is_replay, worker)
        self._tids = [k.task_id(i) for i in range(k.size)]

        # checkpoint bookkeeping
        self.available: list[object | None] = [None] * k.size
        self.recorded = [False] * k.size
        self._unit_have = [0] * k.unit_count
        self._unit_need = [len(e) for e in k.unit_entries]
        self.secured = [False] * k.unit_count
        self._band_secured = [0] * (k.band_count + 2)
        self.b_star = 0
        self.logs = TaskLogStore()
        self.checkpoints = CheckpointStore(2)

        w = config.worker_count
        self.queue = GlobalQueue(eng, w)
        self._wids = count()
        self.slots: list[WorkerState] = []
        self.workers: dict[int, WorkerState] = {}
        for slot in range(w):
            self.slots.append(self._new_worker(slot))
        self.ring = (RingAssignment([x.id for x in self.slots])
                     if w >= 2 else None)
        self.groups: list[ReplayGroup] = []
        self.plans = []
        self.finished = False
        self.makespan = None

    # -- helpers -------------------------------------------------------------

    def _new_worker(self, slot):
        w = WorkerState(next(self._wids), slot, self.engine._now)
        self.workers[w.id] = w
        self.trace.record(self.engine._now, w.id, "join")
        return w

    def _tid(self, i):
        return self._tids[i]

    def _close(self, w, kind, inst=None, detail=""):
        """End the worker's current phase with a trace event."""
        now = self.engine._now
        dur = now - w.phase_start
        w.times[w.category] += dur
        if inst is None:
            self.trace.record(now, w.id, kind, category=w.category,
                              duration=dur, detail=detail)
        else:
            self.trace.record(now, w.id, kind, self._tids[inst.index],
                              inst.attempt, inst.is_replay, w.category, dur,
                              detail)
        w.phase_start = now

    def _enqueue(self, inst, kind="enqueue"):
        self.trace.record(self.engine._now, None, kind,
                          self._tids[inst.index], inst.attempt,
                          inst.is_replay)
        self.queue.put(inst)

    def _new_original(self, i):
        self.attempts[i] += 1
        inst = TaskInstance(self.kernel, i, self.attempts[i],
                            self.dep_signals[i])
        self.instance[i] = inst
        return inst

    def alive_workers(self, include=None):
        out = [w for w in self.slots if w.alive]
        if include is not None and include not in out:
            out.append(include)
        return out

    def open_groups(self):
        return [g for g in self.groups if g.open]

    # -- worker process ------------------------------------------------------

    def start_worker(self, w):
        w.process = self.engine.process(self.worker_loop(w), f"worker-{w.id}")
        self.queue.resume()
        return w.process

    def worker_loop(self, w):
        while not self.finished:
            try:
                yield from self._serve(w)
            except Interrupt as exc:
                if exc.cause == "kill":
                    return

    def pop_next(self, w):
        """Take the head instance, blocking (idle) while the queue is empty."""
        inst = self.queue.try_pop(w)
        if inst is None:
            inst = yield self.queue.request(w)
        self._close(w, "pop", inst)
        return inst

    def _serve(self, w):
        inst = yield from self.pop_next(w)
        eng = self.engine
        costs = self.costs
        i = inst.index

        waited = False
        for sig in inst.wait_on:
            while not sig.done:
                if not waited:
                    waited = True
                    w.category = WAIT
                    self.trace.record(eng._now, w.id, "wait-begin",
                                      self._tids[i], inst.attempt,
                                      inst.is_replay)
                yield sig.wait()
        if waited:
            self._close(w, "wait-end", inst)

        inst.status = FETCHING
        w.category = COMM
        remote = inst.ckpt_reads
        for sig in inst.wait_on:
            if sig.producer != w.id:
                remote += 1
        if remote and costs.fetch_cost > 0:
            yield eng.timeout(remote * costs.fetch_cost)
            self._close(w, "fetch", inst, str(remote))

        if self.ring is not None:
            if costs.log_cost > 0:
                yield eng.timeout(costs.log_cost)
            self.logs.log(self.ring.guard[w.id], w.id, i, inst)
            self._close(w, "log", inst)

        if (self.checkpointing and self.kernel.is_entry[i]
                and not inst.is_replay):
            if costs.backup_cost > 0:
                yield eng.timeout(costs.backup_cost)
            self._record_checkpoint(w, inst)
            self._close(w, "checkpoint", inst)

        inst.status = RUNNING
        inst.start_time = eng._now
        w.category = RECOMP if (inst.is_replay or inst.attempt > 1) else PROC
        self.trace.record(eng._now, w.id, "run-begin", self._tids[i],
                          inst.attempt, inst.is_replay)
        yield eng.timeout(costs.process_cost)
        self._close(w, "run-end", inst)
        w.category = IDLE
        w.current = None
        w.completed += 1
        self._complete(w, inst)

    def _complete(self, w, inst):
        i = inst.index
        now = self.engine._now
        inst.status = COMPLETED
        inst.finish_time = now
        self.history.append((i, inst.start_time, now, inst.is_replay, w.id))
        sig = self.signals[i]
        if inst.is_replay:
            inst.signal.complete(w.id)
            if sig.done:
                return
        elif sig.done:
            raise IntegrityError(f"{inst!r} completed twice")
        self.current[i] = inst
        sig.complete(w.id)
        self.done_count += 1
        if self.done_count == self.size:
            self._finish()

    def _finish(self):
        self.finished = True
        now = self.engine._now
        for w in self.slots:
            if not w.alive:
                continue
            inst = w.current
            if inst is not None:
                self._close(w, "abort", inst, "run complete")
                inst.status = CANCELLED
                w.current = None
            else:
                self._close(w, "idle")
        self.queue.close()
        self.makespan = now
        self.trace.record(now, None, "end")
        self.engine.stop()

    # -- checkpoints ---------------------------------------------------------

    def _record_checkpoint(self, w, inst):
        k = self.kernel
        i = inst.index
        if self.ring is None:
            return
        guard = self.ring.guard[w.id]
        u = k.unit[i]
        evicted = self.checkpoints.put(guard, w.id, k.unit_slot[u], k.band[i],
                                       i, inst)
        for e, _ in evicted:
            self.available[e] = None
        self.available[i] = inst
        if not self.recorded[i]:
            self.recorded[i] = True
            self._unit_have[u] += 1
            if self._unit_have[u] == self._unit_need[u]:
                self.secured[u] = True
                self._band_secured[k.unit_band[u]] += 1
                self._advance_b_star()

    def _advance_b_star(self):
        k = self.kernel
        while (self.b_star < k.band_count
               and self._band_secured[self.b_star + 1] == k.units_per_band):
            self.b_star += 1

    def _drop_record(self, j):
        k = self.kernel
        if not self.recorded[j]:
            return
        self.recorded[j] = False
        self.available[j] = None
        self.checkpoints.discard(j)
        u = k.unit[j]
        self._unit_have[u] -= 1
        if self.secured[u]:
            self.secured[u] = False
            self._band_secured[k.unit_band[u]] -= 1
            if k.unit_band[u] <= self.b_star:
                raise IntegrityError(
                    f"secured band {self.b_star} lost a record of "
                    f"{self._tid(j)!r}")

    def _invalidate_consumers(self, i):
        """Drop entry records that captured the output of task ``i``."""
        k = self.kernel
        ui = k.unit[i]
        for j in k.dependents[i]:
            if k.is_entry[j] and k.unit[j] != ui:
                self._drop_record(j)

    # -- recovery hooks --------------------------------------------------------

    def _abort_worker(self, w, kind, cause):
        inst = w.current
        self._close(w, kind, inst)
        w.category = IDLE
        w.current = None
        self.queue.cancel_get(w)
        self.engine.interrupt(w.process, cause)

    def replace_worker(self, victim):
        """Retire ``victim`` and put a fresh worker into its slot."""
        self.queue.suspended = True
        now = self.engine._now
        inst = victim.current
        self._close(victim, "abort", inst, "failure")
        self.trace.record(now, victim.id, "leave")
        victim.alive = False
        self.queue.cancel_get(victim)
        if victim.process is not None:
            self.engine.interrupt(victim.process, "kill")
        if inst is not None and inst.status in HELD:
            inst.status = PENDING
            inst.worker = None
            victim.current = None
            self._enqueue(inst)
        repl = self._new_worker(victim.slot)
        self.slots[victim.slot] = repl
        return repl

    def release_holds(self):
        """Put every popped-but-not-running instance back into the queue."""
        for w in self.slots:
            inst = w.current
            if w.alive and inst is not None and inst.status in HELD:
                self._abort_worker(w, "release", "release")
                inst.status = PENDING
                inst.worker = None
                self._enqueue(inst)

    def _cancel_running(self, inst, victim):
        w = self.workers[inst.worker]
        if w is not victim and w.alive:
            self._abort_worker(w, "abort", "cancel")
        elif w is victim:
            victim.current = None
        inst.status = CANCELLED

    def apply_cancellation(self, cancel, victim):
        now = self.engine._now
        for i in cancel:
            sig = self.signals[i]
            if sig.done:
                old = self.current[i]
                sig.reset()
                self.current[i] = None
                self.done_count -= 1
                self._invalidate_consumers(i)
            else:
                old = self.instance[i]
                if old is None or old.status is not RUNNING:
                    raise IntegrityError(
                        f"cancel of {self._tid(i)!r} that never started")
                self._cancel_running(old, victim)
            self.trace.record(now, None, "cancel", self._tids[i],
                              old.attempt, old.is_replay)
            self._enqueue(self._new_original(i))

    def apply_replay(self, plan, victim):
        k = self.kernel
        now = self.engine._now
        for r in plan.lost_replays:
            g = r.group
            if r.status is RUNNING:
                self._cancel_running(r, victim)
            self.trace.record(now, None, "cancel", self._tids[r.index],
                              r.attempt, True)
            # a promoted replay not in L1 stays the global result; only the
            # group's copy is rebuilt
            if self.current[r.index] is not r:
                r.status = CANCELLED
            r.signal.reset()
            self.attempts[r.index] += 1
            r2 = TaskInstance(k, r.index, self.attempts[r.index], r.wait_on,
                              True, r.signal, r.ckpt_reads, g)
            g.replays[r.index] = r2
            self._enqueue(r2, "replay-enqueue")

        was_done = {i: self.signals[i].done for i in plan.L3}
        for i in plan.L1:
            sig = self.signals[i]
            if sig.done:
                sig.reset()
                self.current[i] = None
                self.done_count -= 1

        group = ReplayGroup(plan)
        L2 = plan.L2
        L3 = plan.L3
        for i in sorted(L3, key=k.rank.__getitem__):
            started = was_done[i]
            orig = self.instance[i]
            if orig is not None:
                if orig.status is RUNNING:
                    started = True
                    self._cancel_running(orig, victim)
                    self.trace.record(now, None, "abort", self._tids[i],
                                      orig.attempt, False, detail="replayed")
                elif orig.status is PENDING:
                    orig.status = CANCELLED  # superseded by the replay
            if started:
                self.trace.record(now, None, "cancel", self._tids[i],
                                  orig.attempt if orig else None)
            wait_on = []
            reads = 0
            for u in k.deps[i]:
                if u in L3:
                    wait_on.append(group.replays[u].signal)
                elif i in L2 and k.unit[u] != k.unit[i]:
                    reads += 1
                else:
                    wait_on.append(self.signals[u])
            self.attempts[i] += 1
            r = TaskInstance(k, i, self.attempts[i], tuple(wait_on), True,
                             Signal(self.engine), reads, group)
            group.replays[i] = r
            self._enqueue(r, "replay-enqueue")
        if group.replays:
            self.groups.append(group)

    # -- driver ----------------------------------------------------------------

    def _failure_process(self):
        sched = FailureSchedule(self.config.mtbf, self.config.seed)
        for time, u in sched:
            yield self.engine.timeout(time - self.engine._now)
            if self.finished:
                return
            if self._stalled():
                raise DeadlockError(
                    f"no worker can make progress at t={self.engine._now}",
                    [(w.id, repr(w.current)) for w in self.slots])
            slot = FailureSchedule.victim_slot(u, len(self.slots))
            on_failure(self, slot)

    def _stalled(self):
        for w in self.slots:
            if w.alive and w.current is not None \
                    and w.current.status in (RUNNING, FETCHING):
                return False
        return True

    def run(self) -> RunSummary:
        if self.size == 0:
            self.makespan = 0.0
            self.trace.record(0.0, None, "end")
        else:
            for i in self.kernel.order:
                self.queue.put(self._new_original(i))
            self.trace.record(0.0, None, "enqueue",
                              detail=f"{self.size} tasks")
            for w in self.slots:
                self.start_worker(w)
            if self.config.fail:
                self.engine.process(self._failure_process(), "failures")
            self.engine.run_until_idle()
            if not self.finished:
                raise DeadlockError("engine idle before all tasks completed",
                                    [])
        return self.summary()

    def summary(self) -> RunSummary:
        extra = {
            "checkpoint_level": self.kernel.level,
            "triangles": self.kernel.unit_count,
            "b_star": self.b_star,
            "max_generations": self.checkpoints.peak,
            "workers_final": [w.id for w in self.slots],
            "events": self.engine.dispatched,
        }
        return summarize(self.trace, seed=self.config.seed,
                         config=self.config.as_dict(), extra=extra)

    # -- checks ----------------------------------------------------------------

    def check_invariants(self):
        """Raise IntegrityError if a finished run broke a runtime invariant."""
        k = self.kernel
        for i in range(k.size):
            c = self.current[i]
            if c is None or c.status is not COMPLETED:
                raise IntegrityError(f"{self._tid(i)!r} has no completed "
                                     f"current attempt")
        finishes: dict[int, float] = {}
        for i, _, finish, _, _ in self.history:
            if finish < finishes.get(i, float("inf")):
                finishes[i] = finish
        for i, start, _, _, _ in self.history:
            for u in k.deps[i]:
                if finishes.get(u, float("inf")) > start:
                    raise IntegrityError(
                        f"{self._tid(i)!r} started at {start} before "
                        f"{self._tid(u)!r} completed")
        for w in list(self.workers.values()):
            life = (self.makespan if w.alive else None)
            if life is not None:
                total = sum(w.times.values())
                if abs(total - (life - w.join_time)) > 1e-6 * max(1, life):
                    raise IntegrityError(f"accounting of worker {w.id} off")
        if self.ring is not None:
            self.ring.check()
        if self.checkpoints.peak > 2:
            raise IntegrityError("double buffer exceeded")


def run_simulation(config, keep_trace=False) -> RunSummary:
    return Simulation(config, keep_trace=keep_trace).run()


def fairness_report(summary: RunSummary) -> dict[int, int]:
    return dict(sorted(summary.worker_tasks.items()))


def worker_loop(sim: Simulation, worker: WorkerState):
    return sim.worker_loop(worker)


def pop_next(sim: Simulation, worker: WorkerState):
    return sim.pop_next(worker)
