"""Guard/protectee ring, task logs, checkpoints, failures and rollback plans.

Recovery planning is pure: :func:`plan_default` and :func:`plan_dependency`
read a running :class:`~rollbacksim.runtime.Simulation` and return a
:class:`RecoveryPlan`; :func:`on_failure` applies one.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, UnsupportedFailure

log = logging.getLogger(__name__)


class Strategy(Enum):
    DEFAULT = "Default"
    DEPENDENCY = "Dependency"


# ring ---------------------------------------------------------------------

class RingAssignment:
    """Workers in a ring: each one's guard is its right-hand neighbour."""

    def __init__(self, workers: Sequence[int]):
        if len(workers) < 2:
            raise ConfigError(
                f"a guard/protectee ring needs at least 2 workers, "
                f"got {len(workers)}", key="WorkerCount")
        if len(set(workers)) != len(workers):
            raise ValueError("duplicate worker ids in ring")
        self.order = list(workers)
        self._rebuild()

    def _rebuild(self):
        w = len(self.order)
        self.guard = {self.order[i]: self.order[(i + 1) % w] for i in range(w)}
        self.protectee = {g: p for p, g in self.guard.items()}

    def replace(self, victim: int, replacement: int) -> None:
        """Splice ``replacement`` in between the victim's protectee and guard."""
        idx = self.order.index(victim)
        self.order[idx] = replacement
        self._rebuild()

    def check(self) -> None:
        members = set(self.order)
        assert set(self.guard) == members == set(self.guard.values())
        for a, b in self.guard.items():
            assert self.protectee[b] == a
        # single cycle
        start = self.order[0]
        seen, cur = {start}, self.guard[start]
        while cur != start:
            assert cur not in seen
            seen.add(cur)
            cur = self.guard[cur]
        assert seen == members


def assign_ring(workers: Sequence[int]) -> RingAssignment:
    return RingAssignment(workers)


# stores -------------------------------------------------------------------

class TaskLogStore:
    """Task closures logged by protectees, held in their guard's memory.

    Every attempt is kept: a worker may run several replays of one task and
    an older one can still be the task's global result.
    """

    def __init__(self):
        self._logs: dict[int, dict[int, dict[int, list]]] = {}
        self.count = 0

    def log(self, guard: int, protectee: int, index: int, instance) -> None:
        held = self._logs.setdefault(guard, {}).setdefault(protectee, {})
        held.setdefault(index, []).append(instance)
        self.count += 1

    def entries(self, guard: int, protectee: int) -> dict[int, list]:
        return self._logs.get(guard, {}).get(protectee, {})

    def transfer(self, old: int, new: int) -> None:
        held = self._logs.pop(old, None)
        if held:
            self._logs.setdefault(new, {}).update(held)


class CheckpointStore:
    """Entry-data checkpoints, double buffered per (guard, protectee, slot).

    A buffer keeps the two newest bands seen for its slot; storing a third
    band evicts the oldest one.
    """

    def __init__(self, generations: int = 2):
        self.generations = generations
        self._buf: dict[tuple[int, int, int], dict[int, dict[int, object]]] = {}
        self._where: dict[int, tuple[tuple[int, int, int], int]] = {}
        self.peak = 0

    def put(self, guard, protectee, slot, band, entry, stamp):
        """Store a record; return ``[(entry, stamp), ...]`` evicted by it."""
        self.discard(entry)
        key = (guard, protectee, slot)
        gens = self._buf.setdefault(key, {})
        gens.setdefault(band, {})[entry] = stamp
        self._where[entry] = (key, band)
        evicted = []
        while len(gens) > self.generations:
            old = min(gens)
            for e, s in gens.pop(old).items():
                del self._where[e]
                evicted.append((e, s))
        self.peak = max(self.peak, len(gens))
        return evicted

    def discard(self, entry) -> None:
        loc = self._where.pop(entry, None)
        if loc is None:
            return
        key, band = loc
        gens = self._buf[key]
        gens[band].pop(entry, None)
        if not gens[band]:
            del gens[band]

    def generations_in_use(self) -> int:
        return max((len(g) for g in self._buf.values()), default=0)

    def transfer(self, old: int, new: int) -> None:
        """Re-replicate everything ``old`` held onto ``new``."""
        moved = [k for k in self._buf if k[0] == old]
        for key in moved:
            gens = self._buf.pop(key)
            nkey = (new,) + key[1:]
            self._buf[nkey] = gens
            for band, recs in gens.items():
                for e in recs:
                    self._where[e] = (nkey, band)

    def holders(self) -> set[int]:
        return {k[0] for k in self._buf if self._buf[k]}


# failures -----------------------------------------------------------------

class FailureSchedule:
    """Poisson failure process: exponential gaps with mean ``mtbf``.

    Each failure also carries a uniform draw ``u`` in [0, 1); the victim is
    live worker number ``int(u * live_count)``.
    """

    def __init__(self, mtbf: float, seed: int):
        if mtbf <= 0:
            raise ConfigError(f"MTBF must be positive, got {mtbf}", key="MTBF")
        self.mtbf = float(mtbf)
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._time = 0.0

    def __iter__(self):
        return self

    def __next__(self) -> tuple[float, float]:
        self._time += float(self._rng.exponential(self.mtbf))
        return self._time, float(self._rng.random())

    @staticmethod
    def victim_slot(u: float, live_count: int) -> int:
        return min(int(u * live_count), live_count - 1)


def generate_failures(mtbf: float, seed: int, horizon: float,
                      worker_count: int | None = None,
                      enabled: bool = True) -> list[tuple[float, float | int]]:
    """All failures before ``horizon``.

    Entries are ``(time, u)``, or ``(time, slot)`` when ``worker_count`` is
    given.
    """
    if not enabled:
        return []
    out = []
    for time, u in FailureSchedule(mtbf, seed):
        if time >= horizon:
            break
        out.append((time, u if worker_count is None
                    else FailureSchedule.victim_slot(u, worker_count)))
    return out


# rollback sets -------------------------------------------------------------

def ancestors(targets: Iterable[int], deps: Sequence[Sequence[int]]) -> set[int]:
    """Reflexive-transitive dependencies of ``targets``."""
    seen = set(targets)
    stack = list(seen)
    while stack:
        v = stack.pop()
        for u in deps[v]:
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return seen


def baseline(l1: Iterable[int], deps: Sequence[Sequence[int]],
             unit: Sequence[int], has_record: Callable[[int], bool]) -> set[int]:
    """Local checkpoint baseline that reproduces the tasks in ``l1``.

    Walk dependencies backwards from each failed task. A task whose entry
    checkpoint is stored belongs to the baseline and only its dependencies
    inside its own checkpoint triangle are followed further. A task with no
    dependencies reads initial data and is a baseline task too.
    """
    base = set()
    seen = set(l1)
    stack = list(seen)
    while stack:
        v = stack.pop()
        d = deps[v]
        if not d:
            base.add(v)
            continue
        if has_record(v):
            base.add(v)
            d = [u for u in d if unit[u] == unit[v]]
        for u in d:
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return base


def compute_L3(l1: Iterable[int], l2: Iterable[int],
               deps: Sequence[Sequence[int]],
               dependents: Sequence[Sequence[int]]) -> set[int]:
    """Tasks ``t3`` with ``t1 ⊒ t3 ⊒ t2`` for some ``t1`` in L1, ``t2`` in L2.

    ``⊒`` is the reflexive-transitive depends-on relation, so the result is
    every task on a dataflow path from a baseline task to a failed task.
    """
    up = ancestors(l1, deps)
    start = [t for t in l2 if t in up]
    out = set(start)
    stack = list(start)
    while stack:
        v = stack.pop()
        for w in dependents[v]:
            if w in up and w not in out:
                out.add(w)
                stack.append(w)
    return out


@dataclass
class RecoveryPlan:
    strategy: Strategy
    time: float
    victim: int
    b_star: int
    L1: set[int] = field(default_factory=set)
    L2: set[int] = field(default_factory=set)
    L3: set[int] = field(default_factory=set)
    cancel: list[int] = field(default_factory=list)
    lost_replays: list = field(default_factory=list)

    def task_ids(self, kernel, name: str):
        return {kernel.task_id(i) for i in getattr(self, name)}


def secured_band(sim) -> int:
    return sim.b_star


def compute_L1(sim, victim, b_star: int | None = None) -> set[int]:
    """Started tasks of ``victim`` whose output is not backed up.

    Read from the task logs held by the victim's guard. A completed task
    counts as backed up once its band is at or below the secured band.
    """
    if b_star is None:
        b_star = sim.b_star
    if sim.ring is None:
        return set()
    guard = sim.ring.guard[victim.id]
    band = sim.kernel.band
    out = set()
    for i, insts in sim.logs.entries(guard, victim.id).items():
        for inst in insts:
            if inst is victim.current and inst.status is sim.RUNNING:
                if not inst.is_replay:
                    out.add(i)
            elif sim.current[i] is inst and sim.signals[i].done \
                    and band[i] > b_star:
                out.add(i)
    return out


def compute_L2(sim, l1: Iterable[int]) -> set[int]:
    k = sim.kernel
    if sim.checkpointing:
        avail = sim.available
        return baseline(l1, k.deps, k.unit, lambda v: avail[v] is not None)
    return baseline(l1, k.deps, k.unit, lambda v: False)


def _lost_replays(sim, victim) -> list:
    """Replays from earlier recoveries whose results died with ``victim``."""
    lost = []
    for group in sim.open_groups():
        by_signal = {id(r.signal): r for r in group.replays.values()}
        todo = []
        for r in group.replays.values():
            if r.worker == victim.id and r.status is sim.RUNNING:
                todo.append(r)
        for q in group.replays.values():
            if q.status in (sim.PENDING, sim.WAITING, sim.FETCHING):
                for sig in q.wait_on:
                    r = by_signal.get(id(sig))
                    if r is not None and r.status is sim.COMPLETED \
                            and r.signal.producer == victim.id:
                        todo.append(r)
        picked = {}
        while todo:
            r = todo.pop()
            if id(r) in picked:
                continue
            picked[id(r)] = r
            for sig in r.wait_on:
                p = by_signal.get(id(sig))
                if p is not None and p.status is sim.COMPLETED \
                        and p.signal.producer == victim.id:
                    todo.append(p)
        lost.extend(sorted(picked.values(), key=lambda r: r.rank))
    return lost


def plan_default(sim, victim) -> RecoveryPlan:
    """Roll every band past the last consistent checkpoint back."""
    b_star = sim.b_star
    plan = RecoveryPlan(Strategy.DEFAULT, sim.engine.now(), victim.id, b_star)
    plan.L1 = compute_L1(sim, victim, b_star)
    k = sim.kernel
    first = b_star * (k.size // max(k.band_count, 1))
    cancel = {i for i in range(first, k.size) if sim.signals[i].done}
    for w in sim.alive_workers(include=victim):
        inst = w.current
        if inst is not None and inst.status is sim.RUNNING:
            if k.band[inst.index] > b_star or w is victim:
                cancel.add(inst.index)
    plan.cancel = sorted(cancel, key=k.rank.__getitem__)
    return plan


def plan_dependency(sim, victim) -> RecoveryPlan:
    """Replay only the tasks needed to rebuild the victim's lost work."""
    b_star = sim.b_star
    plan = RecoveryPlan(Strategy.DEPENDENCY, sim.engine.now(), victim.id,
                        b_star)
    k = sim.kernel
    plan.L1 = compute_L1(sim, victim, b_star)
    plan.L2 = compute_L2(sim, plan.L1)
    plan.L3 = compute_L3(plan.L1, plan.L2, k.deps, k.dependents)
    plan.lost_replays = _lost_replays(sim, victim)
    return plan


def default_rollback(sim, victim) -> RecoveryPlan:
    return plan_default(sim, victim)


def dependency_rollback(sim, victim) -> RecoveryPlan:
    return plan_dependency(sim, victim)


def on_failure(sim, slot: int) -> RecoveryPlan:
    """Fail the worker in ``slot``, replace it and apply the rollback plan.

    Runs inside one engine callback, so no other worker event is dispatched
    between the failure and the end of recovery.
    """
    victim = sim.slots[slot]
    if not victim.alive:
        raise UnsupportedFailure(f"worker {victim.id} already failed")
    now = sim.engine.now()
    if sim.strategy is Strategy.DEFAULT:
        plan = plan_default(sim, victim)
    else:
        plan = plan_dependency(sim, victim)

    replacement = sim.replace_worker(victim)
    sim.trace.record(now, victim.id, "failure", detail=str(replacement.id))
    sim.trace.record(now, None, "recovery-begin",
                     detail=f"{plan.strategy.value} B*={plan.b_star}")
    if sim.ring is not None:
        sim.ring.replace(victim.id, replacement.id)
        sim.logs.transfer(victim.id, replacement.id)
        sim.checkpoints.transfer(victim.id, replacement.id)

    sim.release_holds()
    if plan.strategy is Strategy.DEFAULT:
        sim.apply_cancellation(plan.cancel, victim)
    else:
        sim.apply_replay(plan, victim)
    sim.start_worker(replacement)
    sim.plans.append(plan)
    sim.trace.record(now, None, "recovery-end",
                     detail=f"cancel={len(plan.cancel)} L3={len(plan.L3)}")
    return plan
