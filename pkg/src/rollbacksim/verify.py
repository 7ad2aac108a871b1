"""Independent oracles used by ``rollbacksim verify`` and the test suite.

Each oracle recomputes a quantity from first principles (explicit column
ranges, explicit transitive closures, a plain list scheduler) instead of
calling the optimized code it checks.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

from .config import SimConfig
from .errors import ConfigError
from .resilience import compute_L3, plan_dependency
from .runtime import Simulation
from .stencil import (GridSpec, StencilKernel, TaskId, dependencies_of,
                      tc_tiling)


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


# geometry -----------------------------------------------------------------

def triangle_members(grid: GridSpec, level: int) -> dict[tuple[int, int], set]:
    """Checkpoint triangles built from explicit column ranges.

    In band row ``tau`` (1..h) the UP triangle ``j`` covers columns
    ``2hj + tau .. 2hj + 2h - tau`` and the DOWN triangle ``j`` covers the
    ``2 tau - 1`` columns right after it, wrapping around.
    """
    h = 2 ** (level - 1)
    s = grid.space_size
    out: dict[tuple[int, int], set] = {}
    for band in range(1, grid.time_steps // h + 1):
        for j in range(s // (2 * h)):
            up, down = set(), set()
            for tau in range(1, h + 1):
                t = (band - 1) * h + tau
                for col in range(2 * h * j + tau, 2 * h * j + 2 * h - tau + 1):
                    up.add(TaskId(t, col))
                for off in range(2 * tau - 1):
                    col = (2 * h * j + 2 * h - tau + off) % s + 1
                    down.add(TaskId(t, col))
            out[(band, 2 * j)] = up
            out[(band, 2 * j + 1)] = down
    return out


def check_tiling(grid: GridSpec, level: int) -> Check:
    name = f"tiling {grid.time_steps}x{grid.space_size} level {level}"
    expected = triangle_members(grid, level)
    tiles = tc_tiling(grid, level)
    got = {t.key: set(t.members) for t in tiles}
    if got != expected:
        bad = sorted(k for k in set(got) | set(expected)
                     if got.get(k) != expected.get(k))[:3]
        return Check(name, False, f"triangles differ at {bad}")
    seen = set()
    for members in expected.values():
        if seen & members or len(members) != 4 ** (level - 1):
            return Check(name, False, "not a partition into equal triangles")
        seen |= members
    if len(seen) != grid.task_count:
        return Check(name, False, "tasks left uncovered")
    for tile in tiles:
        brute = {v for v in tile.members
                 if not dependencies_of(v, grid)
                 or any(u not in tile.members for u in dependencies_of(v, grid))}
        if brute != set(tile.entry_tasks):
            return Check(name, False, f"entry set of {tile.key} differs")
    kernel = StencilKernel(grid, level)
    for tile in tiles:
        for v in tile.members:
            i = kernel.index(v)
            if kernel.is_entry[i] != (v in tile.entry_tasks):
                return Check(name, False, f"kernel entry flag of {v!r}")
    return Check(name, True, f"{len(tiles)} triangles")


TABLE1 = {1: 65536, 2: 16384, 3: 4096, 4: 1024, 5: 256, 6: 64}


def check_table1() -> Check:
    grid = GridSpec(256, 256)
    got = {c: len(tc_tiling(grid, c)) for c in TABLE1}
    return Check("triangle counts 256x256 levels 1..6", got == TABLE1,
                 str(got))


# reachability -------------------------------------------------------------

def closure(deps) -> list[frozenset]:
    """``anc[v]``: every task ``v`` depends on, reflexively and transitively."""
    n = len(deps)
    anc: list[frozenset | None] = [None] * n
    for v in range(n):
        seen = {v}
        stack = [v]
        while stack:
            x = stack.pop()
            for u in deps[x]:
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        anc[v] = frozenset(seen)
    return anc


def brute_L3(l1, l2, anc) -> set[int]:
    """Literal reading: t3 with t1 depending on t3 and t3 depending on t2."""
    out = set()
    for t3 in range(len(anc)):
        if any(t3 in anc[t1] for t1 in l1) and \
                any(t2 in anc[t3] for t2 in l2):
            out.add(t3)
    return out


def l3_event_oracle(config: SimConfig, stride: int = 1,
                    anc=None) -> tuple[int, list[str]]:
    """Plan a dependency-aware recovery for every live worker at every
    ``stride``-th event of a run and compare its L3 with the brute force.

    Plans are computed only; nothing is applied. Returns the number of
    plans checked and a list of mismatch descriptions.
    """
    sim = Simulation(config.with_values(recovery="Dependency"))
    k = sim.kernel
    anc = anc or closure(k.deps)
    mismatches: list[str] = []
    checked = 0

    def observe(engine):
        nonlocal checked
        if engine.dispatched % stride or sim.finished:
            return
        for w in sim.slots:
            plan = plan_dependency(sim, w)
            fast = compute_L3(plan.L1, plan.L2, k.deps, k.dependents)
            slow = brute_L3(plan.L1, plan.L2, anc)
            checked += 1
            if fast != slow or plan.L3 != slow:
                mismatches.append(
                    f"t={engine.now()} victim={w.id}: "
                    f"{sorted(map(k.task_id, fast ^ slow))}")
            if not plan.L1 <= plan.L3:
                mismatches.append(f"t={engine.now()} victim={w.id}: "
                                  f"L1 not inside L3")

    sim.engine.observer = observe
    sim.run()
    sim.check_invariants()
    return checked, mismatches


# scheduling ---------------------------------------------------------------

def list_schedule_makespan(grid: GridSpec, workers: int,
                           process_cost: float) -> float:
    """Fault-free makespan of a greedy list scheduler with zero fetch cost.

    Tasks are handed out in horizontal order to the earliest free worker
    (lowest id on ties); a task starts once its worker is free and all its
    inputs are finished.
    """
    s = grid.space_size
    order = []
    for t in range(1, grid.time_steps + 1):
        ups = [n for n in range(1, s + 1) if (t + n) % 2 == 0]
        downs = [n for n in range(1, s + 1) if (t + n) % 2]
        order += [(t, n) for n in ups] + [(t, n) for n in downs]
    free = [(0.0, w) for w in range(workers)]
    heapq.heapify(free)
    finish: dict[tuple[int, int], float] = {}
    end = 0.0
    for t, n in order:
        avail, w = heapq.heappop(free)
        ready = max((finish[(u.t, u.n)] for u in
                     dependencies_of(TaskId(t, n), grid)), default=0.0)
        done = max(avail, ready) + process_cost
        finish[(t, n)] = done
        end = max(end, done)
        heapq.heappush(free, (done, w))
    return end


def pipeline_bound(grid: GridSpec, workers: int) -> float:
    """Analytic speedup floor: ``min(W, S/2) * T / (T + 1)``.

    The ``+ 1`` row is the pipeline fill: the first DOWN half-row cannot
    overlap the first UP half-row.
    """
    t = grid.time_steps
    return min(workers, grid.space_size // 2) * t / (t + 1)


def check_hand_traces() -> list[Check]:
    out = []
    cfg = SimConfig(worker_count=2, checkpoint=False, fail=False,
                    process_cost=5.0, backup_cost=0.0, stencil_size=4,
                    timesteps=2)
    r = Simulation(cfg).run()
    out.append(Check("4x2 grid, 2 workers", r.makespan_s == 20.0
                     and r.aggregated_processing_s == 40.0,
                     f"makespan {r.makespan_s}"))
    cfg = cfg.with_values(worker_count=1, stencil_size=128, timesteps=128)
    r = Simulation(cfg).run()
    out.append(Check("128x128 grid, 1 worker", r.makespan_s == 81920.0,
                     f"makespan {r.makespan_s}"))
    return out


def check_list_schedule(max_grid: int) -> list[Check]:
    out = []
    for s in (4, 8, max_grid):
        if s < 4 or s % 2:
            continue
        grid = GridSpec(s, s)
        for w in (1, 2, 4, 8, 16):
            cfg = SimConfig(worker_count=w, checkpoint=False, fail=False,
                            process_cost=5.0, backup_cost=0.0,
                            stencil_size=s, timesteps=s)
            got = Simulation(cfg).run().makespan_s
            want = list_schedule_makespan(grid, w, 5.0)
            out.append(Check(f"list schedule {s}x{s} W={w}", got == want,
                             f"{got} vs {want}"))
    return out


def run_all(max_grid: int = 16, stride: int = 7) -> list[Check]:
    checks = [check_table1()]
    for s in range(2, max_grid + 1, 2):
        for level in range(1, 4):
            try:
                grid = GridSpec(s, s)
                grid.check_level(level)
            except ConfigError:
                continue
            checks.append(check_tiling(grid, level))
    checks += check_hand_traces()
    checks += check_list_schedule(max_grid)
    for s in sorted({8, max_grid}):
        for level in (1, 2, 3):
            try:
                GridSpec(s, s).check_level(level)
            except ConfigError:
                continue
            for rec_fail in (False, True):
                cfg = SimConfig(worker_count=4, checkpoint_level=level,
                                fail=rec_fail, mtbf=40.0, seed=3,
                                recovery="Dependency", process_cost=1.0,
                                backup_cost=0.01, stencil_size=s,
                                timesteps=s)
                n, bad = l3_event_oracle(cfg, stride)
                checks.append(Check(
                    f"L3 brute force {s}x{s} level {level} "
                    f"{'with' if rec_fail else 'without'} failures",
                    not bad, f"{n} plans" + (f"; {bad[:2]}" if bad else "")))
    return checks
