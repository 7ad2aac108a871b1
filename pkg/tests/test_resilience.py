import numpy as np
import pytest

from rollbacksim.errors import ConfigError, UnsupportedFailure
from rollbacksim.resilience import (CheckpointStore, FailureSchedule,
                                    RingAssignment, Strategy, TaskLogStore,
                                    assign_ring, baseline, compute_L1,
                                    compute_L3, generate_failures, on_failure,
                                    plan_default, plan_dependency)
from rollbacksim.runtime import Simulation, Status
from rollbacksim.stencil import GridSpec, StencilKernel, TaskId
from rollbacksim.verify import brute_L3, closure

from conftest import small_config

T = TaskId


# ring -----------------------------------------------------------------------

def test_ring_three_workers():
    ring = assign_ring([0, 1, 2])
    assert ring.guard == {0: 1, 1: 2, 2: 0}
    assert all(ring.protectee[ring.guard[a]] == a for a in ring.guard)
    ring.check()


def test_ring_two_workers_mutual():
    ring = assign_ring([0, 1])
    assert ring.guard == {0: 1, 1: 0} and ring.protectee == {1: 0, 0: 1}


def test_ring_splice():
    ring = assign_ring([0, 1, 2])
    ring.replace(1, 3)
    assert ring.guard == {0: 3, 3: 2, 2: 0}
    ring.check()


def test_ring_needs_two():
    with pytest.raises(ConfigError):
        RingAssignment([0])


# stores ---------------------------------------------------------------------

def test_double_buffer_evicts_oldest_band():
    cs = CheckpointStore()
    assert cs.put(1, 0, 0, 1, "a", 1) == []
    assert cs.put(1, 0, 0, 2, "b", 2) == []
    assert cs.put(1, 0, 0, 3, "c", 3) == [("a", 1)]
    assert cs.generations_in_use() == 2 and cs.peak == 2
    cs.transfer(1, 5)
    assert cs.holders() == {5}


def test_task_log_survives_transfer():
    logs = TaskLogStore()
    logs.log(1, 0, 7, "inst")
    logs.transfer(1, 9)
    assert logs.entries(9, 0) == {7: ["inst"]}
    assert logs.entries(1, 0) == {}


# failures -------------------------------------------------------------------

def test_failures_deterministic_and_disabled():
    a = generate_failures(1800, 3, 10_000, 128)
    assert a == generate_failures(1800, 3, 10_000, 128)
    assert generate_failures(1800, 3, 10_000, enabled=False) == []
    assert all(0 <= slot < 128 for _, slot in a)
    assert [t for t, _ in a] == sorted(t for t, _ in a)


def test_failure_count_is_poisson_in_the_horizon():
    counts = [len(generate_failures(1800, s, 3600)) for s in range(2000)]
    assert np.mean(counts) == pytest.approx(2.0, abs=0.1)


def test_mtbf_must_be_positive():
    with pytest.raises(ConfigError):
        FailureSchedule(0, 1)


# hooks ----------------------------------------------------------------------

def test_alg1_hooks_level2():
    sim = Simulation(small_config(worker_count=2, stencil_size=8,
                                  timesteps=2), keep_trace=True)
    sim.run()
    kinds = {}
    for e in sim.trace:
        if e.task is not None:
            kinds.setdefault(e.task, []).append(e.kind)
    assert "checkpoint" in kinds[T(1, 1)] and "log" in kinds[T(1, 1)]
    assert "checkpoint" not in kinds[T(1, 2)] and "log" in kinds[T(1, 2)]
    for seq in kinds.values():
        assert seq.index("log") < seq.index("run-begin")
        if "checkpoint" in seq:
            assert seq.index("log") < seq.index("checkpoint") \
                < seq.index("run-begin")


def test_no_checkpoints_when_disabled():
    sim = Simulation(small_config(checkpoint=False), keep_trace=True)
    r = sim.run()
    assert r.checkpoint_sends == 0
    assert sim.b_star == 0


def test_checkpoint_sends_match_entry_counts():
    for level in (1, 2, 3):
        sim = Simulation(small_config(checkpoint_level=level,
                                      stencil_size=16, timesteps=16))
        r = sim.run()
        assert r.checkpoint_sends == sum(sim.kernel.is_entry)
        assert sim.b_star == sim.kernel.band_count


def test_secured_band_progression_and_monotone():
    sim = Simulation(small_config(worker_count=2, stencil_size=4,
                                  timesteps=4))
    seen = []
    sim.engine.observer = lambda e: seen.append(sim.b_star)
    sim.run()
    assert seen[0] == 0 and seen[-1] == 2 and 1 in seen
    assert seen == sorted(seen)


# rollback sets ---------------------------------------------------------------

def idx(k, *tids):
    return {k.index(t) for t in tids}


def test_L3_reflexive():
    k = StencilKernel(GridSpec(4, 2), 2)
    t = idx(k, T(2, 4))
    assert compute_L3(t, t, k.deps, k.dependents) == t


def test_L3_small_grid():
    k = StencilKernel(GridSpec(4, 2), 2)
    got = compute_L3(idx(k, T(2, 4)), idx(k, T(1, 4)), k.deps, k.dependents)
    assert got == idx(k, T(1, 4), T(2, 4))


def test_L3_worked_example_with_started_tasks():
    # L1 restricted to tasks that actually started on the failed worker
    k = StencilKernel(GridSpec(8, 2), 2)
    l1 = idx(k, T(1, 4), T(2, 5))
    # both entries sent their checkpoint before running
    l2 = baseline(l1, k.deps, k.unit, l1.__contains__)
    assert l2 == idx(k, T(1, 4), T(2, 5))
    got = compute_L3(l1, l2, k.deps, k.dependents)
    assert got == idx(k, T(1, 4), T(2, 4), T(2, 5))


def test_L2_rules():
    k = StencilKernel(GridSpec(4, 2), 2)
    row1 = {i for i in range(k.size)
            if k.task_id(i).t == 1 and k.is_entry[i]}
    assert baseline(idx(k, T(2, 4)), k.deps, k.unit,
                    row1.__contains__) == idx(k, T(1, 4))
    assert baseline(set(), k.deps, k.unit, lambda v: True) == set()
    assert baseline(idx(k, T(1, 1)), k.deps, k.unit,
                    lambda v: False) == idx(k, T(1, 1))


def test_L3_matches_brute_force_on_random_sets():
    rng = np.random.default_rng(0)
    k = StencilKernel(GridSpec(16, 16), 2)
    anc = closure(k.deps)
    for _ in range(200):
        l1 = set(rng.choice(k.size, rng.integers(0, 6), replace=False))
        l2 = set(rng.choice(k.size, rng.integers(0, 12), replace=False))
        assert compute_L3(l1, l2, k.deps, k.dependents) == \
            brute_L3(l1, l2, anc)


def test_L1_empty_for_unused_worker():
    sim = Simulation(small_config(worker_count=2))
    assert compute_L1(sim, sim.slots[0]) == set()


def test_L1_is_unsecured_started_work_of_victim():
    sim = Simulation(small_config(worker_count=2, stencil_size=8,
                                  timesteps=2, process_cost=5.0))
    k = sim.kernel
    target = k.index(T(2, 5))
    got = {}

    def watch(engine):
        inst = sim.instance[target]
        if not got and inst.status is Status.RUNNING:
            w = sim.workers[inst.worker]
            done_here = {i for i in range(k.size)
                         if sim.signals[i].done
                         and sim.signals[i].producer == w.id}
            got["L1"] = compute_L1(sim, w)
            got["expected"] = done_here | {target}

    sim.engine.observer = watch
    sim.run()
    assert sim.b_star == 1
    assert got["L1"] == got["expected"]


# applied recoveries ------------------------------------------------------------

def inject_at(sim, when, slot):
    """Fail ``slot`` right after the first event that satisfies ``when``."""
    fired = []

    def watch(engine):
        if not fired and not sim.finished and when(sim):
            fired.append(on_failure(sim, slot))

    sim.engine.observer = watch
    return fired


def test_default_failure_before_any_checkpoint_restarts_started_work():
    sim = Simulation(small_config(worker_count=2, stencil_size=4,
                                  timesteps=4))
    k = sim.kernel
    started = {}

    def when(s):
        if s.done_count >= 2 and s.b_star == 0:
            started["set"] = {i for i in range(k.size)
                              if s.signals[i].done
                              or (s.instance[i] and s.instance[i].status
                                  is Status.RUNNING)}
            return True
        return False

    fired = inject_at(sim, when, 0)
    sim.run()
    sim.check_invariants()
    assert fired and fired[0].b_star == 0
    assert set(fired[0].cancel) == started["set"]


def test_default_only_cancels_bands_after_secured_band():
    sim = Simulation(small_config(worker_count=2, stencil_size=4,
                                  timesteps=4))
    k = sim.kernel
    fired = inject_at(sim, lambda s: s.b_star == 1 and any(
        s.signals[i].done for i in range(8, 16)), 1)
    sim.run()
    sim.check_invariants()
    plan = fired[0]
    assert plan.cancel and all(k.band[i] == 2 for i in plan.cancel)
    assert plan.L1 <= set(plan.cancel)


def test_dependency_replays_do_not_cancel_outside_L3():
    sim = Simulation(small_config(worker_count=3, recovery="Dependency",
                                  stencil_size=8, timesteps=8),
                     keep_trace=True)
    fired = inject_at(sim, lambda s: s.done_count > 30, 1)
    r = sim.run()
    sim.check_invariants()
    plan = fired[0]
    assert plan.strategy is Strategy.DEPENDENCY
    assert plan.L1 <= plan.L3
    k = sim.kernel
    cancelled = {k.index(e.task) for e in sim.trace if e.kind == "cancel"}
    assert cancelled <= plan.L3
    replayed = {k.index(e.task) for e in sim.trace
                if e.kind == "replay-enqueue"}
    assert replayed == plan.L3 and r.replay_count == len(plan.L3)


def test_failing_dead_worker_is_unsupported():
    sim = Simulation(small_config(worker_count=2))
    sim.slots[0].alive = False
    with pytest.raises(UnsupportedFailure):
        on_failure(sim, 0)


def test_plans_are_pure():
    sim = Simulation(small_config(worker_count=2, recovery="Dependency"))
    states = []

    def watch(engine):
        if engine.dispatched == 40:
            before = (sim.b_star, sim.done_count, sim.queue.pending())
            plan_default(sim, sim.slots[0])
            plan_dependency(sim, sim.slots[1])
            states.append(before == (sim.b_star, sim.done_count,
                                     sim.queue.pending()))

    sim.engine.observer = watch
    sim.run()
    assert states == [True]


@pytest.mark.parametrize("strategy", ["Default", "Dependency"])
@pytest.mark.parametrize("level", [1, 2, 3])
def test_failure_at_every_event_boundary(strategy, level):
    """Every single-failure instant on an 8x8 grid recovers correctly."""
    cfg = small_config(worker_count=3, recovery=strategy,
                       checkpoint_level=level)
    events = Simulation(cfg)
    events.run()
    total = events.engine.dispatched
    for k in range(1, total):
        sim = Simulation(cfg)
        fired = inject_at(sim, lambda s, k=k: s.engine.dispatched == k,
                          k % 3)
        sim.run()
        sim.check_invariants()
        assert fired


def test_older_replay_holding_global_result_is_rolled_back():
    # a worker ran two replays of T(1,1); the first became the global
    # result, and the worker's failure must still put it in L1
    cfg = small_config(worker_count=2, checkpoint=False, recovery="Dependency",
                       fail=True, mtbf=16.0, seed=3294, backup_cost=0.0,
                       stencil_size=4, timesteps=4)
    sim = Simulation(cfg)
    sim.run()
    sim.check_invariants()


def test_lost_replay_that_became_global_result_stays_completed():
    cfg = small_config(worker_count=2, checkpoint_level=1, recovery="Dependency",
                       fail=True, mtbf=2.25, seed=5176, backup_cost=0.0,
                       stencil_size=6, timesteps=1)
    sim = Simulation(cfg)
    sim.run()
    sim.check_invariants()
