import os

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from rollbacksim.config import SimConfig, format_config, parse_config
from rollbacksim.resilience import compute_L3
from rollbacksim.runtime import Simulation
from rollbacksim.stencil import (GridSpec, StencilKernel, dependencies_of,
                                 horizontal_order, tc_tiling)
from rollbacksim.verify import brute_L3, closure, triangle_members


@st.composite
def grids(draw, max_level=3):
    level = draw(st.integers(1, max_level))
    s = 2 ** level * draw(st.integers(1, 4))
    t = 2 ** (level - 1) * draw(st.integers(1, 4))
    return GridSpec(s, t), level


@settings(max_examples=60, deadline=None)
@given(grids())
def test_tiling_partitions_grid(gl):
    grid, level = gl
    tiles = tc_tiling(grid, level)
    members = [v for tri in tiles for v in tri.members]
    assert len(members) == len(set(members)) == grid.task_count
    assert all(len(tri.members) == 4 ** (level - 1) for tri in tiles)
    assert {t.key: set(t.members) for t in tiles} == \
        triangle_members(grid, level)


@settings(max_examples=40, deadline=None)
@given(grids())
def test_order_respects_dependencies(gl):
    grid, _ = gl
    pos = {v: i for i, v in enumerate(horizontal_order(grid))}
    assert all(pos[u] < pos[v] for v in pos for u in dependencies_of(v, grid))


@settings(max_examples=80, deadline=None,
          suppress_health_check=[HealthCheck.too_slow])
@given(grids(), st.data())
def test_L3_equals_brute_force(gl, data):
    grid, level = gl
    k = StencilKernel(grid, level)
    ids = st.integers(0, k.size - 1)
    l1 = data.draw(st.sets(ids, max_size=5))
    l2 = data.draw(st.sets(ids, max_size=8))
    assert compute_L3(l1, l2, k.deps, k.dependents) == \
        brute_L3(l1, l2, closure(k.deps))


@st.composite
def run_configs(draw, fail=None):
    (grid, level) = draw(grids())
    workers = draw(st.integers(2, 6))
    cost = draw(st.sampled_from([1.0, 5.0, 7.1]))
    # MTBF relative to the fault-free span keeps runs finite: far shorter
    # gaps can livelock a full restart (no checkpoints, default recovery)
    span = grid.task_count * cost / workers
    return SimConfig(
        worker_count=workers,
        checkpoint_level=level,
        checkpoint=draw(st.booleans()),
        recovery=draw(st.sampled_from(["Default", "Dependency"])),
        fail=draw(st.booleans()) if fail is None else fail,
        mtbf=span * draw(st.floats(0.5, 5.0)),
        seed=draw(st.integers(0, 10_000)),
        backup_cost=draw(st.sampled_from([0.0, 0.0013, 0.05])),
        process_cost=cost,
        log_cost=draw(st.sampled_from([0.0, 0.01])),
        stencil_size=grid.space_size, timesteps=grid.time_steps)


def run_checked(cfg):
    sim = Simulation(cfg, keep_trace=True)
    bands = []

    def watch(engine):
        if sim.ring is not None:
            sim.ring.check()
        assert sim.checkpoints.generations_in_use() <= 2
        bands.append((len(sim.plans), sim.b_star))

    sim.engine.observer = watch
    r = sim.run()
    sim.check_invariants()
    # B* never decreases between failures
    for (p0, b0), (p1, b1) in zip(bands, bands[1:]):
        assert b1 >= b0 or p1 > p0
    return sim, r


@settings(max_examples=int(os.environ.get("ROLLBACKSIM_EXAMPLES", 120)), deadline=None)
@given(run_configs())
def test_recovery_correctness(cfg):
    sim, r = run_checked(cfg)
    assert sim.done_count == sim.size
    assert r.profile.total == r.worker_lifetime_s or \
        abs(r.profile.total - r.worker_lifetime_s) < 1e-6 * r.worker_lifetime_s
    if cfg.recovery == "Dependency":
        assert all(p.L1 <= p.L3 for p in sim.plans)


@settings(max_examples=40, deadline=None)
@given(run_configs())
def test_deterministic_traces(cfg):
    a, _ = run_checked(cfg)
    b, _ = run_checked(cfg)
    assert a.trace.events == b.trace.events


@settings(max_examples=40, deadline=None)
@given(run_configs(fail=False))
def test_strategies_identical_without_failures(cfg):
    a, _ = run_checked(cfg.with_values(recovery="Default"))
    b, _ = run_checked(cfg.with_values(recovery="Dependency"))
    assert a.trace.events == b.trace.events


@settings(max_examples=60, deadline=None)
@given(run_configs(), st.booleans())
def test_config_roundtrip(cfg, with_fetch):
    if with_fetch:
        cfg = cfg.with_values(fetch_cost=0.25)
    if cfg.worker_count < 2:
        return
    assert parse_config(format_config(cfg)) == cfg
