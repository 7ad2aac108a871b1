"""1-D stencil task graph: T_L task shapes, dependencies, checkpoint tiling.

Tasks are addressed as ``T(t, n)`` with time row ``t`` in ``[1, T]`` and space
index ``n`` in ``[1, S]``. The space dimension is periodic. A task is an
upward triangle when ``t + n`` is even, otherwise a downward triangle.

Checkpoint level ``c`` groups ``4**(c-1)`` tasks into one checkpoint
triangle. Triangles of a level are stacked in bands of ``h = 2**(c-1)``
rows; each band alternates UP and DOWN triangles, ``S / h`` per band.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

from .errors import ConfigError


class TaskId(NamedTuple):
    t: int
    n: int

    def __repr__(self):
        return f"T({self.t},{self.n})"

    __str__ = __repr__


class Shape(Enum):
    UP = "UP"
    DOWN = "DOWN"


@dataclass(frozen=True)
class GridSpec:
    space_size: int
    time_steps: int
    periodic: bool = True

    def __post_init__(self):
        if self.space_size < 2 or self.space_size % 2:
            raise ConfigError(
                f"StencilSize must be even and >= 2, got {self.space_size}",
                key="StencilSize",
            )
        if self.time_steps < 0:
            raise ConfigError(
                f"Timesteps must be non-negative, got {self.time_steps}",
                key="Timesteps",
            )
        if not self.periodic:
            raise ConfigError("only the periodic boundary is supported")

    @property
    def task_count(self) -> int:
        return self.space_size * self.time_steps

    def contains(self, tid: TaskId) -> bool:
        return 1 <= tid.t <= self.time_steps and 1 <= tid.n <= self.space_size

    def check_level(self, level: int) -> None:
        """Raise ConfigError unless ``level`` tiles this grid exactly."""
        if level < 1:
            raise ConfigError(f"CheckpointLevel must be >= 1, got {level}",
                              key="CheckpointLevel")
        width = 2 ** level
        height = 2 ** (level - 1)
        if self.space_size % width:
            raise ConfigError(
                f"StencilSize mod 2^CheckpointLevel must be 0 "
                f"({self.space_size} mod {width} = {self.space_size % width})",
                key="StencilSize",
            )
        if self.time_steps % height:
            raise ConfigError(
                f"Timesteps mod 2^(CheckpointLevel-1) must be 0 "
                f"({self.time_steps} mod {height} = {self.time_steps % height})",
                key="Timesteps",
            )

    def index(self, tid: TaskId) -> int:
        return (tid.t - 1) * self.space_size + (tid.n - 1)

    def task(self, index: int) -> TaskId:
        t, n = divmod(index, self.space_size)
        return TaskId(t + 1, n + 1)


def _check(tid: TaskId, grid: GridSpec) -> None:
    if not grid.contains(tid):
        raise ValueError(
            f"{tid!r} outside {grid.time_steps}x{grid.space_size} grid")


def shape_of(tid: TaskId, grid: GridSpec | None = None) -> Shape:
    if grid is not None:
        _check(tid, grid)
    return Shape.UP if (tid.t + tid.n) % 2 == 0 else Shape.DOWN


def dependencies_of(tid: TaskId, grid: GridSpec) -> frozenset[TaskId]:
    _check(tid, grid)
    t, n = tid
    if (t + n) % 2 == 0:
        return frozenset() if t == 1 else frozenset({TaskId(t - 1, n)})
    s = grid.space_size
    left = (n - 2) % s + 1
    right = n % s + 1
    return frozenset({TaskId(t, left), TaskId(t, right)})


def horizontal_order(grid: GridSpec) -> list[TaskId]:
    """Per row: every UP task by ascending n, then every DOWN task."""
    order = []
    s = grid.space_size
    for t in range(1, grid.time_steps + 1):
        first_up = 1 if t % 2 else 2
        order.extend(TaskId(t, n) for n in range(first_up, s + 1, 2))
        order.extend(TaskId(t, n) for n in range(3 - first_up, s + 1, 2))
    return order


@dataclass(frozen=True)
class TaskClosure:
    global_id: TaskId
    dependencies: frozenset[TaskId]
    input_args: tuple[int, int, int, int]


def make_closure(tid: TaskId, grid: GridSpec) -> TaskClosure:
    """Migratable descriptor of a task; the stencil data itself is not in it."""
    return TaskClosure(
        global_id=tid,
        dependencies=dependencies_of(tid, grid),
        input_args=(tid.t, tid.t, tid.n, tid.n),
    )


class TcTriangle(NamedTuple):
    """One checkpoint triangle; a tuple since big tilings build tens of
    thousands of them."""

    level: int
    band: int
    slot: int
    orientation: Shape
    members: frozenset[TaskId]
    entry_tasks: frozenset[TaskId]

    @property
    def key(self) -> tuple[int, int]:
        return (self.band, self.slot)


def locate(tid: TaskId, grid: GridSpec, level: int) -> tuple[int, int]:
    """Return ``(band, slot)`` of the checkpoint triangle holding ``tid``.

    Slot ``2j`` is the UP triangle anchored at column ``1 + 2hj``; slot
    ``2j + 1`` is the DOWN triangle whose bottom vertex is column ``2h(j+1)``.
    """
    h = 2 ** (level - 1)
    period = 2 * h
    band, tau = divmod(tid.t - 1, h)
    tau += 1
    j, m = divmod(tid.n - 1, period)
    if tau - 1 <= m <= period - 1 - tau:
        slot = 2 * j
    elif m >= period - tau:
        slot = 2 * j + 1
    else:
        slot = 2 * ((j - 1) % (grid.space_size // period)) + 1
    return band + 1, slot


def entry_tasks(tri: TcTriangle, grid: GridSpec) -> frozenset[TaskId]:
    """Members with no dependency at all or with one outside the triangle."""
    entries = set()
    for tid in tri.members:
        deps = dependencies_of(tid, grid)
        if not deps or not deps <= tri.members:
            entries.add(tid)
    return frozenset(entries)


def _key_grid(grid: GridSpec, level: int) -> np.ndarray:
    """Vectorized :func:`locate`: array ``[t-1, n-1] -> band * 2**20 + slot``."""
    h = 2 ** (level - 1)
    period = 2 * h
    t = np.arange(grid.time_steps)[:, None]
    n = np.arange(grid.space_size)[None, :]
    band, tau = np.divmod(t, h)
    tau = tau + 1
    j, m = np.divmod(n, period)
    wrap = 2 * ((j - 1) % (grid.space_size // period)) + 1
    slot = np.where((tau - 1 <= m) & (m <= period - 1 - tau), 2 * j,
                    np.where(m >= period - tau, 2 * j + 1, wrap))
    return (band + 1) * (1 << 20) + slot


def tc_tiling(grid: GridSpec, level: int) -> list[TcTriangle]:
    grid.check_level(level)
    key = _key_grid(grid, level)
    rows, cols = np.indices(key.shape)
    up = (rows + cols) % 2 == 0          # 0-based parity equals 1-based
    below = np.vstack([np.full((1, key.shape[1]), -1), key[:-1]])
    entry = np.where(up, below != key,
                     (np.roll(key, 1, axis=1) != key)
                     | (np.roll(key, -1, axis=1) != key))
    flat = key.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.flatnonzero(np.diff(flat[order])) + 1
    s = grid.space_size
    tids = [TaskId(t, n) for t in range(1, grid.time_steps + 1)
            for n in range(1, s + 1)]
    ordered = [tids[i] for i in order.tolist()]
    flags = entry.ravel()[order].tolist()
    keys = flat[order].tolist()
    starts = [0] + bounds.tolist()
    ends = starts[1:] + [len(ordered)]
    tiles = []
    for a, b in zip(starts, ends):
        band, slot = divmod(keys[a], 1 << 20)
        members = ordered[a:b]
        entries = frozenset([v for v, e in zip(members, flags[a:b]) if e])
        tiles.append(TcTriangle(level, band, slot,
                                Shape.UP if slot % 2 == 0 else Shape.DOWN,
                                frozenset(members), entries))
    return tiles


def triangle_count(grid: GridSpec, level: int) -> int:
    grid.check_level(level)
    return grid.task_count // 4 ** (level - 1)


class Kernel:
    """What the runtime needs from an application kernel.

    Tasks are referred to by dense integer index ``0..size-1``. ``order`` is
    the scheduling order and ``rank[i]`` the position of task ``i`` in it.
    Every dependency of a task must appear earlier in ``order``.
    """

    size: int
    deps: list[tuple[int, ...]]
    dependents: list[tuple[int, ...]]
    order: list[int]
    rank: list[int]
    # checkpoint geometry
    unit: list[int]          # checkpoint unit (triangle) id of each task
    band: list[int]          # band of each task, 1-based
    is_entry: list[bool]
    unit_band: list[int]
    unit_slot: list[int]
    unit_entries: list[tuple[int, ...]]
    band_count: int

    def task_id(self, i: int):
        raise NotImplementedError

    def index(self, tid) -> int:
        raise NotImplementedError


class StencilKernel(Kernel):
    """Flattened, precomputed view of a stencil grid at one checkpoint level."""

    def __init__(self, grid: GridSpec, level: int = 1):
        grid.check_level(level)
        self.grid = grid
        self.level = level
        s = grid.space_size
        self.size = size = grid.task_count

        deps = []
        dependents: list[list[int]] = [[] for _ in range(size)]
        for i in range(size):
            t, n = divmod(i, s)
            if (t + n) % 2 == 0:  # zero-based parity equals one-based parity
                d = () if t == 0 else (i - s,)
            else:
                row = t * s
                left = row + (n - 1) % s
                right = row + (n + 1) % s
                d = (left,) if left == right else (left, right)
            deps.append(d)
            for j in d:
                dependents[j].append(i)
        self.deps = deps
        self.dependents = [tuple(x) for x in dependents]

        self.order = [grid.index(tid) for tid in horizontal_order(grid)]
        self.rank = [0] * size
        for pos, i in enumerate(self.order):
            self.rank[i] = pos

        per_band = s // 2 ** (level - 1)
        unit = [0] * size
        band = [0] * size
        for i in range(size):
            b, slot = locate(grid.task(i), grid, level)
            unit[i] = (b - 1) * per_band + slot
            band[i] = b
        self.unit = unit
        self.band = band
        self.units_per_band = per_band
        self.band_count = grid.time_steps // 2 ** (level - 1)
        unit_count = self.band_count * per_band
        self.unit_band = [u // per_band + 1 for u in range(unit_count)]
        self.unit_slot = [u % per_band for u in range(unit_count)]

        entries: list[list[int]] = [[] for _ in range(unit_count)]
        is_entry = [False] * size
        for i in range(size):
            d = deps[i]
            if not d or any(unit[j] != unit[i] for j in d):
                is_entry[i] = True
                entries[unit[i]].append(i)
        self.is_entry = is_entry
        self.unit_entries = [tuple(e) for e in entries]

    @property
    def unit_count(self) -> int:
        return len(self.unit_entries)

    def task_id(self, i: int) -> TaskId:
        return self.grid.task(i)

    def index(self, tid: TaskId) -> int:
        _check(tid, self.grid)
        return self.grid.index(tid)
