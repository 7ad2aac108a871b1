"""Run traces, profile accounting, summaries and their JSON/CSV forms."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

from .errors import IntegrityError

SCHEMA_VERSION = 1

CATEGORIES = ("processing", "recompute", "checkpointing_and_comm",
              "waiting", "idle")

KINDS = frozenset({
    "join", "leave", "enqueue", "replay-enqueue", "pop", "wait-begin",
    "wait-end", "fetch", "log", "checkpoint", "run-begin", "run-end",
    "abort", "cancel", "release", "failure", "recovery-begin",
    "recovery-end", "idle", "end",
})


class TraceEvent(NamedTuple):
    time: float
    seq: int
    worker: int | None
    kind: str
    task: tuple[int, int] | None = None
    attempt: int | None = None
    replay: bool = False
    category: str | None = None
    duration: float = 0.0
    detail: str = ""


class _Fold:
    """Incremental reduction of trace events into summary numbers."""

    def __init__(self):
        self.makespan = None
        self.seconds = dict.fromkeys(CATEGORIES, 0.0)
        self.joined: dict[int, float] = {}
        self.left: dict[int, float] = {}
        self.cancelled = 0
        self.replays = 0
        self.checkpoints = 0
        self.failures = []
        self.completed = Counter()
        self.open_runs: set = set()
        self.last = None

    def add(self, ev: TraceEvent):
        if self.last is not None and (ev.time, ev.seq) < self.last:
            raise IntegrityError(f"trace out of order at {ev}")
        self.last = (ev.time, ev.seq)
        kind = ev.kind
        if ev.category is not None:
            self.seconds[ev.category] += ev.duration
        if kind == "run-begin":
            self.open_runs.add((ev.worker, ev.task, ev.attempt, ev.replay))
        elif kind == "run-end":
            key = (ev.worker, ev.task, ev.attempt, ev.replay)
            if key not in self.open_runs:
                raise IntegrityError(f"run-end without run-begin: {ev}")
            self.open_runs.discard(key)
            self.completed[ev.worker] += 1
        elif kind == "abort" and ev.category in ("processing", "recompute"):
            self.open_runs.discard((ev.worker, ev.task, ev.attempt, ev.replay))
        elif kind == "cancel":
            self.cancelled += 1
        elif kind == "replay-enqueue":
            self.replays += 1
        elif kind == "checkpoint":
            self.checkpoints += 1
        elif kind == "failure":
            self.failures.append({"time": ev.time, "victim": ev.worker,
                                  "replacement": int(ev.detail)})
        elif kind == "join":
            self.joined[ev.worker] = ev.time
        elif kind == "leave":
            self.left[ev.worker] = ev.time
        elif kind == "end":
            self.makespan = ev.time


@dataclass
class ProfileBreakdown:
    seconds: dict[str, float]

    @property
    def total(self) -> float:
        return sum(self.seconds.values())

    @property
    def percent(self) -> dict[str, float]:
        total = self.total
        if total <= 0:
            return dict.fromkeys(self.seconds, 0.0)
        return {k: 100.0 * v / total for k, v in self.seconds.items()}

    def share(self, category: str) -> float:
        return self.percent[category]

    def to_dict(self) -> dict:
        pct = self.percent
        return {k: {"seconds": self.seconds[k], "percent": pct[k]}
                for k in CATEGORIES}

    def table(self) -> str:
        rows = [f"{'category':<24}{'seconds':>16}{'percent':>10}"]
        pct = self.percent
        for k in CATEGORIES:
            rows.append(f"{k:<24}{self.seconds[k]:>16.3f}{pct[k]:>9.2f}%")
        return "\n".join(rows)


@dataclass
class RunSummary:
    makespan_s: float
    aggregated_processing_s: float
    cancelled_count: int
    replay_count: int
    checkpoint_sends: int
    failures: list[dict]
    worker_tasks: dict[int, int]
    profile: ProfileBreakdown
    worker_lifetime_s: float
    seed: int | None = None
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "makespan_s": self.makespan_s,
            "aggregated_processing_s": self.aggregated_processing_s,
            "cancelled_count": self.cancelled_count,
            "replay_count": self.replay_count,
            "checkpoint_sends": self.checkpoint_sends,
            "failures": self.failures,
            "worker_tasks": {str(k): v for k, v in
                             sorted(self.worker_tasks.items())},
            "worker_lifetime_s": self.worker_lifetime_s,
            "profile": self.profile.to_dict(),
            "seed": self.seed,
            "config": self.config,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunSummary":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported schema version {data.get('schema_version')}")
        profile = ProfileBreakdown(
            {k: float(data["profile"][k]["seconds"]) for k in CATEGORIES})
        return cls(
            makespan_s=data["makespan_s"],
            aggregated_processing_s=data["aggregated_processing_s"],
            cancelled_count=data["cancelled_count"],
            replay_count=data["replay_count"],
            checkpoint_sends=data["checkpoint_sends"],
            failures=list(data["failures"]),
            worker_tasks={int(k): v for k, v in data["worker_tasks"].items()},
            profile=profile,
            worker_lifetime_s=data["worker_lifetime_s"],
            seed=data.get("seed"),
            config=dict(data.get("config", {})),
            extra=dict(data.get("extra", {})),
        )


class Trace:
    """Append-only event log; also folds events into summary numbers.

    With ``keep=False`` only the running fold is kept, which is enough for
    :func:`summarize` via :meth:`summary` and saves memory on big sweeps.
    """

    def __init__(self, keep: bool = True):
        self.keep = keep
        self.events: list[TraceEvent] = []
        self.fold = _Fold()
        self._seq = 0

    def record(self, time, worker, kind, task=None, attempt=None,
               replay=False, category=None, duration=0.0, detail=""):
        ev = TraceEvent(time, self._seq, worker, kind, task, attempt, replay,
                        category, duration, detail)
        self._seq += 1
        self.fold.add(ev)
        if self.keep:
            self.events.append(ev)
        return ev

    def __len__(self):
        return self._seq

    def __iter__(self):
        return iter(self.events)


def _summary_from_fold(fold: _Fold, seed=None, config=None,
                       extra=None) -> RunSummary:
    if fold.makespan is None:
        raise IntegrityError("trace has no end event")
    if fold.open_runs:
        raise IntegrityError(
            f"{len(fold.open_runs)} run-begin events never closed")
    lifetime = 0.0
    for w, start in fold.joined.items():
        lifetime += fold.left.get(w, fold.makespan) - start
    profile = ProfileBreakdown(dict(fold.seconds))
    return RunSummary(
        makespan_s=fold.makespan,
        aggregated_processing_s=(fold.seconds["processing"]
                                 + fold.seconds["recompute"]),
        cancelled_count=fold.cancelled,
        replay_count=fold.replays,
        checkpoint_sends=fold.checkpoints,
        failures=list(fold.failures),
        worker_tasks=dict(fold.completed),
        profile=profile,
        worker_lifetime_s=lifetime,
        seed=seed,
        config=dict(config or {}),
        extra=dict(extra or {}),
    )


def summarize(trace, seed=None, config=None, extra=None) -> RunSummary:
    """Aggregate a finished trace (a :class:`Trace` or iterable of events)."""
    if isinstance(trace, Trace) and not trace.keep:
        return _summary_from_fold(trace.fold, seed, config, extra)
    fold = _Fold()
    for ev in trace:
        fold.add(TraceEvent(*ev))
    return _summary_from_fold(fold, seed, config, extra)


@dataclass
class Comparison:
    cancelled_delta: int
    cancelled_reduction_pct: float
    processing_delta_s: float
    processing_reduction_pct: float
    makespan_delta_s: float
    makespan_reduction_pct: float

    def to_dict(self):
        return asdict(self)


def _pct(base, other):
    return 0.0 if base == 0 else 100.0 * (base - other) / base


def compare(a: RunSummary, b: RunSummary) -> Comparison:
    """Reduction of ``b`` relative to baseline ``a`` (positive: b is better).

    Both summaries must come from the same configuration apart from the
    recovery strategy.
    """
    ca = {k: v for k, v in a.config.items() if k != "Recovery"}
    cb = {k: v for k, v in b.config.items() if k != "Recovery"}
    if ca != cb or a.seed != b.seed:
        diff = sorted(k for k in set(ca) | set(cb) if ca.get(k) != cb.get(k))
        raise ValueError(f"summaries differ beyond Recovery: {diff or 'seed'}")
    return Comparison(
        cancelled_delta=a.cancelled_count - b.cancelled_count,
        cancelled_reduction_pct=_pct(a.cancelled_count, b.cancelled_count),
        processing_delta_s=a.aggregated_processing_s - b.aggregated_processing_s,
        processing_reduction_pct=_pct(a.aggregated_processing_s,
                                      b.aggregated_processing_s),
        makespan_delta_s=a.makespan_s - b.makespan_s,
        makespan_reduction_pct=_pct(a.makespan_s, b.makespan_s),
    )


# emission -----------------------------------------------------------------

TRACE_FIELDS = TraceEvent._fields


def summary_json(summary: RunSummary) -> str:
    return json.dumps(summary.to_dict(), indent=2, sort_keys=False) + "\n"


def trace_csv(trace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_FIELDS)
    for ev in trace:
        row = list(ev)
        task = row[4]
        row[4] = "" if task is None else f"{task[0]}:{task[1]}"
        row[2] = "" if row[2] is None else row[2]
        row[5] = "" if row[5] is None else row[5]
        row[6] = int(row[6])
        row[7] = row[7] or ""
        writer.writerow(row)
    return buf.getvalue()


def parse_trace_csv(text: str) -> list[TraceEvent]:
    events = []
    reader = csv.DictReader(io.StringIO(text))
    for r in reader:
        task = None
        if r["task"]:
            t, n = r["task"].split(":")
            task = (int(t), int(n))
        events.append(TraceEvent(
            time=float(r["time"]), seq=int(r["seq"]),
            worker=int(r["worker"]) if r["worker"] else None,
            kind=r["kind"], task=task,
            attempt=int(r["attempt"]) if r["attempt"] else None,
            replay=bool(int(r["replay"])),
            category=r["category"] or None,
            duration=float(r["duration"]), detail=r["detail"]))
    return events


SERIES_FIELDS = ("level", "recovery", "seed", "makespan_s",
                 "aggregated_processing_s", "cancelled_count",
                 "replay_count", "failures")


def series_csv(rows: list[dict]) -> str:
    """Plot-ready rows, one per (level, recovery, seed)."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SERIES_FIELDS,
                            lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def emit(obj, fmt: str = "json") -> str:
    """Serialize a summary (json) or a trace (csv)."""
    if fmt == "json":
        if isinstance(obj, RunSummary):
            return summary_json(obj)
        return json.dumps(obj, indent=2) + "\n"
    if fmt == "csv":
        if isinstance(obj, RunSummary):
            row = {"level": obj.config.get("CheckpointLevel"),
                   "recovery": obj.config.get("Recovery"),
                   "seed": obj.seed, "makespan_s": obj.makespan_s,
                   "aggregated_processing_s": obj.aggregated_processing_s,
                   "cancelled_count": obj.cancelled_count,
                   "replay_count": obj.replay_count,
                   "failures": len(obj.failures)}
            return series_csv([row])
        return trace_csv(obj)
    raise ValueError(f"unknown format {fmt!r}")


def write_atomic(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
