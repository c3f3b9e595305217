"""Execution trace recorder and post-mortem analysis.

Every lifecycle event of every task attempt is appended to a bounded
in-memory buffer; on export the buffer is sorted by timestamp and written as
CSV (``ts_ns,node,slot,task,function,kind,bytes``) together with a summary
of per-function durations and per-slot utilization.

Timestamps come from one monotonic clock origin shared with every worker
process, so cross-process event ordering is meaningful. Master-side events
(Submit, transfers) carry node=-1/slot=-1. Transfer events reuse the
function column for the payload label (for example ``d3v1``) because that is
the natural identity of what was moved.
"""

from __future__ import annotations

import csv
import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional


class EventKind(Enum):
    SUBMIT = "submit"
    DISPATCH = "dispatch"
    START = "start"
    END = "end"
    FAIL = "fail"
    TRANSFER_START = "transfer_start"
    TRANSFER_END = "transfer_end"


@dataclass(frozen=True)
class TraceEvent:
    ts_ns: int
    node_id: int
    slot_id: int
    task_id: int
    function_id: str
    kind: EventKind
    bytes: int = 0


MASTER = -1


class TraceRecorder:
    """Bounded, lock-protected append buffer for trace events."""

    def __init__(self, enabled: bool = True, capacity: int = 1_000_000):
        self.enabled = enabled
        self.capacity = capacity
        self.dropped = False
        self._events: list[TraceEvent] = []
        self._lock = threading.Lock()
        self._origin_ns = time.monotonic_ns()

    @property
    def origin_ns(self) -> int:
        return self._origin_ns

    def now_ns(self) -> int:
        return time.monotonic_ns() - self._origin_ns

    def record(self, event: TraceEvent) -> None:
        if not self.enabled:
            return
        with self._lock:
            if len(self._events) >= self.capacity:
                self.dropped = True
                return
            self._events.append(event)

    def record_now(self, node_id: int, slot_id: int, task_id: int,
                   function_id: str, kind: EventKind, nbytes: int = 0) -> None:
        self.record(TraceEvent(self.now_ns(), node_id, slot_id, task_id,
                               function_id, kind, nbytes))

    def events(self) -> list[TraceEvent]:
        with self._lock:
            return sorted(self._events, key=lambda e: (e.ts_ns, e.task_id))

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)


@dataclass
class FunctionStats:
    count: int = 0
    total_ns: int = 0

    @property
    def mean_ns(self) -> float:
        return self.total_ns / self.count if self.count else 0.0


@dataclass
class SlotStats:
    node_id: int
    slot_id: int
    busy_ns: int = 0
    tasks: int = 0
    idle_gaps: list = field(default_factory=list)

    def busy_fraction(self, span_ns: int) -> float:
        return self.busy_ns / span_ns if span_ns else 0.0

    @property
    def idle_ns(self) -> int:
        return sum(b - a for a, b in self.idle_gaps)


@dataclass
class TraceSummary:
    span_ns: int
    event_count: int
    functions: dict[str, FunctionStats]
    slots: dict[tuple[int, int], SlotStats]
    dropped: bool

    def to_json(self) -> str:
        doc = {
            "span_ns": self.span_ns,
            "event_count": self.event_count,
            "dropped": self.dropped,
            "functions": {
                fid: {"count": s.count, "total_ns": s.total_ns,
                      "mean_ns": s.mean_ns}
                for fid, s in sorted(self.functions.items())},
            "slots": {
                f"{node}/{slot}": {
                    "busy_ns": s.busy_ns, "tasks": s.tasks,
                    "busy_fraction": s.busy_fraction(self.span_ns),
                    "idle_ns": s.idle_ns}
                for (node, slot), s in sorted(self.slots.items())},
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def format_table(self) -> str:
        lines = [f"{'function':<24}{'count':>8}{'total_ms':>12}{'mean_ms':>12}"]
        for fid, s in sorted(self.functions.items()):
            lines.append(f"{fid:<24}{s.count:>8}{s.total_ns / 1e6:>12.3f}"
                         f"{s.mean_ns / 1e6:>12.3f}")
        lines.append("")
        lines.append(f"{'node/slot':<12}{'tasks':>8}{'busy_ms':>12}{'busy%':>8}")
        for (node, slot), s in sorted(self.slots.items()):
            lines.append(f"{f'{node}/{slot}':<12}{s.tasks:>8}"
                         f"{s.busy_ns / 1e6:>12.3f}"
                         f"{100 * s.busy_fraction(self.span_ns):>8.1f}")
        return "\n".join(lines)


def summarize(events: list[TraceEvent]) -> TraceSummary:
    functions: dict[str, FunctionStats] = {}
    slots: dict[tuple[int, int], SlotStats] = {}
    span = events[-1].ts_ns - events[0].ts_ns if events else 0
    open_start: dict[tuple[int, int], int] = {}
    last_close: dict[tuple[int, int], int] = {}
    for ev in events:
        key = (ev.node_id, ev.slot_id)
        if ev.kind is EventKind.START:
            open_start[key] = ev.ts_ns
            slot = slots.setdefault(key, SlotStats(*key))
            if key in last_close and ev.ts_ns > last_close[key]:
                slot.idle_gaps.append((last_close[key], ev.ts_ns))
        elif ev.kind in (EventKind.END, EventKind.FAIL):
            slot = slots.setdefault(key, SlotStats(*key))
            started = open_start.pop(key, None)
            if started is not None:
                dur = ev.ts_ns - started
                slot.busy_ns += dur
                slot.tasks += 1
                last_close[key] = ev.ts_ns
                if ev.kind is EventKind.END:
                    st = functions.setdefault(ev.function_id, FunctionStats())
                    st.count += 1
                    st.total_ns += dur
    return TraceSummary(span, len(events), functions, slots, dropped=False)


def export_trace(recorder: TraceRecorder, path) -> TraceSummary:
    """Write the sorted trace as CSV plus a JSON summary alongside."""
    events = recorder.events()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ts_ns", "node", "slot", "task", "function",
                         "kind", "bytes"])
        for ev in events:
            writer.writerow([ev.ts_ns, ev.node_id, ev.slot_id, ev.task_id,
                             ev.function_id, ev.kind.value, ev.bytes])
    summary = summarize(events)
    summary.dropped = recorder.dropped
    with open(str(path) + ".summary.json", "w", encoding="utf-8") as fh:
        fh.write(summary.to_json() + "\n")
    return summary


def read_trace(path) -> list[TraceEvent]:
    """Parse a CSV trace file back into events."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(TraceEvent(
                int(row["ts_ns"]), int(row["node"]), int(row["slot"]),
                int(row["task"]), row["function"], EventKind(row["kind"]),
                int(row["bytes"])))
    return out


# -- invariant checks over a finished trace ----------------------------------

def check_event_conservation(events: Iterable[TraceEvent]) -> None:
    """Start count = End + Fail count, and Dispatch count >= Start count."""
    counts = {kind: 0 for kind in EventKind}
    for ev in events:
        counts[ev.kind] += 1
    starts = counts[EventKind.START]
    closes = counts[EventKind.END] + counts[EventKind.FAIL]
    if starts != closes:
        raise AssertionError(f"start={starts} but end+fail={closes}")
    if counts[EventKind.DISPATCH] < starts:
        raise AssertionError(
            f"dispatch={counts[EventKind.DISPATCH]} < start={starts}")


def check_busy_disjoint(events: Iterable[TraceEvent]) -> None:
    """Per slot, [Start, End/Fail] intervals must not overlap."""
    intervals: dict[tuple[int, int], list[tuple[int, int]]] = {}
    open_start: dict[tuple[int, int], int] = {}
    for ev in sorted(events, key=lambda e: e.ts_ns):
        key = (ev.node_id, ev.slot_id)
        if ev.kind is EventKind.START:
            if key in open_start:
                raise AssertionError(f"slot {key}: nested Start")
            open_start[key] = ev.ts_ns
        elif ev.kind in (EventKind.END, EventKind.FAIL):
            if key in open_start:
                intervals.setdefault(key, []).append(
                    (open_start.pop(key), ev.ts_ns))
    for key, spans in intervals.items():
        spans.sort()
        for (a0, b0), (a1, _b1) in zip(spans, spans[1:]):
            if a1 < b0:
                raise AssertionError(
                    f"slot {key}: overlap [{a0},{b0}] vs start {a1}")


def check_edge_ordering(events: Iterable[TraceEvent],
                        edges: Iterable[tuple[int, int]]) -> None:
    """For every RAW edge (p, c): last End of p <= first Start of c."""
    first_start: dict[int, int] = {}
    last_end: dict[int, int] = {}
    for ev in events:
        if ev.kind is EventKind.START:
            first_start.setdefault(ev.task_id, ev.ts_ns)
            first_start[ev.task_id] = min(first_start[ev.task_id], ev.ts_ns)
        elif ev.kind is EventKind.END:
            last_end[ev.task_id] = max(last_end.get(ev.task_id, 0), ev.ts_ns)
    for producer, consumer in edges:
        if producer in last_end and consumer in first_start:
            if last_end[producer] > first_start[consumer]:
                raise AssertionError(
                    f"edge {producer}->{consumer}: producer ended at "
                    f"{last_end[producer]} after consumer start "
                    f"{first_start[consumer]}")


def check_work_conservation(events: Iterable[TraceEvent],
                            edges: Iterable[tuple[int, int]] = (),
                            eps_ns: int = 50_000_000) -> None:
    """No slot may sit idle through a window in which some task was
    continuously dispatchable.

    A task counts as dispatchable from the instant its last producer ended
    (its own Submit for source tasks) until its own Dispatch. A slot is
    occupied from Dispatch to End/Fail of the task it runs. Gaps shorter
    than ``eps_ns`` are scheduling latency, not idleness.
    """
    events = sorted(events, key=lambda e: e.ts_ns)
    submit: dict[int, int] = {}
    ends: dict[int, int] = {}
    dispatches: dict[int, list[int]] = {}
    slot_busy: dict[tuple[int, int], list[tuple[int, int]]] = {}
    slot_open: dict[tuple[int, int], tuple[int, int]] = {}
    slots_seen: set[tuple[int, int]] = set()
    for ev in events:
        if ev.kind is EventKind.SUBMIT:
            submit[ev.task_id] = ev.ts_ns
        elif ev.kind is EventKind.DISPATCH:
            key = (ev.node_id, ev.slot_id)
            slots_seen.add(key)
            dispatches.setdefault(ev.task_id, []).append(ev.ts_ns)
            slot_open[key] = (ev.ts_ns, ev.task_id)
        elif ev.kind in (EventKind.END, EventKind.FAIL):
            key = (ev.node_id, ev.slot_id)
            if key in slot_open:
                t0, _tid = slot_open.pop(key)
                slot_busy.setdefault(key, []).append((t0, ev.ts_ns))
            if ev.kind is EventKind.END:
                ends[ev.task_id] = ev.ts_ns

    if not events:
        return
    t_last = events[-1].ts_ns
    producers_of: dict[int, list[int]] = {}
    for producer, consumer in edges:
        producers_of.setdefault(consumer, []).append(producer)
    # ready window per task: last producer End (or own Submit) to first Dispatch
    ready_windows: list[tuple[int, int]] = []
    for tid, disp_list in dispatches.items():
        ready_at = submit.get(tid, 0)
        for producer in producers_of.get(tid, ()):
            if producer not in ends:
                break
            ready_at = max(ready_at, ends[producer])
        else:
            ready_windows.append((ready_at, min(disp_list)))

    for key in slots_seen:
        busy = sorted(slot_busy.get(key, []))
        if key in slot_open:  # still open at trace end
            t0, _ = slot_open[key]
            busy.append((t0, t_last))
        gaps = []
        cursor = events[0].ts_ns
        for a, b in busy:
            if a - cursor > eps_ns:
                gaps.append((cursor, a))
            cursor = max(cursor, b)
        if t_last - cursor > eps_ns:
            gaps.append((cursor, t_last))
        for g0, g1 in gaps:
            for r0, r1 in ready_windows:
                if r0 <= g0 + eps_ns and r1 >= g1 - eps_ns:
                    raise AssertionError(
                        f"slot {key} idle [{g0},{g1}] while a task was "
                        f"dispatchable throughout [{r0},{r1}]")


def check_task_ordering(events: Iterable[TraceEvent]) -> None:
    """Per task: Submit precedes Dispatch; every Start follows a Dispatch;
    every End/Fail follows a Start (attempt by attempt)."""
    per_task: dict[int, list[TraceEvent]] = {}
    for ev in sorted(events, key=lambda e: e.ts_ns):
        if ev.task_id >= 0 and ev.kind in (
                EventKind.SUBMIT, EventKind.DISPATCH, EventKind.START,
                EventKind.END, EventKind.FAIL):
            per_task.setdefault(ev.task_id, []).append(ev)
    for tid, evs in per_task.items():
        state = "new"
        for ev in evs:
            kind = ev.kind
            if kind is EventKind.SUBMIT:
                ok = state == "new"
                state = "submitted"
            elif kind is EventKind.DISPATCH:
                # a redispatch without Start happens when a worker dies
                ok = state in ("submitted", "dispatched", "closed")
                state = "dispatched"
            elif kind is EventKind.START:
                ok = state == "dispatched"
                state = "running"
            else:  # END or FAIL
                ok = state == "running"
                state = "closed"
            if not ok:
                raise AssertionError(
                    f"task {tid}: unexpected {kind.value} in state {state}")
