"""Dynamic task DAG: data versioning, RAW edges, task state machine, DOT export.

The graph is append-only. Task ids are assigned in submission order starting
at 1, and every edge points from a lower id to a higher id, so acyclicity
holds by construction. All mutation goes through one lock so worker
completion callbacks and the submitting thread never interleave badly; the
session shares this lock for its wait conditions.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .errors import IllegalTransition, UnknownHandle


class TaskState(Enum):
    PENDING = "pending"
    READY = "ready"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    RESUBMITTED = "resubmitted"


# Allowed transitions. PENDING/READY -> FAILED covers failure propagation to
# descendants of a task that exhausted its retries.
_ALLOWED = {
    (TaskState.PENDING, TaskState.READY),
    (TaskState.READY, TaskState.RUNNING),
    (TaskState.RUNNING, TaskState.COMPLETED),
    (TaskState.RUNNING, TaskState.FAILED),
    (TaskState.FAILED, TaskState.RESUBMITTED),
    (TaskState.RESUBMITTED, TaskState.READY),
    (TaskState.PENDING, TaskState.FAILED),
    (TaskState.READY, TaskState.FAILED),
}

_TERMINAL = (TaskState.COMPLETED, TaskState.FAILED)


@dataclass(frozen=True)
class DataHandle:
    """Identity and version of one datum flowing between tasks."""

    data_id: int
    version: int = 1

    @property
    def label(self) -> str:
        return f"d{self.data_id}v{self.version}"

    @property
    def filename(self) -> str:
        return f"d{self.data_id}_v{self.version}.bin"


@dataclass
class FailureInfo:
    """Cause record attached to a finally-failed task."""

    task_id: int
    function_id: str
    message: str
    attempts: int
    cause: Optional["FailureInfo"] = None

    def chain(self) -> list["FailureInfo"]:
        out, cur = [], self
        while cur is not None:
            out.append(cur)
            cur = cur.cause
        return out

    def __str__(self) -> str:
        parts = [f"task {i.task_id} ({i.function_id}): {i.message}"
                 for i in self.chain()]
        return " <- caused by: ".join(parts)


@dataclass
class TaskNode:
    """One task instance in the DAG."""

    task_id: int
    function_id: str
    input_handles: list[DataHandle]
    output_handle: Optional[DataHandle]
    state: TaskState = TaskState.PENDING
    attempt: int = 1
    assigned_node: Optional[int] = None
    assigned_slot: Optional[int] = None
    failure: Optional[FailureInfo] = None

    def transition(self, new: TaskState) -> None:
        if (self.state, new) not in _ALLOWED:
            raise IllegalTransition(
                f"task {self.task_id}: {self.state.value} -> {new.value}")
        self.state = new

    @property
    def terminal(self) -> bool:
        return self.state in _TERMINAL


@dataclass
class _NodeDeps:
    unmet_producers: set = field(default_factory=set)


class TaskGraph:
    """The dynamic DAG of task nodes and read-after-write edges."""

    def __init__(self):
        self.lock = threading.RLock()
        self.nodes: dict[int, TaskNode] = {}
        self.edges: set[tuple[int, int, DataHandle]] = set()
        self.completed_count = 0
        self.failed_count = 0
        self.sync_targets: list[int] = []
        self._producer_of: dict[DataHandle, int] = {}
        self._consumers: dict[int, list[int]] = {}
        self._deps: dict[int, _NodeDeps] = {}
        self._next_task_id = 1
        self._next_data_id = 1

    # -- construction --------------------------------------------------------

    def add_task(self, function_id: str, inputs: Iterable[DataHandle],
                 mint_output: bool = True) -> TaskNode:
        """Append a node with one RAW edge per DataHandle input.

        ``inputs`` holds only the DataHandle arguments (immediates never form
        edges). The node is READY at insertion iff every producer is already
        COMPLETED. A new output handle at version 1 is minted unless
        ``mint_output`` is false.
        """
        with self.lock:
            handles = list(inputs)
            for h in handles:
                if h not in self._producer_of:
                    raise UnknownHandle(f"{h.label} was not minted here")
            task_id = self._next_task_id
            self._next_task_id += 1
            out = None
            if mint_output:
                out = DataHandle(self._next_data_id, 1)
                self._next_data_id += 1
            node = TaskNode(task_id, function_id, handles, out)
            self.nodes[task_id] = node
            self._consumers[task_id] = []
            deps = _NodeDeps()
            for h in handles:
                producer = self._producer_of[h]
                if producer == 0:
                    # lifted immediate: no producing task, no edge
                    continue
                self.edges.add((producer, task_id, h))
                self._consumers[producer].append(task_id)
                if self.nodes[producer].state is not TaskState.COMPLETED:
                    deps.unmet_producers.add(producer)
            self._deps[task_id] = deps
            if out is not None:
                self._producer_of[out] = task_id
            if not deps.unmet_producers:
                node.state = TaskState.READY
            return node

    def register_external_handle(self, handle: DataHandle) -> None:
        """Account a handle produced outside any task (an immediate lifted
        into the dataflow); it never gains RAW edges because its pseudo
        producer id 0 has no node."""
        with self.lock:
            self._producer_of[handle] = 0

    def mint_external_handle(self) -> DataHandle:
        with self.lock:
            h = DataHandle(self._next_data_id, 1)
            self._next_data_id += 1
            self._producer_of[h] = 0
            return h

    def note_sync(self, task_id: int) -> None:
        with self.lock:
            if task_id not in self.sync_targets:
                self.sync_targets.append(task_id)

    # -- state machine -------------------------------------------------------

    def mark_running(self, task_id: int) -> None:
        with self.lock:
            self.nodes[task_id].transition(TaskState.RUNNING)

    def mark_completed(self, task_id: int) -> list[TaskNode]:
        """Complete a RUNNING node; return exactly the consumers whose whole
        input set became satisfied by this completion."""
        with self.lock:
            node = self.nodes[task_id]
            node.transition(TaskState.COMPLETED)
            self.completed_count += 1
            newly_ready = []
            for cid in self._consumers[task_id]:
                consumer = self.nodes[cid]
                deps = self._deps[cid]
                deps.unmet_producers.discard(task_id)
                if not deps.unmet_producers and consumer.state is TaskState.PENDING:
                    consumer.transition(TaskState.READY)
                    newly_ready.append(consumer)
            return newly_ready

    def fail_final(self, task_id: int, info: FailureInfo) -> list[TaskNode]:
        """Mark a node finally failed and propagate to all transitive
        consumers; returns the descendants that were failed."""
        with self.lock:
            node = self.nodes[task_id]
            node.transition(TaskState.FAILED)
            node.failure = info
            self.failed_count += 1
            failed = []
            stack = list(self._consumers[task_id])
            while stack:
                cid = stack.pop()
                child = self.nodes[cid]
                if child.state is TaskState.FAILED:
                    continue
                child.transition(TaskState.FAILED)
                child.failure = FailureInfo(
                    cid, child.function_id,
                    f"upstream task {task_id} failed", child.attempt,
                    cause=info)
                self.failed_count += 1
                failed.append(child)
                stack.extend(self._consumers[cid])
            return failed

    def resubmit(self, task_id: int) -> TaskNode:
        with self.lock:
            node = self.nodes[task_id]
            node.transition(TaskState.RESUBMITTED)
            node.attempt += 1
            node.transition(TaskState.READY)
            node.assigned_node = None
            node.assigned_slot = None
            return node

    # -- queries -------------------------------------------------------------

    def producer_of(self, handle: DataHandle) -> Optional[int]:
        with self.lock:
            tid = self._producer_of.get(handle)
            return tid if tid else None

    def consumers_of(self, task_id: int) -> list[int]:
        with self.lock:
            return list(self._consumers.get(task_id, ()))

    def max_task_id(self) -> int:
        with self.lock:
            return self._next_task_id - 1

    def all_terminal(self, up_to: int) -> bool:
        with self.lock:
            return all(self.nodes[t].terminal
                       for t in range(1, up_to + 1))

    def counts_by_state(self) -> dict[str, int]:
        with self.lock:
            out: dict[str, int] = {}
            for node in self.nodes.values():
                out[node.state.value] = out.get(node.state.value, 0) + 1
            return out

    def critical_path_length(self) -> int:
        """Longest path length measured in edges."""
        with self.lock:
            depth = {tid: 0 for tid in self.nodes}
            # consumer-ascending order is topological (producer < consumer)
            for producer, consumer, _ in sorted(
                    self.edges, key=lambda e: (e[1], e[0])):
                depth[consumer] = max(depth[consumer], depth[producer] + 1)
            return max(depth.values(), default=0)

    def weighted_critical_path(self, durations: dict[int, float]) -> float:
        """Heaviest root-to-leaf path where node weights are durations."""
        with self.lock:
            finish: dict[int, float] = {
                tid: durations[tid] for tid in self.nodes}
            for producer, consumer, _ in sorted(
                    self.edges, key=lambda e: (e[1], e[0])):
                finish[consumer] = max(
                    finish[consumer], finish[producer] + durations[consumer])
            return max(finish.values(), default=0.0)

    # -- DOT export ----------------------------------------------------------

    def export_dot(self, path) -> None:
        """Write a snapshot of the DAG as a DOT digraph.

        Tasks appear as their numeric id labeled "id:function"; a "main"
        source points at every zero-in-degree task and each wait_on target
        feeds a "sync" sink (named sync, sync2, sync3, ... in wait order).
        RAW edges carry their dXvY label.
        """
        with self.lock:
            nodes = {tid: n.function_id for tid, n in self.nodes.items()}
            edges = sorted(self.edges,
                           key=lambda e: (e[0], e[1], e[2].data_id, e[2].version))
            sync_targets = list(self.sync_targets)
        have_in = {consumer for _, consumer, _ in edges}
        lines = ["digraph taskgraph {"]
        lines.append('  main [shape=box];')
        for tid in sorted(nodes):
            lines.append(f'  {tid} [label="{tid}:{nodes[tid]}"];')
        for i in range(len(sync_targets)):
            name = "sync" if i == 0 else f"sync{i + 1}"
            lines.append(f'  {name} [shape=octagon, label="sync"];')
        for tid in sorted(nodes):
            if tid not in have_in:
                lines.append(f"  main -> {tid};")
        for producer, consumer, handle in edges:
            lines.append(f'  {producer} -> {consumer} [label="{handle.label}"];')
        for i, tid in enumerate(sync_targets):
            name = "sync" if i == 0 else f"sync{i + 1}"
            lines.append(f"  {tid} -> {name};")
        lines.append("}")
        text = "\n".join(lines) + "\n"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
