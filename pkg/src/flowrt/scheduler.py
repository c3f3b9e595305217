"""Dispatch policies and retry-based fault tolerance.

The scheduler itself is a pure decision layer: ``dispatch`` maps a snapshot
of (ready tasks, free slots) to a matching, and ``handle_failure`` applies
the retry state machine to the graph. The session's event loop owns when
these get called (on task submission and on task completion, nothing else).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

from .graph import FailureInfo, TaskGraph, TaskNode, TaskState


class Policy(Enum):
    FIFO = "fifo"
    LIFO = "lifo"
    LOCALITY = "locality"

    @classmethod
    def parse(cls, name: str) -> "Policy":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(
                f"unknown policy {name!r}; expected fifo|lifo|locality"
            ) from None


@dataclass
class ExecutorSlot:
    """One executor of one virtual node."""

    slot_id: int
    virtual_node: int = 0
    busy: bool = False
    current_task: Optional[int] = None

    def assign(self, task_id: int) -> None:
        self.busy = True
        self.current_task = task_id

    def release(self) -> None:
        self.busy = False
        self.current_task = None


ResidencyFn = Callable[[TaskNode, int], int]


def _zero_residency(task: TaskNode, node_id: int) -> int:
    return 0


def dispatch(policy: Policy,
             ready: Sequence[TaskNode],
             free_slots: Sequence[ExecutorSlot],
             resident_bytes: Optional[ResidencyFn] = None,
             ) -> list[tuple[int, int]]:
    """Match ready tasks against free slots; returns (task_id, slot_id) pairs.

    FIFO assigns ready tasks in ascending task id, LIFO in descending id.
    LOCALITY walks free slots in ascending slot id and, for each, picks the
    ready task with the most input payload bytes already resident on the
    slot's virtual node (ties by ascending task id). Deterministic for a
    frozen input.
    """
    slots = sorted(free_slots, key=lambda s: s.slot_id)
    if not slots or not ready:
        return []
    if policy is Policy.FIFO:
        tasks = sorted(ready, key=lambda t: t.task_id)
        return [(t.task_id, s.slot_id) for t, s in zip(tasks, slots)]
    if policy is Policy.LIFO:
        tasks = sorted(ready, key=lambda t: -t.task_id)
        return [(t.task_id, s.slot_id) for t, s in zip(tasks, slots)]

    residency = resident_bytes or _zero_residency
    remaining = sorted(ready, key=lambda t: t.task_id)
    matching: list[tuple[int, int]] = []
    for slot in slots:
        if not remaining:
            break
        best = max(remaining,
                   key=lambda t: (residency(t, slot.virtual_node), -t.task_id))
        remaining.remove(best)
        matching.append((best.task_id, slot.slot_id))
    return matching


class FailureAction(Enum):
    RESUBMITTED = "resubmitted"
    FAILED_FINAL = "failed_final"


def handle_failure(graph: TaskGraph, task_id: int, error: str,
                   max_retries: int) -> FailureAction:
    """Apply the retry policy to a RUNNING task that just failed.

    With retries left the node goes back to READY with attempt+1; otherwise
    it is failed for good and every transitive consumer is failed with a
    cause chain pointing back at this task.
    """
    with graph.lock:
        node = graph.nodes[task_id]
        if node.attempt <= max_retries:
            # pass through FAILED so the state machine history is honest
            node.transition(TaskState.FAILED)
            graph.resubmit(task_id)
            return FailureAction.RESUBMITTED
        info = FailureInfo(task_id, node.function_id, error, node.attempt)
        graph.fail_final(task_id, info)
        return FailureAction.FAILED_FINAL


def makespan_lower_bound(graph: TaskGraph, durations: dict[int, float],
                         slot_count: int) -> float:
    """max(critical-path duration, total work / slot_count)."""
    total = sum(durations.values())
    path = graph.weighted_critical_path(durations)
    return max(path, total / slot_count)
