"""flowrt: a task-based dataflow runtime.

Write sequential code, register functions as tasks, and the runtime detects
data dependencies through future handles, builds the task DAG on the fly,
and executes it asynchronously on a thread pool or on multi-process virtual
nodes with file-based parameter passing.
"""

from .config import Backend, RuntimeConfig, load_config
from .errors import (
    ArityMismatch,
    BadMagic,
    ChecksumMismatch,
    CodecError,
    DimensionMismatch,
    DuplicateRegistration,
    FlowrtError,
    IllegalTransition,
    ScratchUnwritable,
    SentinelPresent,
    SessionStopped,
    ShapeMismatch,
    SingularSystem,
    TaskFailed,
    TruncatedPayload,
    UnknownHandle,
    UnknownTypeTag,
    UnsupportedType,
    WorkerSpawnFailure,
)
from .graph import DataHandle, TaskGraph, TaskNode, TaskState
from .runtime import (
    FutureHandle,
    RuntimeSession,
    SessionReport,
    TaskRegistration,
    barrier,
    invoke,
    register_task,
    runtime_start,
    runtime_stop,
    wait_on,
)
from .scheduler import ExecutorSlot, Policy, dispatch, makespan_lower_bound
from .tracing import EventKind, TraceEvent, TraceRecorder, export_trace

__version__ = "0.1.0"

__all__ = [
    "ArityMismatch", "Backend", "BadMagic", "ChecksumMismatch", "CodecError",
    "DataHandle", "DimensionMismatch", "DuplicateRegistration", "EventKind",
    "ExecutorSlot", "FlowrtError", "FutureHandle", "IllegalTransition",
    "Policy", "RuntimeConfig", "RuntimeSession", "ScratchUnwritable",
    "SentinelPresent", "SessionReport", "SessionStopped", "ShapeMismatch",
    "SingularSystem", "TaskFailed", "TaskGraph", "TaskNode",
    "TaskRegistration", "TaskState", "TraceEvent", "TraceRecorder",
    "TruncatedPayload", "UnknownHandle", "UnknownTypeTag", "UnsupportedType",
    "WorkerSpawnFailure", "barrier", "dispatch", "export_trace", "invoke",
    "load_config", "makespan_lower_bound", "register_task", "runtime_start",
    "runtime_stop", "wait_on",
]
