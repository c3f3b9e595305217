"""Public programming surface: session lifecycle, task registration, futures.

The model mirrors a five-call API: start the runtime, register plain
functions as tasks, call them to get future handles back immediately, then
``wait_on``/``barrier`` to synchronize and ``stop`` to tear down. Passing a
future into another task call is what creates a dependency edge; immediates
are snapshotted at call time.

A single application thread submits work; a dispatcher thread owns all
scheduling decisions, reacting only to task submission and task completion
events. Workers hand results back through the event queue, so the graph,
value store, and trace buffer are never mutated from two sides at once.
"""

from __future__ import annotations

import inspect
import queue
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .config import Backend, RuntimeConfig
from .errors import (
    ArityMismatch,
    DuplicateRegistration,
    FlowrtError,
    SessionStopped,
    TaskFailed,
    UnknownHandle,
)
from .executor import FILE_VALUE, ImmediateArg, LocalBackend, ProcessBackend
from .graph import DataHandle, TaskGraph, TaskState
from .payload import dump_value, load_value
from .scheduler import FailureAction, Policy, dispatch, handle_failure
from .tracing import MASTER, EventKind, TraceRecorder, export_trace

_SHUTDOWN = ("shutdown",)

_active_lock = threading.Lock()
_active_session: Optional["RuntimeSession"] = None


@dataclass(frozen=True)
class FutureHandle:
    """Opaque placeholder for a task output (or a lifted immediate)."""

    data: DataHandle
    producing_task: Optional[int]
    session_id: int


class TaskRegistration:
    """A function the runtime may execute asynchronously.

    ``arity`` of None means variadic (no argument-count check); merge-style
    tasks with configurable fan-in use that. Calling the registration is
    sugar for ``session.invoke(reg, args)``.
    """

    def __init__(self, session: "RuntimeSession", function_id: str, fn,
                 arity: Optional[int], returns_value: bool):
        self.function_id = function_id
        self.fn = fn
        self.arity = arity
        self.returns_value = returns_value
        self._session = session

    def __call__(self, *args) -> FutureHandle:
        return self._session.invoke(self, list(args))

    def __repr__(self):
        return (f"TaskRegistration({self.function_id!r}, arity={self.arity}, "
                f"returns_value={self.returns_value})")


@dataclass
class SessionReport:
    """What runtime_stop hands back."""

    counts: dict[str, int]
    completed: int
    failed: int
    wall_seconds: float
    trace_path: Optional[Path] = None
    dot_path: Optional[Path] = None
    trace_flush_error: Optional[str] = None
    events_dropped: bool = False
    summary: object = None


def _derive_arity(fn) -> Optional[int]:
    try:
        sig = inspect.signature(fn)
    except (TypeError, ValueError):
        return None
    count = 0
    for p in sig.parameters.values():
        if p.kind in (p.VAR_POSITIONAL, p.VAR_KEYWORD):
            return None
        count += 1
    return count


class RuntimeSession:
    """One start..stop window of the runtime."""

    _ids = iter(range(1, 1 << 62))

    def __init__(self, config: RuntimeConfig):
        config.validate()
        self.config = config
        self.session_id = next(self._ids)
        self.graph = TaskGraph()
        self._cond = threading.Condition(self.graph.lock)
        self._recorder = TraceRecorder(enabled=config.trace_enabled)
        self._events: queue.Queue = queue.Queue()
        self._registry: dict[str, TaskRegistration] = {}
        self._arg_specs: dict[int, list] = {}
        self._returns: dict[int, bool] = {}
        self._task_functions: dict[int, str] = {}
        self._values: dict[DataHandle, object] = {}
        self._resolved: dict[DataHandle, object] = {}
        self._immediates: dict[DataHandle, ImmediateArg] = {}
        self._ready: dict[int, object] = {}
        self._next_imm_id = 1
        self._stopped = False
        self._started_at = time.monotonic()

        self._tempdir = None
        if config.scratch_dir is None:
            self._tempdir = tempfile.TemporaryDirectory(prefix="flowrt-")
            scratch = Path(self._tempdir.name)
        else:
            scratch = Path(tempfile.mkdtemp(
                prefix=f"{config.app_name}-", dir=config.scratch_dir))
        self.scratch = scratch

        if config.backend is Backend.THREADS:
            self.backend = LocalBackend(config.worker_count, self._recorder,
                                        self._events)
        else:
            self.backend = ProcessBackend(
                config.virtual_node_count, config.workers_per_node,
                scratch, self._recorder, self._events)
            self.backend.bind_task_functions(self._task_functions)
        try:
            self.backend.start()
        except Exception:
            try:
                self.backend.shutdown()
            except Exception:
                pass
            self._cleanup_scratch()
            raise
        self._dispatcher = threading.Thread(target=self._dispatch_loop,
                                            name="flowrt-dispatcher",
                                            daemon=True)
        self._dispatcher.start()

    # -- context manager -------------------------------------------------

    def __enter__(self) -> "RuntimeSession":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if not self._stopped:
            self.stop()

    # -- public API --------------------------------------------------------

    def register_task(self, function_id: str, fn, arity: Optional[int] = None,
                      returns_value: bool = True,
                      variadic: bool = False) -> TaskRegistration:
        """Register ``fn`` under a stable id; later calls run asynchronously.

        ``arity`` defaults to the function's positional parameter count;
        pass ``variadic=True`` for a registration that accepts any argument
        count (merge-style tasks).
        """
        with self._cond:
            self._check_active()
            if function_id in self._registry:
                raise DuplicateRegistration(
                    f"{function_id!r} is already registered")
            if variadic:
                checked_arity = None
            elif arity is not None:
                checked_arity = arity
            else:
                checked_arity = _derive_arity(fn)
            reg = TaskRegistration(self, function_id, fn, checked_arity,
                                   returns_value)
            self.backend.register_function(function_id, fn)
            self._registry[function_id] = reg
            return reg

    def invoke(self, registration: TaskRegistration, args: list) -> FutureHandle:
        """Submit one asynchronous task; returns without waiting."""
        with self._cond:
            self._check_active()
            if self._registry.get(registration.function_id) is not registration:
                raise FlowrtError(
                    f"registration {registration.function_id!r} does not "
                    f"belong to this session")
            if registration.arity is not None and len(args) != registration.arity:
                raise ArityMismatch(
                    f"{registration.function_id} expects "
                    f"{registration.arity} args, got {len(args)}")
            specs: list = []
            edge_handles: list[DataHandle] = []
            for arg in args:
                if isinstance(arg, FutureHandle):
                    if arg.session_id != self.session_id:
                        raise UnknownHandle(
                            "future handle belongs to another session")
                    if arg.producing_task is None:
                        specs.append(self._immediates[arg.data])
                    else:
                        specs.append(arg.data)
                        edge_handles.append(arg.data)
                else:
                    specs.append(self._snapshot(arg))
            node = self.graph.add_task(registration.function_id, edge_handles)
            self._arg_specs[node.task_id] = specs
            self._returns[node.task_id] = registration.returns_value
            self._task_functions[node.task_id] = registration.function_id
            self._recorder.record_now(MASTER, MASTER, node.task_id,
                                      registration.function_id,
                                      EventKind.SUBMIT)
            self._events.put(("submit", node.task_id))
            return FutureHandle(node.output_handle, node.task_id,
                                self.session_id)

    def immediate(self, value) -> FutureHandle:
        """Lift a plain value into a handle (resolvable without blocking)."""
        with self._cond:
            self._check_active()
            imm = self._snapshot(value)
            handle = self.graph.mint_external_handle()
            self._immediates[handle] = imm
            return FutureHandle(handle, None, self.session_id)

    def wait_on(self, handle: FutureHandle):
        """Block until the producing task finished; return its value.

        Idempotent: resolved values are cached, the producer runs once.
        Raises TaskFailed with the cause chain when retries were exhausted.
        """
        with self._cond:
            self._check_active()
            if not isinstance(handle, FutureHandle) \
                    or handle.session_id != self.session_id:
                raise UnknownHandle("handle does not belong to this session")
            if handle.data in self._resolved:
                return self._resolved[handle.data]
            if handle.producing_task is None:
                value = self._immediate_value(self._immediates[handle.data])
                self._resolved[handle.data] = value
                return value
            self.graph.note_sync(handle.producing_task)
            node = self.graph.nodes[handle.producing_task]
            while not node.terminal:
                self._cond.wait()
            if node.state is TaskState.FAILED:
                raise TaskFailed(node.failure)
            value = self._fetch(handle.data)
            self._resolved[handle.data] = value
            return value

    def barrier(self) -> None:
        """Return only when every task submitted so far is terminal."""
        with self._cond:
            self._check_active()
            horizon = self.graph.max_task_id()
            while not self.graph.all_terminal(horizon):
                self._cond.wait()

    def stop(self) -> SessionReport:
        """Implicit barrier, worker shutdown, trace/DOT flush, final report."""
        with self._cond:
            self._check_active()
        self.barrier()
        self._events.put(_SHUTDOWN)
        self._dispatcher.join(timeout=60)
        self.backend.shutdown()
        with self._cond:
            self._stopped = True

        report = SessionReport(
            counts=self.graph.counts_by_state(),
            completed=self.graph.completed_count,
            failed=self.graph.failed_count,
            wall_seconds=time.monotonic() - self._started_at,
            events_dropped=self._recorder.dropped)
        out_dir = Path(self.config.output_dir)
        if self.config.graph_export_enabled:
            out_dir.mkdir(parents=True, exist_ok=True)
            report.dot_path = out_dir / f"{self.config.app_name}_graph.dot"
            self.graph.export_dot(report.dot_path)
        if self.config.trace_enabled:
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / f"{self.config.app_name}_trace.csv"
            try:
                report.summary = export_trace(self._recorder, path)
                report.trace_path = path
            except OSError as exc:
                report.trace_flush_error = str(exc)
        self._cleanup_scratch()
        _clear_active(self)
        return report

    # -- introspection (tests, tooling) -------------------------------------

    @property
    def recorder(self) -> TraceRecorder:
        return self._recorder

    def worker_pids(self) -> dict[int, int]:
        return self.backend.worker_pids()

    # -- internals -----------------------------------------------------------

    def _check_active(self) -> None:
        if self._stopped:
            raise SessionStopped("runtime session is stopped")

    def _snapshot(self, value) -> ImmediateArg:
        """Snapshot an immediate at invoke time via a codec round trip, so
        later caller-side mutation cannot leak into the task."""
        blob = dump_value(value)
        imm_id = self._next_imm_id
        self._next_imm_id += 1
        if self.backend.is_multiprocess:
            return ImmediateArg(imm_id, blob=blob)
        return ImmediateArg(imm_id, value=load_value(blob))

    def _immediate_value(self, imm: ImmediateArg):
        if imm.blob is not None:
            return load_value(imm.blob)
        return imm.value

    def _fetch(self, data: DataHandle):
        if data in self._values:
            return self._values[data]
        if self.backend.is_multiprocess:
            return self.backend.fetch_value(data)
        return None

    def _resolve_local_args(self, task_id: int) -> list:
        out = []
        for spec in self._arg_specs[task_id]:
            if isinstance(spec, DataHandle):
                out.append(self._values.get(spec))
            else:
                out.append(spec.value)
        return out

    # -- dispatcher thread -----------------------------------------------

    def _dispatch_loop(self) -> None:
        cfg = self.config
        while True:
            ev = self._events.get()
            if ev is _SHUTDOWN:
                return
            kind = ev[0]
            if kind == "submit":
                tid = ev[1]
                with self.graph.lock:
                    node = self.graph.nodes[tid]
                    if node.state is TaskState.READY:
                        self._ready[tid] = node
            elif kind == "done":
                _, tid, value, slot_id, out_bytes = ev
                slot = self.backend.slots[slot_id]
                slot.release()
                node = self.graph.nodes[tid]
                with self.graph.lock:
                    if value is FILE_VALUE:
                        if node.output_handle is not None:
                            self.backend.note_output(
                                node.output_handle, slot.virtual_node,
                                out_bytes)
                    elif node.output_handle is not None:
                        stored = value if self._returns[tid] else None
                        self._values[node.output_handle] = stored
                    newly = self.graph.mark_completed(tid)
                    for n in newly:
                        self._ready[n.task_id] = n
                    self._cond.notify_all()
            elif kind == "fail":
                _, tid, error, slot_id = ev
                self.backend.slots[slot_id].release()
                self._apply_failure(tid, error)
            elif kind == "worker_died":
                self._on_worker_died(ev[1], ev[2])
            self._dispatch_cycle()

    def _apply_failure(self, tid: int, error: str) -> None:
        with self.graph.lock:
            action = handle_failure(self.graph, tid, error,
                                    self.config.max_retries)
            if action is FailureAction.RESUBMITTED:
                self._ready[tid] = self.graph.nodes[tid]
            else:
                for t in [t for t, n in self._ready.items()
                          if n.state is TaskState.FAILED]:
                    del self._ready[t]
                self._cond.notify_all()

    def _on_worker_died(self, slot_id: int, generation: int) -> None:
        if not self.backend.is_multiprocess:
            return
        if self.backend.generation(slot_id) != generation:
            return  # stale notification for an already-replaced worker
        slot = self.backend.slots[slot_id]
        tid = slot.current_task
        slot.release()
        if tid is not None and self.graph.nodes[tid].state is TaskState.RUNNING:
            self._apply_failure(tid, "worker process died")
        self.backend.respawn(slot)

    def _dispatch_cycle(self) -> None:
        if not self._ready:
            return
        free = [s for s in self.backend.slots if not s.busy]
        if not free:
            return
        residency = None
        if self.backend.is_multiprocess \
                and self.config.scheduler_policy is Policy.LOCALITY:
            residency = self.backend.resident_bytes
        pairs = dispatch(self.config.scheduler_policy,
                         list(self._ready.values()), free, residency)
        for task_id, slot_id in pairs:
            node = self._ready.pop(task_id)
            slot = self.backend.slots[slot_id]
            with self.graph.lock:
                self.graph.mark_running(task_id)
                node.assigned_node = slot.virtual_node
                node.assigned_slot = slot_id
            slot.assign(task_id)
            self._recorder.record_now(slot.virtual_node, slot_id, task_id,
                                      node.function_id, EventKind.DISPATCH)
            try:
                if self.backend.is_multiprocess:
                    self.backend.submit(slot, node,
                                        self._arg_specs[task_id],
                                        self._returns[task_id])
                else:
                    self.backend.submit(slot, node,
                                        self._resolve_local_args(task_id),
                                        self._returns[task_id])
            except OSError:
                # channel to this worker broke mid-send; the reader thread
                # notices too, but make sure recovery is queued exactly once
                self._events.put(("worker_died", slot_id,
                                  self.backend.generation(slot_id)))

    def _cleanup_scratch(self) -> None:
        if self._tempdir is not None:
            self._tempdir.cleanup()
            self._tempdir = None


# -- module-level five-call surface -------------------------------------------

def runtime_start(config: Optional[RuntimeConfig] = None,
                  **overrides) -> RuntimeSession:
    """Start the runtime: spawn idle workers, arm tracing, empty graph."""
    global _active_session
    cfg = config or RuntimeConfig()
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    with _active_lock:
        if _active_session is not None:
            raise FlowrtError("a runtime session is already active in this "
                              "process; stop it first")
        session = RuntimeSession(cfg)
        _active_session = session
        return session


def _clear_active(session: RuntimeSession) -> None:
    global _active_session
    with _active_lock:
        if _active_session is session:
            _active_session = None


def register_task(session: RuntimeSession, function_id: str, fn,
                  arity: Optional[int] = None, returns_value: bool = True,
                  variadic: bool = False) -> TaskRegistration:
    return session.register_task(function_id, fn, arity=arity,
                                 returns_value=returns_value,
                                 variadic=variadic)


def invoke(session: RuntimeSession, registration: TaskRegistration,
           args: list) -> FutureHandle:
    return session.invoke(registration, args)


def wait_on(session: RuntimeSession, handle: FutureHandle):
    return session.wait_on(handle)


def barrier(session: RuntimeSession) -> None:
    session.barrier()


def runtime_stop(session: RuntimeSession) -> SessionReport:
    return session.stop()
