"""Execution backends: in-process thread pool and multi-process virtual nodes.

Both backends expose the same surface to the session: a list of executor
slots, ``register_function``, ``submit(slot, ...)``, and ``shutdown``. Task
outcomes flow back to the session's event queue as plain tuples::

    ("done", task_id, value_or_None, slot_id)
    ("fail", task_id, error_message, slot_id)
    ("worker_died", slot_id)

The thread backend keeps argument and result values in memory. The process
backend stands in for a cluster: each virtual node is a group of worker
processes sharing a private scratch directory, parameters travel as payload
files, and inter-node reads happen through explicit file copies that are
counted in the trace and cached per (payload, node).
"""

from __future__ import annotations

import multiprocessing as mp
import os
import pickle
import queue
import shutil
import socket
import threading
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .channel import ChannelClosed, atomic_write_bytes, recv_frame, send_frame
from .errors import UnsupportedType, WorkerSpawnFailure
from .graph import DataHandle, TaskNode
from .payload import load_value
from .scheduler import ExecutorSlot
from .tracing import MASTER, EventKind, TraceEvent, TraceRecorder
from .worker import worker_main

_STOP = object()
_HELLO_TIMEOUT_S = 60.0

#: placeholder value in "done" events whose real payload lives in a file
FILE_VALUE = object()


@dataclass
class ImmediateArg:
    """A non-future argument snapshotted at invoke time.

    The thread backend keeps the decoded snapshot, the process backend keeps
    the encoded bytes it will stage as ``imm<id>.bin`` files.
    """

    imm_id: int
    value: object = None
    blob: Optional[bytes] = None

    @property
    def label(self) -> str:
        return f"imm{self.imm_id}"

    @property
    def filename(self) -> str:
        return f"imm{self.imm_id}.bin"


class LocalBackend:
    """Persistent pool of worker threads, one per executor slot."""

    is_multiprocess = False

    def __init__(self, worker_count: int, recorder: TraceRecorder,
                 events: "queue.Queue"):
        self.slots = [ExecutorSlot(slot_id=i, virtual_node=0)
                      for i in range(worker_count)]
        self._recorder = recorder
        self._events = events
        self._functions: dict[str, callable] = {}
        self._mailboxes = [queue.Queue() for _ in self.slots]
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        for slot in self.slots:
            t = threading.Thread(target=self._run_slot, args=(slot,),
                                 name=f"flowrt-exec-{slot.slot_id}",
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def register_function(self, function_id: str, fn) -> None:
        self._functions[function_id] = fn

    def submit(self, slot: ExecutorSlot, node: TaskNode, args: list,
               returns_value: bool = True) -> None:
        self._mailboxes[slot.slot_id].put((node.task_id, node.function_id,
                                           args))

    def _run_slot(self, slot: ExecutorSlot) -> None:
        box = self._mailboxes[slot.slot_id]
        while True:
            job = box.get()
            if job is _STOP:
                return
            task_id, function_id, args = job
            self._recorder.record_now(0, slot.slot_id, task_id, function_id,
                                      EventKind.START)
            try:
                value = self._functions[function_id](*args)
            except Exception:
                self._recorder.record_now(0, slot.slot_id, task_id,
                                          function_id, EventKind.FAIL)
                self._events.put(("fail", task_id,
                                  traceback.format_exc(limit=8),
                                  slot.slot_id))
            else:
                self._recorder.record_now(0, slot.slot_id, task_id,
                                          function_id, EventKind.END)
                self._events.put(("done", task_id, value, slot.slot_id, 0))

    def shutdown(self) -> None:
        for box in self._mailboxes:
            box.put(_STOP)
        for t in self._threads:
            t.join(timeout=10)

    def worker_pids(self) -> dict[int, int]:
        return {slot.slot_id: os.getpid() for slot in self.slots}


class _WorkerProc:
    """Master-side bookkeeping for one worker process."""

    def __init__(self, process, conn, pid, generation):
        self.process = process
        self.conn = conn
        self.pid = pid
        self.generation = generation
        self.send_lock = threading.Lock()
        self.reader: Optional[threading.Thread] = None


class ProcessBackend:
    """Virtual nodes of persistent worker processes with file-based
    parameter passing.

    Workers are spawned once at session start ("spawn" start method, so no
    state leaks in via fork) and connect back over a unix socket; the framing
    on that channel is a u32 length prefix plus payload. Task functions must
    be picklable by reference (module-level functions), because workers
    resolve them by import.
    """

    is_multiprocess = True

    def __init__(self, node_count: int, workers_per_node: int,
                 scratch_root: Path, recorder: TraceRecorder,
                 events: "queue.Queue"):
        self.node_count = node_count
        self.workers_per_node = workers_per_node
        self.scratch_root = Path(scratch_root)
        self.slots = []
        for i in range(node_count * workers_per_node):
            self.slots.append(ExecutorSlot(slot_id=i,
                                           virtual_node=i // workers_per_node))
        self._recorder = recorder
        self._events = events
        self._registrations: dict[str, bytes] = {}
        self._workers: dict[int, _WorkerProc] = {}
        self._listener: Optional[socket.socket] = None
        self._sock_path = str(self.scratch_root / "ctl.sock")
        self._ctx = mp.get_context("spawn")
        self._shutting_down = False
        self._task_functions: dict[int, str] = {}
        self._generations: dict[int, int] = {s.slot_id: 0 for s in self.slots}
        # residency: which payload keys already live on which node, and how
        # large they are; guarded because wait_on reads it from the app thread
        self._resident: dict[int, set] = {k: set() for k in range(node_count)}
        self._sizes: dict[tuple, int] = {}
        self._lock = threading.Lock()

    # -- lifecycle -----------------------------------------------------------

    def node_dir(self, node_id: int) -> Path:
        return self.scratch_root / f"node{node_id}"

    def start(self) -> None:
        for k in range(self.node_count):
            self.node_dir(k).mkdir(parents=True, exist_ok=True)
        listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        listener.bind(self._sock_path)
        listener.listen(len(self.slots))
        listener.settimeout(_HELLO_TIMEOUT_S)
        self._listener = listener
        procs = {}
        for slot in self.slots:
            procs[slot.slot_id] = self._spawn(slot)
        pending = set(procs)
        while pending:
            slot_id = self._accept(procs)
            pending.discard(slot_id)

    def _spawn(self, slot: ExecutorSlot):
        proc = self._ctx.Process(
            target=worker_main,
            args=(self._sock_path, slot.slot_id, slot.virtual_node,
                  self._recorder.origin_ns),
            name=f"flowrt-worker-{slot.slot_id}",
            daemon=True)
        proc.start()
        return proc

    def _accept(self, procs) -> int:
        """Accept one worker's hello and wire up its reader thread."""
        try:
            conn, _ = self._listener.accept()
            hello = recv_frame(conn)
        except (socket.timeout, ChannelClosed) as exc:
            dead = [sid for sid, p in procs.items() if not p.is_alive()]
            node = (dead[0] // self.workers_per_node) if dead else None
            raise WorkerSpawnFailure(
                f"worker did not report in: {exc} (dead slots: {dead})",
                node_id=node) from exc
        slot_id = hello["slot_id"]
        self._generations[slot_id] += 1
        worker = _WorkerProc(procs[slot_id], conn, hello["pid"],
                             self._generations[slot_id])
        self._workers[slot_id] = worker
        for function_id, blob in self._registrations.items():
            self._send(worker, {"kind": "register",
                                "function_id": function_id, "func": blob})
        reader = threading.Thread(target=self._read_loop,
                                  args=(slot_id, worker),
                                  name=f"flowrt-reader-{slot_id}",
                                  daemon=True)
        reader.start()
        worker.reader = reader
        return slot_id

    def respawn(self, slot: ExecutorSlot) -> None:
        """Replace a dead worker process, restoring the slot count."""
        old = self._workers.pop(slot.slot_id, None)
        if old is not None:
            old.conn.close()
            if old.process.is_alive():
                old.process.terminate()
            old.process.join(timeout=10)
        procs = {slot.slot_id: self._spawn(slot)}
        self._accept(procs)

    def shutdown(self) -> None:
        self._shutting_down = True
        for worker in self._workers.values():
            try:
                self._send(worker, {"kind": "stop"})
            except OSError:
                pass
        for worker in self._workers.values():
            worker.process.join(timeout=10)
            if worker.process.is_alive():
                worker.process.terminate()
                worker.process.join(timeout=5)
            worker.conn.close()
        if self._listener is not None:
            self._listener.close()
            try:
                os.unlink(self._sock_path)
            except OSError:
                pass

    def worker_pids(self) -> dict[int, int]:
        return {sid: w.pid for sid, w in self._workers.items()}

    def generation(self, slot_id: int) -> int:
        return self._generations[slot_id]

    # -- task submission -----------------------------------------------------

    def register_function(self, function_id: str, fn) -> None:
        try:
            blob = pickle.dumps(fn, protocol=pickle.HIGHEST_PROTOCOL)
        except Exception as exc:
            raise UnsupportedType(
                f"task function {function_id!r} must be picklable by "
                f"reference for the multi-process backend: {exc}") from exc
        self._registrations[function_id] = blob
        for worker in self._workers.values():
            self._send(worker, {"kind": "register",
                                "function_id": function_id, "func": blob})

    def submit(self, slot: ExecutorSlot, node: TaskNode, arg_specs: list,
               returns_value: bool = True) -> None:
        """Stage every input onto the slot's node, then ship the task."""
        node_id = slot.virtual_node
        inputs = []
        for spec in arg_specs:
            if isinstance(spec, DataHandle):
                inputs.append(self._stage_handle(spec, node_id, node.task_id))
            else:
                inputs.append(self._stage_immediate(spec, node_id,
                                                    node.task_id))
        output = None
        if node.output_handle is not None:
            output = str(self.node_dir(node_id) / node.output_handle.filename)
        self._send(self._workers[slot.slot_id], {
            "kind": "task", "task_id": node.task_id,
            "function_id": node.function_id, "inputs": inputs,
            "output": output, "returns_value": returns_value})

    def _stage_handle(self, handle: DataHandle, node_id: int,
                      task_id: int) -> str:
        key = ("d", handle.data_id, handle.version)
        dest = self.node_dir(node_id) / handle.filename
        with self._lock:
            resident = key in self._resident[node_id]
            source_node = next((k for k in range(self.node_count)
                                if key in self._resident[k]), None)
        if not resident:
            if source_node is None:
                raise FileNotFoundError(
                    f"payload {handle.label} is not resident on any node")
            src = self.node_dir(source_node) / handle.filename
            nbytes = src.stat().st_size
            self._recorder.record_now(node_id, MASTER, task_id, handle.label,
                                      EventKind.TRANSFER_START, nbytes)
            tmp = f"{dest}.tmp.{os.getpid()}"
            shutil.copyfile(src, tmp)
            os.replace(tmp, dest)
            self._recorder.record_now(node_id, MASTER, task_id, handle.label,
                                      EventKind.TRANSFER_END, nbytes)
            with self._lock:
                self._resident[node_id].add(key)
        return str(dest)

    def _stage_immediate(self, imm: ImmediateArg, node_id: int,
                         task_id: int) -> str:
        key = ("i", imm.imm_id)
        dest = self.node_dir(node_id) / imm.filename
        with self._lock:
            resident = key in self._resident[node_id]
        if not resident:
            nbytes = len(imm.blob)
            self._recorder.record_now(node_id, MASTER, task_id, imm.label,
                                      EventKind.TRANSFER_START, nbytes)
            atomic_write_bytes(dest, imm.blob)
            self._recorder.record_now(node_id, MASTER, task_id, imm.label,
                                      EventKind.TRANSFER_END, nbytes)
            with self._lock:
                self._resident[node_id].add(key)
                self._sizes[key] = nbytes
        return str(dest)

    def note_output(self, handle: DataHandle, node_id: int,
                    nbytes: int) -> None:
        """Record that a completed task left its payload on its node."""
        key = ("d", handle.data_id, handle.version)
        with self._lock:
            self._resident[node_id].add(key)
            self._sizes[key] = nbytes

    def resident_bytes(self, task: TaskNode, node_id: int) -> int:
        """Locality metric: input payload bytes already on the node."""
        total = 0
        with self._lock:
            for handle in task.input_handles:
                key = ("d", handle.data_id, handle.version)
                if key in self._resident[node_id]:
                    total += self._sizes.get(key, 0)
        return total

    def fetch_value(self, handle: DataHandle):
        """Read a payload back into the master (for wait_on)."""
        key = ("d", handle.data_id, handle.version)
        with self._lock:
            source = next((k for k in range(self.node_count)
                           if key in self._resident[k]), None)
        if source is None:
            raise FileNotFoundError(f"payload {handle.label} not produced")
        path = self.node_dir(source) / handle.filename
        with open(path, "rb") as fh:
            return load_value(fh.read())

    # -- plumbing ------------------------------------------------------------

    def _send(self, worker: _WorkerProc, message: dict) -> None:
        with worker.send_lock:
            send_frame(worker.conn, message)

    def _read_loop(self, slot_id: int, worker: _WorkerProc) -> None:
        node_id = self.slots[slot_id].virtual_node
        while True:
            try:
                msg = recv_frame(worker.conn)
            except (ChannelClosed, OSError):
                if not self._shutting_down:
                    self._events.put(("worker_died", slot_id,
                                      worker.generation))
                return
            if msg["kind"] == "done":
                task_id = msg["task_id"]
                fid = self._task_functions.get(task_id, "?")
                self._recorder.record(TraceEvent(
                    msg["start_ns"], node_id, slot_id, task_id, fid,
                    EventKind.START))
                self._recorder.record(TraceEvent(
                    msg["end_ns"], node_id, slot_id, task_id, fid,
                    EventKind.END))
                self._events.put(("done", task_id, FILE_VALUE,
                                  slot_id, msg["out_bytes"]))
            elif msg["kind"] == "failed":
                task_id = msg["task_id"]
                fid = self._task_functions.get(task_id, "?")
                self._recorder.record(TraceEvent(
                    msg["start_ns"], node_id, slot_id, task_id, fid,
                    EventKind.START))
                self._recorder.record(TraceEvent(
                    msg["fail_ns"], node_id, slot_id, task_id, fid,
                    EventKind.FAIL))
                self._events.put(("fail", task_id, msg["error"], slot_id))

    def bind_task_functions(self, mapping: dict[int, str]) -> None:
        """Share the session's task_id -> function_id map for trace labels."""
        self._task_functions = mapping
