"""Persistent worker process: executes tasks shipped over the control channel.

One worker process backs one executor slot. It connects back to the master's
control socket, announces itself, then loops: read a frame, act, reply. Task
parameters arrive as payload files (read + decoded here), results leave as a
payload file written atomically into the node's scratch directory. Task
exceptions are caught and reported as failure replies; they never take the
worker down.
"""

from __future__ import annotations

import os
import pickle
import socket
import time
import traceback

from .channel import ChannelClosed, atomic_write_bytes, recv_frame, send_frame
from .payload import dump_value, load_value


def worker_main(sock_path: str, slot_id: int, node_id: int,
                origin_ns: int) -> None:
    sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    sock.connect(sock_path)
    try:
        send_frame(sock, {"kind": "hello", "slot_id": slot_id,
                          "pid": os.getpid()})
        _serve(sock, slot_id, node_id, origin_ns)
    finally:
        sock.close()


def _serve(sock: socket.socket, slot_id: int, node_id: int,
           origin_ns: int) -> None:
    functions = {}
    while True:
        try:
            msg = recv_frame(sock)
        except (ChannelClosed, OSError):
            return
        kind = msg["kind"]
        if kind == "stop":
            return
        if kind == "register":
            functions[msg["function_id"]] = pickle.loads(msg["func"])
            continue
        if kind != "task":
            continue

        task_id = msg["task_id"]
        start_ns = time.monotonic_ns() - origin_ns
        try:
            fn = functions[msg["function_id"]]
            args = []
            for path in msg["inputs"]:
                with open(path, "rb") as fh:
                    args.append(load_value(fh.read()))
            value = fn(*args)
            if not msg.get("returns_value", True):
                value = None  # completion-only task
            out_bytes = 0
            if msg["output"] is not None:
                blob = dump_value(value)
                atomic_write_bytes(msg["output"], blob)
                out_bytes = len(blob)
            send_frame(sock, {
                "kind": "done", "task_id": task_id,
                "start_ns": start_ns,
                "end_ns": time.monotonic_ns() - origin_ns,
                "out_bytes": out_bytes})
        except Exception:
            send_frame(sock, {
                "kind": "failed", "task_id": task_id,
                "start_ns": start_ns,
                "fail_ns": time.monotonic_ns() - origin_ns,
                "error": traceback.format_exc(limit=8)})
