"""Length-prefixed message framing for the master/worker control channel.

Each frame is a little-endian u32 byte count followed by that many payload
bytes (a pickled dict). Also holds the atomic file-write helper both sides
use so payload files are never observed half-written.
"""

from __future__ import annotations

import os
import pickle
import socket
import struct


class ChannelClosed(Exception):
    """Peer closed the control channel."""


def send_frame(sock: socket.socket, message: dict) -> None:
    payload = pickle.dumps(message, protocol=pickle.HIGHEST_PROTOCOL)
    sock.sendall(struct.pack("<I", len(payload)) + payload)


def recv_frame(sock: socket.socket) -> dict:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", header)
    return pickle.loads(_recv_exact(sock, length))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ChannelClosed("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def atomic_write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
