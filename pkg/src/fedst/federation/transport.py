"""Ordered, exactly-once byte channels between the server and each site.

Two modes share one interface:

* ``queue``: in-process FIFO queues, one per (site, direction).
* ``socket``: one loopback TCP connection per site; each message is framed with
  a u64 little-endian length prefix. A reader thread per socket end drains
  frames into a queue so a single thread can send and then receive.

Every delivered frame is recorded in :attr:`Transport.capture` when capturing is
on, and byte totals are always kept for accounting.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass
from enum import Enum

from ..errors import ProtocolError

_LEN = struct.Struct("<Q")


class TransportMode(str, Enum):
    IN_PROCESS_QUEUE = "queue"
    LOOPBACK_SOCKET = "socket"


@dataclass
class Captured:
    sender: str        # "server" or "site"
    site_id: int
    data: bytes


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


class _SocketEnd:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.inbox: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        while True:
            try:
                head = _recv_exact(self.sock, _LEN.size)
                if head is None:
                    break
                body = _recv_exact(self.sock, _LEN.unpack(head)[0])
                if body is None:
                    break
            except OSError:
                break
            self.inbox.put(body)
        self.inbox.put(None)

    def send(self, data: bytes) -> None:
        self.sock.sendall(_LEN.pack(len(data)) + data)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Transport:
    def __init__(self, site_ids, mode: TransportMode | str = TransportMode.IN_PROCESS_QUEUE,
                 port: int = 0, capture: bool = False, timeout: float = 60.0):
        self.mode = TransportMode(mode)
        self.site_ids = list(site_ids)
        self.capture_enabled = capture
        self.capture: list[Captured] = []
        self.bytes_up = 0
        self.bytes_down = 0
        self.messages = 0
        self.timeout = timeout
        self._lock = threading.Lock()
        if self.mode is TransportMode.IN_PROCESS_QUEUE:
            self._to_site = {k: queue.Queue() for k in self.site_ids}
            self._to_server = {k: queue.Queue() for k in self.site_ids}
        else:
            self._open_sockets(port)

    def _open_sockets(self, port: int) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(("127.0.0.1", port))
        listener.listen(len(self.site_ids))
        self.port = listener.getsockname()[1]
        self._server_ends: dict[int, _SocketEnd] = {}
        self._site_ends: dict[int, _SocketEnd] = {}
        try:
            for k in self.site_ids:
                client = socket.create_connection(("127.0.0.1", self.port), timeout=self.timeout)
                client.settimeout(None)
                # the site announces its id as the first frame
                client.sendall(_LEN.pack(4) + struct.pack("<I", k))
                conn, _ = listener.accept()
                head = _recv_exact(conn, _LEN.size + 4)
                if head is None or struct.unpack("<I", head[_LEN.size:])[0] != k:
                    raise ProtocolError(f"handshake failed for site {k}")
                self._server_ends[k] = _SocketEnd(conn)
                self._site_ends[k] = _SocketEnd(client)
        finally:
            listener.close()

    # ----------------------------------------------------------- channels
    def _record(self, sender: str, site_id: int, data: bytes) -> None:
        with self._lock:
            self.messages += 1
            if sender == "server":
                self.bytes_down += len(data)
            else:
                self.bytes_up += len(data)
            if self.capture_enabled:
                self.capture.append(Captured(sender, site_id, data))

    def _check_site(self, site_id: int) -> None:
        if site_id not in self.site_ids:
            raise ProtocolError(f"unknown site {site_id}")

    def send_to_site(self, site_id: int, data: bytes) -> None:
        self._check_site(site_id)
        self._record("server", site_id, data)
        if self.mode is TransportMode.IN_PROCESS_QUEUE:
            self._to_site[site_id].put(data)
        else:
            self._server_ends[site_id].send(data)

    def send_to_server(self, site_id: int, data: bytes) -> None:
        self._check_site(site_id)
        self._record("site", site_id, data)
        if self.mode is TransportMode.IN_PROCESS_QUEUE:
            self._to_server[site_id].put(data)
        else:
            self._site_ends[site_id].send(data)

    def _get(self, q: queue.Queue) -> bytes:
        try:
            data = q.get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolError("timed out waiting for a message") from None
        if data is None:
            raise ProtocolError("channel closed")
        return data

    def recv_at_site(self, site_id: int) -> bytes:
        self._check_site(site_id)
        if self.mode is TransportMode.IN_PROCESS_QUEUE:
            return self._get(self._to_site[site_id])
        return self._get(self._site_ends[site_id].inbox)

    def recv_at_server(self, site_id: int) -> bytes:
        self._check_site(site_id)
        if self.mode is TransportMode.IN_PROCESS_QUEUE:
            return self._get(self._to_server[site_id])
        return self._get(self._server_ends[site_id].inbox)

    @property
    def total_bytes(self) -> int:
        return self.bytes_up + self.bytes_down

    def close(self) -> None:
        if self.mode is TransportMode.LOOPBACK_SOCKET:
            for end in (*self._server_ends.values(), *self._site_ends.values()):
                end.close()

    def __enter__(self) -> "Transport":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
