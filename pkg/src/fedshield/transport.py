"""Length-prefixed frame transports.

Every connection, in-process or TCP, exchanges frames of the form
``u32 BE length | body``. The in-process variant pairs two queues and is
fully deterministic for tests; the TCP variant backs the operator CLI.
A ``CaptureLog`` can be attached to record every frame on the wire, which
is how the confidentiality and admission-soundness checks observe traffic.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading

from .errors import DecodeError, InvalidInputError, TransportClosedError

MAX_FRAME = 1 << 26  # 64 MiB

_CLOSE = object()


class CaptureLog:
    """Thread-safe record of raw wire bytes, labeled per direction."""

    def __init__(self):
        self._lock = threading.Lock()
        self._frames: list[tuple[str, bytes]] = []

    def record(self, label: str, wire_bytes: bytes) -> None:
        with self._lock:
            self._frames.append((label, wire_bytes))

    def frames(self, label: str | None = None) -> list[tuple[str, bytes]]:
        with self._lock:
            if label is None:
                return list(self._frames)
            return [(l, b) for l, b in self._frames if l.startswith(label)]

    def all_bytes(self) -> bytes:
        with self._lock:
            return b"".join(b for _, b in self._frames)

    def contains(self, pattern: bytes) -> bool:
        if not pattern:
            raise InvalidInputError("empty capture pattern")
        return pattern in self.all_bytes()


def _frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise InvalidInputError("frame exceeds maximum size")
    return struct.pack(">I", len(payload)) + payload


class InProcessTransport:
    """One endpoint of an in-process connection."""

    def __init__(self, tx: queue.Queue, rx: queue.Queue, label: str,
                 capture: CaptureLog | None = None):
        self._tx = tx
        self._rx = rx
        self.label = label
        self._capture = capture
        self._closed = False

    def send_frame(self, payload: bytes) -> None:
        if self._closed:
            raise TransportClosedError("transport closed")
        if self._capture is not None:
            self._capture.record(self.label, _frame(payload))
        self._tx.put(bytes(payload))

    def recv_frame(self, timeout: float | None = None) -> bytes:
        try:
            item = self._rx.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("recv_frame timed out")
        if item is _CLOSE:
            self._rx.put(_CLOSE)  # keep closed state observable
            raise TransportClosedError("transport closed by peer")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._tx.put(_CLOSE)


def transport_pair(capture: CaptureLog | None = None, label: str = "conn"
                   ) -> tuple[InProcessTransport, InProcessTransport]:
    """A connected pair of in-process endpoints."""
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    a = InProcessTransport(a_to_b, b_to_a, f"{label}:a->b", capture)
    b = InProcessTransport(b_to_a, a_to_b, f"{label}:b->a", capture)
    return a, b


class Listener:
    """Accept side of an in-process service endpoint."""

    def __init__(self, name: str):
        self.name = name
        self._pending: queue.Queue = queue.Queue()
        self._closed = False

    def accept(self, timeout: float | None = None) -> InProcessTransport:
        try:
            item = self._pending.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"no connection to {self.name}")
        if item is _CLOSE:
            raise TransportClosedError("listener closed")
        return item

    def close(self) -> None:
        self._closed = True
        self._pending.put(_CLOSE)


class Hub:
    """Registry of named in-process endpoints; stands in for a network."""

    def __init__(self, capture: CaptureLog | None = None):
        self.capture = capture
        self._lock = threading.Lock()
        self._listeners: dict[str, Listener] = {}
        self._conn_seq = 0

    def listen(self, name: str) -> Listener:
        with self._lock:
            if name in self._listeners:
                raise InvalidInputError(f"endpoint {name!r} already registered")
            listener = Listener(name)
            self._listeners[name] = listener
            return listener

    def connect(self, name: str, label: str | None = None) -> InProcessTransport:
        with self._lock:
            listener = self._listeners.get(name)
            self._conn_seq += 1
            seq = self._conn_seq
        if listener is None:
            raise TransportClosedError(f"no endpoint named {name!r}")
        conn_label = label or f"{name}#{seq}"
        client_end, server_end = transport_pair(self.capture, conn_label)
        listener._pending.put(server_end)
        return client_end


class TcpTransport:
    """Frame transport over a connected TCP socket."""

    def __init__(self, sock: socket.socket, label: str = "tcp",
                 capture: CaptureLog | None = None):
        self._sock = sock
        self.label = label
        self._capture = capture
        self._lock = threading.Lock()

    def send_frame(self, payload: bytes) -> None:
        wire = _frame(payload)
        if self._capture is not None:
            self._capture.record(self.label, wire)
        with self._lock:
            try:
                self._sock.sendall(wire)
            except OSError as exc:
                raise TransportClosedError(str(exc)) from exc

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self._sock.recv(remaining)
            except socket.timeout:
                raise TimeoutError("recv_frame timed out")
            except OSError as exc:
                raise TransportClosedError(str(exc)) from exc
            if not chunk:
                if chunks:
                    raise DecodeError("frame truncated by peer")
                raise TransportClosedError("connection closed by peer")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv_frame(self, timeout: float | None = None) -> bytes:
        self._sock.settimeout(timeout)
        header = self._recv_exact(4)
        (length,) = struct.unpack(">I", header)
        if length > MAX_FRAME:
            raise DecodeError("frame exceeds maximum size")
        return self._recv_exact(length)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpListener:
    def __init__(self, host: str, port: int, capture: CaptureLog | None = None):
        self._sock = socket.create_server((host, port))
        self._capture = capture
        self.address = self._sock.getsockname()

    def accept(self, timeout: float | None = None) -> TcpTransport:
        self._sock.settimeout(timeout)
        try:
            conn, peer = self._sock.accept()
        except socket.timeout:
            raise TimeoutError("accept timed out")
        except OSError as exc:
            raise TransportClosedError(str(exc)) from exc
        return TcpTransport(conn, label=f"tcp:{peer[0]}:{peer[1]}", capture=self._capture)

    def close(self) -> None:
        self._sock.close()


def tcp_connect(host: str, port: int, timeout: float = 10.0,
                capture: CaptureLog | None = None) -> TcpTransport:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return TcpTransport(sock, label=f"tcp-client:{host}:{port}", capture=capture)
