"""Length-prefixed pull protocol over TCP.

Every message is a frame ``[u32 LE length][payload]``. Requests are ``LIST``
or ``GET <model_id>``; responses start with ``OK `` followed by the body, or
``ERR `` followed by a JSON object ``{"code", "message"}``.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading

from .package import ModelPackage, package_read

log = logging.getLogger(__name__)

DEFAULT_MAX_FRAME = 256 * 1024 * 1024
_LEN = struct.Struct("<I")


class ProtocolError(ConnectionError):
    pass


class RemoteError(ProtocolError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class FrameTooLarge(ProtocolError):
    pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ProtocolError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_LEN.pack(len(payload)) + payload)


def recv_frame(sock: socket.socket, max_frame: int = DEFAULT_MAX_FRAME) -> bytes | None:
    """Next frame, or None on a clean close before any length byte."""
    first = sock.recv(1)
    if not first:
        return None
    (n,) = _LEN.unpack(first + _recv_exact(sock, _LEN.size - 1))
    if n > max_frame:
        raise FrameTooLarge(f"frame of {n} bytes exceeds cap {max_frame}")
    return _recv_exact(sock, n)


def error_payload(code: str, message: str) -> bytes:
    return b"ERR " + json.dumps({"code": code, "message": message}, sort_keys=True).encode("utf-8")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        store = self.server.store
        while True:
            try:
                req = recv_frame(self.request, self.server.max_frame)
            except FrameTooLarge as exc:
                send_frame(self.request, error_payload("TOO_LARGE", str(exc)))
                return
            except (ProtocolError, OSError) as exc:
                self._try_send(error_payload("MALFORMED", str(exc)))
                return
            if req is None:
                return
            if req == b"LIST":
                body = json.dumps([store.manifest(mid) for mid in store.ids()], sort_keys=True)
                send_frame(self.request, b"OK " + body.encode("utf-8"))
            elif req.startswith(b"GET "):
                mid = req[4:].decode("utf-8", errors="replace")
                data = store.get_bytes(mid)
                if data is None:
                    send_frame(self.request, error_payload("NOT_FOUND", f"no published model {mid!r}"))
                else:
                    send_frame(self.request, b"OK " + data)
            else:
                self._try_send(error_payload("BAD_REQUEST", f"unknown request {req[:16]!r}"))
                return

    def _try_send(self, payload: bytes) -> None:
        try:
            send_frame(self.request, payload)
        except OSError:
            pass


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class CentreServer:
    """Serves a read-only package store on a background thread."""

    def __init__(self, store, host: str = "127.0.0.1", port: int = 0, max_frame: int = DEFAULT_MAX_FRAME):
        self._srv = _Server((host, port), _Handler)
        self._srv.store = store
        self._srv.max_frame = max_frame
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)

    @property
    def address(self) -> tuple:
        return self._srv.server_address[:2]

    def start(self) -> "CentreServer":
        self._thread.start()
        log.info("event=serve host=%s port=%d", *self.address)
        return self

    def serve_forever(self) -> None:
        self._srv.serve_forever()

    def close(self) -> None:
        self._srv.shutdown()
        self._srv.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def serve(node, host: str = "127.0.0.1", port: int = 0) -> CentreServer:
    return CentreServer(node, host, port).start()


def parse_address(addr) -> tuple:
    if isinstance(addr, tuple):
        return addr
    host, _, port = str(addr).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {addr!r}")
    return host, int(port)


def request(address, payload: bytes, timeout: float = 60.0, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    with socket.create_connection(parse_address(address), timeout=timeout) as sock:
        send_frame(sock, payload)
        resp = recv_frame(sock, max_frame)
    if resp is None:
        raise ProtocolError("server closed the connection without replying")
    if resp.startswith(b"OK "):
        return resp[3:]
    if resp.startswith(b"ERR "):
        err = json.loads(resp[4:].decode("utf-8"))
        raise RemoteError(err["code"], err["message"])
    raise ProtocolError("response is neither OK nor ERR")


def list_models(address) -> list:
    return json.loads(request(address, b"LIST").decode("utf-8"))


def pull_bytes(address, model_id: str) -> bytes:
    return request(address, b"GET " + model_id.encode("utf-8"))


def pull(address, model_id: str) -> ModelPackage:
    """Fetch and verify a package (file hash and content hash)."""
    return package_read(pull_bytes(address, model_id))
