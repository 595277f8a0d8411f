"""Socket transport: the same env interface as the simulator, over TCP.

Every hosted node listens on its own port. A directed channel (src, dst) is one
TCP connection opened by src. The first frame on it is ``Hello(src)``; dst
answers ``Hello(dst, received, session)`` where ``received`` counts frames it
already took from src in its current session. The sender keeps unacknowledged
frames and resends from ``received`` on reconnect, so a dropped connection
neither loses nor duplicates anything. A changed session means dst restarted,
and the backlog is dropped (a crash loses in-flight messages). The receiver
acknowledges every ``ACK_EVERY`` frames so the sender can trim its backlog.

A broken connection is reported to the sending node as a suspicion of dst, and
a successful reconnect as an unsuspicion.
"""
from __future__ import annotations

import heapq
import logging
import os
import queue
import socket
import threading
import time
from collections import deque

from . import codec
from . import model as m
from .model import NodeId

log = logging.getLogger(__name__)

ACK_EVERY = 64
_LEN = codec._FRAME


def _recv_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ConnectionError("connection closed")
    return buf


def read_frame(f):
    (n,) = _LEN.unpack(_recv_exact(f, 4))
    return codec.unframe(_recv_exact(f, n))


class _Chan:
    """Outbound half of one directed channel, owned by a writer thread."""

    def __init__(self, fabric, src, dst):
        self.fabric = fabric
        self.src, self.dst = src, dst
        self.cv = threading.Condition()
        self.backlog: deque = deque()  # encoded frames not yet acknowledged
        self.base = 0  # sequence number of backlog[0]
        self.sent = 0  # frames written on the current connection, counted from base
        self.peer_session = None
        self.sock = None
        self.closed = False
        self.thread = threading.Thread(target=self._run, name=f"w-{src}-{dst}", daemon=True)
        self.thread.start()

    def push(self, frame: bytes) -> None:
        with self.cv:
            self.backlog.append(frame)
            self.cv.notify()

    def close(self) -> None:
        with self.cv:
            self.closed = True
            self.cv.notify()
        s = self.sock
        if s is not None:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def _ack(self, upto: int) -> None:
        with self.cv:
            k = upto - self.base
            if k > 0:
                k = min(k, len(self.backlog))
                for _ in range(k):
                    self.backlog.popleft()
                self.base += k
                self.sent = max(0, self.sent - k)

    def _connect(self):
        addr = self.fabric.addrs[self.dst]
        s = socket.create_connection(addr, timeout=5.0)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        s.settimeout(None)
        f = s.makefile("rb")
        s.sendall(codec.frame(m.Hello((self.src.kind, self.src.shard, self.src.row), 0, self.fabric.session)))
        hello = read_frame(f)
        if type(hello) is not m.Hello:
            raise ConnectionError("expected Hello")
        with self.cv:
            if self.peer_session is not None and hello.session != self.peer_session:
                # dst restarted: whatever it had not consumed is lost with it
                self.backlog.clear()
                self.base = hello.received
            else:
                self._ack(hello.received)
            self.peer_session = hello.session
            self.sent = 0
        return s, f

    def _reader(self, f) -> None:
        try:
            while True:
                msg = read_frame(f)
                if type(msg) is m.Ack:
                    self._ack(msg.received)
        except (OSError, ValueError, ConnectionError):
            pass

    def _run(self) -> None:
        delay = 0.01
        suspected = False
        while not self.closed:
            try:
                s, f = self._connect()
            except OSError:
                if not suspected and not self.closed:
                    suspected = True
                    self.fabric._notify(self.src, "suspect", self.dst)
                time.sleep(delay)
                delay = min(delay * 2, 0.5)
                continue
            delay = 0.01
            self.sock = s
            if suspected:
                suspected = False
                self.fabric._notify(self.src, "unsuspect", self.dst)
            rt = threading.Thread(target=self._reader, args=(f,), daemon=True)
            rt.start()
            try:
                while True:
                    with self.cv:
                        while self.sent >= len(self.backlog) and not self.closed:
                            self.cv.wait()
                        if self.closed:
                            break
                        chunk = list(self.backlog)[self.sent:]
                        self.sent += len(chunk)
                    s.sendall(b"".join(chunk))
            except OSError:
                pass
            try:
                s.close()
            except OSError:
                pass
            self.sock = None
            if not self.closed:
                suspected = True
                self.fabric._notify(self.src, "suspect", self.dst)


class _Host:
    """One hosted node: listening socket, inbound queue, timers and a runtime thread."""

    def __init__(self, fabric, nid, node):
        self.fabric = fabric
        self.id = nid
        self.node = node
        self.inbox: queue.Queue = queue.Queue()
        self.timers: list = []
        self._tseq = 0
        self.received: dict = {}  # (src, sender session) -> frames taken
        self.conns: dict = {}
        self.lock = threading.Lock()
        self.stopped = False
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((fabric.bind_host, fabric.ports.get(nid, 0)))
        self.sock.listen(64)
        self.port = self.sock.getsockname()[1]

    def start(self) -> None:
        threading.Thread(target=self._accept, name=f"a-{self.id}", daemon=True).start()
        threading.Thread(target=self._loop, name=f"r-{self.id}", daemon=True).start()

    def _accept(self) -> None:
        while not self.stopped:
            try:
                c, _ = self.sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(c,), daemon=True).start()

    def _serve(self, c) -> None:
        c.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        f = c.makefile("rb")
        try:
            hello = read_frame(f)
            if type(hello) is not m.Hello:
                return
            src = NodeId(*hello.node)
            key = (src, hello.session)
            with self.lock:
                old = self.conns.get(src)
                if old is not None:
                    # the sender gave up on the old connection; make sure its reader is gone
                    try:
                        old[0].shutdown(socket.SHUT_RDWR)
                    except OSError:
                        pass
                    old[1].wait(5.0)
                done = threading.Event()
                self.conns[src] = (c, done)
                n = self.received.get(key, 0)
            c.sendall(codec.frame(m.Hello((self.id.kind, self.id.shard, self.id.row), n, self.fabric.session)))
            try:
                while True:
                    msg = read_frame(f)
                    n += 1
                    self.received[key] = n
                    self.inbox.put(("msg", src, msg))
                    if n % ACK_EVERY == 0:
                        c.sendall(codec.frame(m.Ack(n)))
            finally:
                done.set()
        except (OSError, ValueError, ConnectionError):
            pass
        finally:
            try:
                c.close()
            except OSError:
                pass

    def add_timer(self, delay: float, token) -> None:
        self.inbox.put(("_timer", time.monotonic() + delay, token))

    def _loop(self) -> None:
        fab = self.fabric
        while not self.stopped:
            timeout = None
            if self.timers:
                timeout = max(0.0, self.timers[0][0] - time.monotonic())
            try:
                item = self.inbox.get(timeout=timeout)
            except queue.Empty:
                item = None
            if item is not None:
                k = item[0]
                if k == "_timer":
                    self._tseq += 1
                    heapq.heappush(self.timers, (item[1], self._tseq, item[2]))
                elif k == "_stop":
                    break
                else:
                    fab._dispatch(self, item)
            now = time.monotonic()
            while self.timers and self.timers[0][0] <= now:
                _, _, tok = heapq.heappop(self.timers)
                fab._dispatch(self, ("timer", tok))

    def stop(self) -> None:
        self.stopped = True
        self.inbox.put(("_stop",))
        try:
            self.sock.close()
        except OSError:
            pass
        with self.lock:
            for c, _ in self.conns.values():
                try:
                    c.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass


class SocketNet:
    """Hosts some nodes of a cluster and talks TCP to all of them (itself included).

    ``addrs`` maps every node id to (host, port); ``ports`` pins the listening
    port of hosted nodes (0 or missing = ephemeral, see ``host.port``).
    """

    def __init__(self, cfg, addrs: dict | None = None, ports: dict | None = None,
                 bind_host: str = "127.0.0.1"):
        self.cfg = cfg
        self.addrs = dict(addrs or {})
        self.ports = dict(ports or {})
        self.bind_host = bind_host
        self.session = int.from_bytes(os.urandom(8), "big") >> 1
        self.hosts: dict = {}
        self.chans: dict = {}
        self.chan_lock = threading.Lock()
        self.listeners: list = []
        self.handlers: dict = {}  # message type -> fn(host, src, msg), consumed by the fabric
        self.t0 = time.monotonic()
        self.nodes = {}
        self.on_error = None
        self.errors: list = []

    # ---- env interface ----

    def now(self) -> float:
        return time.monotonic() - self.t0

    def send(self, src, dst, msg) -> None:
        key = (src, dst)
        ch = self.chans.get(key)
        if ch is None:
            with self.chan_lock:
                ch = self.chans.get(key)
                if ch is None:
                    ch = self.chans[key] = _Chan(self, src, dst)
        ch.push(codec.frame(msg))

    def timer(self, node, delay: float, token) -> None:
        self.hosts[node].add_timer(delay, token)

    def charge(self, node, seconds: float) -> None:
        pass

    def event(self, kind: str, node, **kw) -> None:
        t = self.now()
        for fn in self.listeners:
            fn(t, kind, node, kw)

    def at(self, t: float, fn) -> None:
        threading.Timer(max(0.0, t - self.now()), fn).start()

    # ---- wiring ----

    def add(self, nid, node) -> "_Host":
        h = self.hosts[nid] = _Host(self, nid, node)
        self.nodes[nid] = node
        self.addrs.setdefault(nid, (self.bind_host, h.port))
        return h

    def start(self) -> None:
        for h in self.hosts.values():
            h.start()

    def inject(self, nid, item) -> None:
        self.hosts[nid].inbox.put(item)

    def _notify(self, src, kind, x) -> None:
        h = self.hosts.get(src)
        if h is not None and x.kind == "E" and src.kind == "E":
            h.inbox.put((kind, x))

    def _dispatch(self, host, item) -> None:
        node = host.node
        k = item[0]
        try:
            if k == "msg":
                fn = self.handlers.get(type(item[2]))
                if fn is not None:
                    fn(host, item[1], item[2])
                else:
                    node.handle(item[1], item[2])
            elif k == "timer":
                node.on_timer(item[1])
            elif k == "suspect":
                node.on_suspect(item[1])
            elif k == "unsuspect":
                node.on_unsuspect(item[1])
            elif k == "boot":
                node.on_boot(item[1])
            elif k == "call":
                item[1]()
        except Exception as e:  # a handler bug must not silently kill the runtime thread
            log.exception("handler failed on %s", host.id)
            self.errors.append(e)
            if self.on_error is not None:
                self.on_error(e)

    def close(self) -> None:
        for ch in list(self.chans.values()):
            ch.close()
        for h in self.hosts.values():
            h.stop()

    def flush(self, timeout: float = 5.0) -> bool:
        """Wait until every outbound frame has been written to a socket."""
        end = time.monotonic() + timeout
        while time.monotonic() < end:
            if all(ch.sent >= len(ch.backlog) for ch in list(self.chans.values())):
                return True
            time.sleep(0.005)
        return False
