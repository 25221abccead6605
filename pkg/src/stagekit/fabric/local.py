"""Real local multi-agent backend: OS processes talking over TCP loopback.

Every frame is a 16-byte header (``STGK``, version, tag, u64 little-endian
payload length) followed by the payload.  The lowest member rank is the
rendezvous point; after it hands out the address table every pair of agents
holds one bidirectional connection.
"""

from __future__ import annotations

import json
import multiprocessing as mp
import os
import pickle
import queue
import socket
import struct
import threading
import time
import traceback
from collections import defaultdict
from dataclasses import dataclass, field

FRAME = struct.Struct("<4sHHQ")
MAGIC = b"STGK"
VERSION = 1
ENV_ADDR = "STAGEKIT_FABRIC_ADDR"
ENV_START = "STAGEKIT_START_METHOD"

TAG_HELLO = 1
TAG_TABLE = 2
TAG_USER = 16
_TAG_COLL_BASE = 1024
_TAG_COLL_SPAN = 60000


class FabricError(RuntimeError):
    pass


class FabricTimeout(FabricError, TimeoutError):
    pass


class AgentError(FabricError):
    def __init__(self, rank: int, detail: str):
        super().__init__(f"agent {rank} failed:\n{detail}")
        self.rank = rank
        self.detail = detail

    def __reduce__(self):
        return (AgentError, (self.rank, self.detail))


def encode_frame(tag: int, payload: bytes) -> bytes:
    return FRAME.pack(MAGIC, VERSION, tag, len(payload)) + payload


def decode_header(header: bytes) -> tuple[int, int]:
    magic, version, tag, length = FRAME.unpack(header)
    if magic != MAGIC:
        raise FabricError(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise FabricError(f"unsupported frame version {version}")
    return tag, length


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise EOFError("peer closed connection")
        got += k
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    tag, length = decode_header(_recv_exact(sock, FRAME.size))
    return tag, _recv_exact(sock, length) if length else b""


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class LocalFabric:
    """Point-to-point messaging between the member ranks of one job."""

    def __init__(self, rank: int, members, addr: str, timeout: float = 30.0, ready_cb=None):
        self.rank = int(rank)
        self.members = tuple(int(m) for m in members)
        if self.rank not in self.members:
            raise ValueError(f"rank {rank} not among members")
        self.timeout = timeout
        self._conns: dict[int, socket.socket] = {}
        self._send_locks: dict[int, threading.Lock] = defaultdict(threading.Lock)
        self._inbox: list[tuple[int, int, bytes]] = []
        self._cv = threading.Condition()
        self._dead: set[int] = set()
        self._readers: list[threading.Thread] = []
        self._closed = False
        self._connect(addr, ready_cb)
        for peer, sock in self._conns.items():
            t = threading.Thread(target=self._reader, args=(peer, sock), daemon=True)
            t.start()
            self._readers.append(t)

    # -- setup

    def _connect(self, addr: str, ready_cb) -> None:
        root = self.members[0]
        deadline = time.monotonic() + self.timeout
        if self.rank == root:
            host, port = parse_addr(addr)
            srv = socket.create_server((host, port), backlog=len(self.members))
            srv.settimeout(self.timeout)
            if ready_cb is not None:
                h, p = srv.getsockname()[:2]
                ready_cb(f"{h}:{p}")
            table = {}
            try:
                while len(self._conns) < len(self.members) - 1:
                    sock, _ = srv.accept()
                    sock.settimeout(None)
                    _, payload = read_frame(sock)
                    hello = json.loads(payload)
                    self._conns[hello["rank"]] = sock
                    table[hello["rank"]] = hello["port"]
            except socket.timeout:
                raise FabricTimeout("rendezvous timed out waiting for agents") from None
            finally:
                srv.close()
            blob = json.dumps(table).encode()
            for sock in self._conns.values():
                sock.sendall(encode_frame(TAG_TABLE, blob))
            return

        srv = socket.create_server(("127.0.0.1", 0), backlog=len(self.members))
        srv.settimeout(self.timeout)
        my_port = srv.getsockname()[1]
        hello = json.dumps({"rank": self.rank, "port": my_port}).encode()
        sock = self._dial(parse_addr(addr), deadline)
        sock.sendall(encode_frame(TAG_HELLO, hello))
        tag, payload = read_frame(sock)
        if tag != TAG_TABLE:
            raise FabricError(f"expected address table, got tag {tag}")
        table = {int(k): v for k, v in json.loads(payload).items()}
        self._conns[root] = sock
        for peer in self.members:
            if peer != root and peer < self.rank:
                s = self._dial(("127.0.0.1", table[peer]), deadline)
                s.sendall(encode_frame(TAG_HELLO, hello))
                self._conns[peer] = s
        expected = sum(1 for p in self.members if p != root and p > self.rank)
        try:
            for _ in range(expected):
                s, _ = srv.accept()
                s.settimeout(None)
                _, payload = read_frame(s)
                self._conns[json.loads(payload)["rank"]] = s
        except socket.timeout:
            raise FabricTimeout(f"rank {self.rank} timed out waiting for peers") from None
        finally:
            srv.close()

    @staticmethod
    def _dial(hostport, deadline) -> socket.socket:
        while True:
            try:
                s = socket.create_connection(hostport, timeout=5.0)
                s.settimeout(None)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return s
            except OSError:
                if time.monotonic() > deadline:
                    raise FabricTimeout(f"could not reach {hostport}") from None
                time.sleep(0.02)

    def _reader(self, peer: int, sock: socket.socket) -> None:
        try:
            while True:
                tag, payload = read_frame(sock)
                with self._cv:
                    self._inbox.append((peer, tag, payload))
                    self._cv.notify_all()
        except (EOFError, OSError, FabricError):
            with self._cv:
                self._dead.add(peer)
                self._cv.notify_all()

    # -- messaging

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        if dst == self.rank:
            raise ValueError("point-to-point send to self")
        sock = self._conns.get(dst)
        if sock is None:
            raise FabricError(f"no connection to rank {dst}")
        frame = encode_frame(tag, bytes(payload))
        with self._send_locks[dst]:
            sock.sendall(frame)

    def recv(self, src: int | None = None, tag: int | None = None, timeout: float | None = None):
        """Next message matching ``src``/``tag`` (either may be a wildcard)."""
        limit = self.timeout if timeout is None else timeout
        deadline = time.monotonic() + limit
        with self._cv:
            while True:
                for i, (s, t, p) in enumerate(self._inbox):
                    if (src is None or s == src) and (tag is None or t == tag):
                        del self._inbox[i]
                        return s, t, p
                if src is not None and src in self._dead:
                    raise FabricError(f"rank {src} disconnected")
                left = deadline - time.monotonic()
                if left <= 0:
                    raise FabricTimeout(f"rank {self.rank}: no message from {src} with tag {tag} after {limit}s")
                self._cv.wait(left)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for sock in self._conns.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


class LocalContext:
    """Same op surface as ``SimContext``, executed for real and timed by wall clock."""

    def __init__(self, fabric: LocalFabric):
        self.fabric = fabric
        self.rank = fabric.rank
        self.backend = "local"
        self.phase_times: dict[str, float] = defaultdict(float)
        self._coll = 0

    def _timed(self, phase, fn, *args):
        t0 = time.perf_counter()
        try:
            return fn(*args)
        finally:
            self.phase_times[phase] += time.perf_counter() - t0

    def _next_tag(self) -> int:
        self._coll += 1
        return _TAG_COLL_BASE + self._coll % _TAG_COLL_SPAN

    @property
    def now(self) -> float:
        return time.time()

    def sleep(self, seconds, phase="compute"):
        self._timed(phase, time.sleep, seconds)

    def local_call(self, perform, cost=None, phase="compute"):
        return self._timed(phase, perform)

    def group_call(self, group, perform, cost=None, phase="compute"):
        return self._timed(phase, perform)

    def bcast(self, group, root, payload, phase="comm"):
        return self._timed(phase, self._bcast, tuple(group), root, payload)

    def allgather(self, group, chunk, phase="comm", join=None):
        parts = self._timed(phase, self._allgather, tuple(group), chunk)
        return join(parts) if join is not None else parts

    def barrier(self, group, phase="comm"):
        self._timed(phase, self._barrier, tuple(group))

    def _bcast(self, group, root, payload):
        tag = self._next_tag()
        n = len(group)
        me = group.index(self.rank)
        vr = (me - group.index(root)) % n
        ridx = group.index(root)
        data = bytes(payload) if vr == 0 else None
        mask = 1
        while mask < n:
            if vr & mask:
                src = group[(vr - mask + ridx) % n]
                _, _, data = self.fabric.recv(src, tag)
                break
            mask <<= 1
        mask >>= 1
        while mask > 0:
            if vr + mask < n:
                self.fabric.send(group[(vr + mask + ridx) % n], tag, data)
            mask >>= 1
        return data

    def _allgather(self, group, chunk):
        tag = self._next_tag()
        n = len(group)
        me = group.index(self.rank)
        blocks: list = [None] * n
        blocks[me] = bytes(chunk)
        right, left = group[(me + 1) % n], group[(me - 1) % n]
        for step in range(n - 1):
            self.fabric.send(right, tag, blocks[(me - step) % n])
            _, _, blocks[(me - step - 1) % n] = self.fabric.recv(left, tag)
        return blocks

    def _barrier(self, group):
        # dissemination barrier
        tag = self._next_tag()
        n = len(group)
        me = group.index(self.rank)
        k = 1
        while k < n:
            self.fabric.send(group[(me + k) % n], tag, b"")
            self.fabric.recv(group[(me - k) % n], tag)
            k <<= 1


def drive(gen_or_value):
    """Run a generator program whose yields are already-computed values."""
    if not hasattr(gen_or_value, "send"):
        return gen_or_value
    value = None
    while True:
        try:
            value = gen_or_value.send(value)
        except StopIteration as stop:
            return stop.value


@dataclass
class AgentRun:
    results: dict[int, object] = field(default_factory=dict)
    phase_times: dict[int, dict[str, float]] = field(default_factory=dict)
    wall_s: float = 0.0


def _agent_main(rank, members, addr, program, args, timeout, result_q, addr_q):
    fabric = None
    try:
        fabric = LocalFabric(rank, members, addr, timeout, ready_cb=addr_q.put if rank == members[0] else None)
        ctx = LocalContext(fabric)
        out = drive(program(ctx, *args))
        result_q.put((rank, True, pickle.dumps(out), dict(ctx.phase_times)))
    except BaseException as exc:  # noqa: BLE001 - report everything to the driver
        detail = traceback.format_exc()
        try:
            blob = pickle.dumps(exc)
            pickle.loads(blob)
        except Exception:
            blob = pickle.dumps(AgentError(rank, detail))
        result_q.put((rank, False, blob, detail))
        if rank == members[0]:
            addr_q.put(None)
    finally:
        if fabric is not None:
            # let peers drain before the sockets go away
            time.sleep(0.05)
            fabric.close()


def _mp_context():
    method = os.environ.get(ENV_START) or ("fork" if "fork" in mp.get_all_start_methods() else "spawn")
    return mp.get_context(method)


def run_agents(members, program, args=(), timeout: float = 60.0, addr: str | None = None) -> AgentRun:
    """Run ``program(ctx, *args)`` in one OS process per member rank."""
    members = tuple(int(m) for m in members)
    if not members:
        raise ValueError("no members")
    addr = addr or os.environ.get(ENV_ADDR) or "127.0.0.1:0"
    mpc = _mp_context()
    result_q = mpc.Queue()
    addr_q = mpc.Queue()
    t0 = time.perf_counter()
    procs = {}

    def start(rank, a):
        p = mpc.Process(
            target=_agent_main, args=(rank, members, a, program, args, timeout, result_q, addr_q), daemon=True
        )
        p.start()
        procs[rank] = p

    start(members[0], addr)
    try:
        real_addr = addr_q.get(timeout=timeout)
    except queue.Empty:
        real_addr = None
    if real_addr is None:
        for p in procs.values():
            p.kill()
        _, _, blob, detail = result_q.get(timeout=5) if not result_q.empty() else (0, False, None, "")
        if blob:
            raise pickle.loads(blob)
        raise FabricTimeout("rendezvous agent never came up")
    for r in members[1:]:
        start(r, real_addr)

    run = AgentRun()
    failures = []
    deadline = time.monotonic() + timeout
    pending = set(members)
    try:
        while pending:
            left = deadline - time.monotonic()
            if left <= 0:
                raise FabricTimeout(f"agents {sorted(pending)} did not finish within {timeout}s")
            try:
                rank, ok, blob, extra = result_q.get(timeout=min(left, 1.0))
            except queue.Empty:
                dead = [r for r in pending if not procs[r].is_alive() and procs[r].exitcode not in (None, 0)]
                if dead:
                    raise AgentError(dead[0], f"exited with code {procs[dead[0]].exitcode}")
                continue
            pending.discard(rank)
            if ok:
                run.results[rank] = pickle.loads(blob)
                run.phase_times[rank] = extra
            else:
                failures.append((rank, pickle.loads(blob), extra))
                # one failure usually strands the others; give them a moment, then stop
                deadline = min(deadline, time.monotonic() + 2.0)
    except FabricTimeout:
        if not failures:
            raise
    finally:
        for p in procs.values():
            p.join(timeout=2.0)
            if p.is_alive():
                p.kill()
                p.join()
        run.wall_s = time.perf_counter() - t0
    if failures:
        failures.sort(key=lambda f: (isinstance(f[1], FabricError), f[0]))
        rank, exc, detail = failures[0]
        if isinstance(exc, BaseException):
            raise exc
        raise AgentError(rank, detail)
    return run
