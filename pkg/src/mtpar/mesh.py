"""Process mesh, message transport and deterministic collectives.

A world of ``N * M`` ranks is laid out row-major: rank ``r`` belongs to head
sub-group ``r // M`` at slot ``r % M``. Each rank gets a global communicator and
one sub-group communicator.

Wire frames are little-endian::

    magic u32 | version u16 | category u16 | source rank u32 | tag u32 | length u64 | payload

Collectives use a binomial tree over group slots (root slot 0):

* reduce, round k = 0, 1, ...: slot v with ``v % 2^(k+1) == 2^k`` sends its partial
  sum to ``v - 2^k`` and drops out; slot v with ``v % 2^(k+1) == 0`` receives from
  ``v + 2^k`` (if it exists) and computes ``mine + received``.
* broadcast: the same tree in reverse round order.

An allreduce therefore moves ``2 (p - 1)`` buffers per group; slot ``v`` sends one
buffer in the reduce phase (unless it is the root) plus one per child.
"""
from __future__ import annotations

import logging
import math
import multiprocessing as mp
import pickle
import queue
import socket
import struct
import threading
import time
import traceback
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from mtpar import ContractError

log = logging.getLogger(__name__)

CATEGORIES = ("encoder_sync", "head_sync", "data_fetch", "control")
FRAME = struct.Struct("<IHHIIQ")
FRAME_MAGIC = 0x4D545046
FRAME_VERSION = 1
DEFAULT_TIMEOUT = 30.0

TAG_HELLO = 0xFFFFFFF0
TAG_SHUTDOWN = 0xFFFFFFF1
TAG_ABORT = 0xFFFFFFF2


class CommError(RuntimeError):
    pass


@dataclass(frozen=True)
class Mesh:
    n_groups: int
    replicas: int

    def __post_init__(self):
        if self.n_groups < 1 or self.replicas < 1:
            raise ContractError("mesh dimensions must be >= 1")

    @property
    def world_size(self) -> int:
        return self.n_groups * self.replicas

    def coords(self, rank: int) -> tuple[int, int]:
        if not 0 <= rank < self.world_size:
            raise ContractError(f"rank {rank} outside world of {self.world_size}")
        return divmod(rank, self.replicas)

    def rank_of(self, group: int, slot: int) -> int:
        return group * self.replicas + slot

    def group_ranks(self, group: int) -> list[int]:
        return [self.rank_of(group, s) for s in range(self.replicas)]

    @classmethod
    def parse(cls, text: str) -> "Mesh":
        parts = text.lower().split("x")
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise ContractError(f"mesh must look like NxM, got {text!r}")
        return cls(int(parts[0]), int(parts[1]))

    def __str__(self):
        return f"{self.n_groups}x{self.replicas}"


# -- accounting ----------------------------------------------------------------


@dataclass
class CommStats:
    rank: int
    group: int = 0
    bytes_sent: dict = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))
    bytes_received: dict = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))
    msgs_sent: dict = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))
    msgs_received: dict = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))
    # head_sync payload sent to a rank of another sub-group; must stay 0
    head_sync_cross_group: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def on_send(self, category: str, nbytes: int, cross_group: bool) -> None:
        with self._lock:
            self.bytes_sent[category] += nbytes
            self.msgs_sent[category] += 1
            if cross_group and category == "head_sync":
                self.head_sync_cross_group += nbytes

    def on_receive(self, category: str, nbytes: int) -> None:
        with self._lock:
            self.bytes_received[category] += nbytes
            self.msgs_received[category] += 1

    def snapshot(self) -> "CommStats":
        with self._lock:
            return CommStats(
                self.rank, self.group, dict(self.bytes_sent), dict(self.bytes_received),
                dict(self.msgs_sent), dict(self.msgs_received), self.head_sync_cross_group,
            )

    def __getstate__(self):
        d = self.__dict__.copy()
        d.pop("_lock")
        return d

    def __setstate__(self, d):
        self.__dict__.update(d)
        self._lock = threading.Lock()


def conservation_holds(stats: list[CommStats]) -> bool:
    return all(
        sum(s.bytes_sent[c] for s in stats) == sum(s.bytes_received[c] for s in stats)
        for c in CATEGORIES
    )


# -- closed-form schedule -------------------------------------------------------


def tree_rounds(size: int) -> int:
    return math.ceil(math.log2(size)) if size > 1 else 0


def tree_children(vslot: int, size: int) -> list[int]:
    """Slots ``vslot`` forwards to during broadcast, in send order."""
    out = []
    for k in reversed(range(tree_rounds(size))):
        span = 1 << k
        if vslot % (2 * span) == 0 and vslot + span < size:
            out.append(vslot + span)
    return out


def tree_allreduce_sends(slot: int, size: int) -> int:
    """Buffers sent by ``slot`` during one allreduce (reduce + broadcast)."""
    if size == 1:
        return 0
    return (1 if slot else 0) + len(tree_children(slot, size))


def tree_allreduce_bytes(slot: int, size: int, nbytes: int) -> int:
    return tree_allreduce_sends(slot, size) * nbytes


# -- mailbox & transports -------------------------------------------------------


class Mailbox:
    """Messages matched by (source, tag); out-of-order arrival is fine."""

    def __init__(self):
        self._cv = threading.Condition()
        self._by_tag: dict[int, deque] = defaultdict(deque)
        self._error: Exception | None = None

    def put(self, src: int, tag: int, payload: bytes) -> None:
        with self._cv:
            self._by_tag[tag].append((src, payload))
            self._cv.notify_all()

    def fail(self, exc: Exception) -> None:
        with self._cv:
            if self._error is None:
                self._error = exc
            self._cv.notify_all()

    def get(self, src: int | None, tag: int, timeout: float) -> tuple[int, bytes]:
        deadline = time.monotonic() + timeout
        with self._cv:
            while True:
                q = self._by_tag.get(tag)
                if q:
                    for i, (s, payload) in enumerate(q):
                        if src is None or s == src:
                            del q[i]
                            if not q:
                                del self._by_tag[tag]
                            return s, payload
                if self._error is not None:
                    raise CommError(f"transport failed: {self._error}") from self._error
                left = deadline - time.monotonic()
                if left <= 0:
                    raise CommError(f"timeout waiting for tag {tag:#x} from {'any' if src is None else src}")
                self._cv.wait(left)


class Endpoint:
    """One rank's view of the transport: tagged send/recv plus byte accounting."""

    def __init__(self, rank: int, mesh: Mesh, timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.mesh = mesh
        self.timeout = timeout
        self.mailbox = Mailbox()
        self.stats = CommStats(rank, mesh.coords(rank)[0])

    def _deliver(self, dst: int, category: str, tag: int, payload: bytes) -> None:
        raise NotImplementedError

    def send(self, dst: int, payload: bytes, tag: int, category: str = "control") -> None:
        if category not in CATEGORIES:
            raise ContractError(f"unknown traffic category {category!r}")
        if not 0 <= dst < self.mesh.world_size:
            raise ContractError(f"destination {dst} outside world")
        cross = self.mesh.coords(dst)[0] != self.stats.group
        self.stats.on_send(category, len(payload), cross)
        self._deliver(dst, category, tag, bytes(payload))

    def recv(self, src: int, tag: int, timeout: float | None = None) -> bytes:
        return self.mailbox.get(src, tag, self.timeout if timeout is None else timeout)[1]

    def recv_any(self, tag: int, timeout: float | None = None) -> tuple[int, bytes]:
        return self.mailbox.get(None, tag, self.timeout if timeout is None else timeout)

    def abort(self, reason: str) -> None:
        pass

    def close(self) -> None:
        pass


class Hub:
    """In-process 'network' connecting thread-simulated ranks."""

    def __init__(self, mesh: Mesh, timeout: float = DEFAULT_TIMEOUT):
        self.mesh = mesh
        self.endpoints = [InProcEndpoint(r, mesh, self, timeout) for r in range(mesh.world_size)]

    def abort(self, exc: Exception) -> None:
        for ep in self.endpoints:
            ep.mailbox.fail(exc)


class InProcEndpoint(Endpoint):
    def __init__(self, rank, mesh, hub: Hub, timeout):
        super().__init__(rank, mesh, timeout)
        self.hub = hub

    def _deliver(self, dst, category, tag, payload):
        peer = self.hub.endpoints[dst]
        peer.stats.on_receive(category, len(payload))
        peer.mailbox.put(self.rank, tag, payload)


def encode_frame(category: str, src: int, tag: int, payload: bytes) -> bytes:
    return FRAME.pack(FRAME_MAGIC, FRAME_VERSION, CATEGORIES.index(category), src, tag, len(payload)) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[str, int, int, bytes]:
    magic, version, cat, src, tag, length = FRAME.unpack(_recv_exact(sock, FRAME.size))
    if magic != FRAME_MAGIC or version != FRAME_VERSION:
        raise CommError(f"bad frame header magic={magic:#x} version={version}")
    return CATEGORIES[cat], src, tag, _recv_exact(sock, length) if length else b""


class SocketEndpoint(Endpoint):
    """Full mesh of TCP connections; one reader thread per peer."""

    def __init__(self, rank: int, mesh: Mesh, addresses: list[tuple[str, int]], timeout: float = DEFAULT_TIMEOUT):
        super().__init__(rank, mesh, timeout)
        self.addresses = addresses
        self.socks: dict[int, socket.socket] = {}
        self.send_locks: dict[int, threading.Lock] = {}
        self._closing = False
        self._connect()

    def _connect(self):
        world = self.mesh.world_size
        host, port = self.addresses[self.rank]
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((host, port))
        except OSError as exc:
            raise CommError(f"rank {self.rank}: cannot bind {host}:{port}: {exc}") from exc
        listener.listen(world)
        listener.settimeout(self.timeout)
        deadline = time.monotonic() + self.timeout
        for peer in range(self.rank):
            while True:
                try:
                    s = socket.create_connection(self.addresses[peer], timeout=1.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise CommError(f"rank {self.rank}: rendezvous timeout connecting to rank {peer}")
                    time.sleep(0.05)
            s.settimeout(None)
            s.sendall(encode_frame("control", self.rank, TAG_HELLO, b""))
            self._add_peer(peer, s)
        for _ in range(self.rank + 1, world):
            try:
                s, _ = listener.accept()
            except socket.timeout as exc:
                raise CommError(f"rank {self.rank}: rendezvous timeout accepting peers") from exc
            s.settimeout(None)
            _, src, tag, _ = read_frame(s)
            if tag != TAG_HELLO:
                raise CommError("expected hello frame")
            self._add_peer(src, s)
        listener.close()
        for peer, s in self.socks.items():
            threading.Thread(target=self._reader, args=(peer, s), daemon=True).start()

    def _add_peer(self, peer, s):
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.socks[peer] = s
        self.send_locks[peer] = threading.Lock()

    def _reader(self, peer: int, s: socket.socket):
        try:
            while True:
                category, src, tag, payload = read_frame(s)
                if tag == TAG_SHUTDOWN:
                    return
                if tag == TAG_ABORT:
                    self.mailbox.fail(CommError(f"rank {src} aborted: {payload.decode(errors='replace')}"))
                    return
                self.stats.on_receive(category, len(payload))
                self.mailbox.put(src, tag, payload)
        except Exception as exc:  # noqa: BLE001 -- any reader failure aborts the rank
            if not self._closing:
                self.mailbox.fail(CommError(f"rank {self.rank}: link to rank {peer} failed: {exc}"))

    def _deliver(self, dst, category, tag, payload):
        if dst == self.rank:
            self.stats.on_receive(category, len(payload))
            self.mailbox.put(self.rank, tag, payload)
            return
        frame = encode_frame(category, self.rank, tag, payload)
        try:
            with self.send_locks[dst]:
                self.socks[dst].sendall(frame)
        except OSError as exc:
            raise CommError(f"rank {self.rank}: send to rank {dst} failed: {exc}") from exc

    def abort(self, reason: str) -> None:
        for peer, s in self.socks.items():
            try:
                with self.send_locks[peer]:
                    s.sendall(encode_frame("control", self.rank, TAG_ABORT, reason.encode()[:4096]))
            except OSError:
                pass

    def close(self):
        self._closing = True
        for peer, s in self.socks.items():
            try:
                with self.send_locks[peer]:
                    s.sendall(encode_frame("control", self.rank, TAG_SHUTDOWN, b""))
                s.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        for s in self.socks.values():
            s.close()


# -- communicators --------------------------------------------------------------


class RankGroup:
    """Collectives over an ordered list of global ranks."""

    def __init__(self, endpoint: Endpoint, ranks: list[int], group_id: int):
        if endpoint.rank not in ranks:
            raise ContractError(f"rank {endpoint.rank} not in group {ranks}")
        if not 0 <= group_id < 0x7F:
            raise ContractError("group id out of range")
        self.ep = endpoint
        self.ranks = list(ranks)
        self.group_id = group_id
        self.slot = self.ranks.index(endpoint.rank)
        self.size = len(self.ranks)
        self._seq = 0

    def _next_tag(self) -> int:
        self._seq += 1
        return (self.group_id << 24) | (self._seq & 0xFFFFFF)

    def _send(self, vslot, root, payload, tag, category):
        self.ep.send(self.ranks[(vslot + root) % self.size], payload, tag, category)

    def _recv(self, vslot, root, tag) -> bytes:
        return self.ep.recv(self.ranks[(vslot + root) % self.size], tag)

    @staticmethod
    def _as_array(payload: bytes, n: int, what: str) -> np.ndarray:
        if len(payload) != 8 * n:
            raise CommError(f"{what}: length mismatch, expected {8 * n} bytes, got {len(payload)}")
        return np.frombuffer(payload, dtype="<f8").astype(np.float64)

    def reduce_sum(self, buf: np.ndarray, category: str, root: int = 0) -> np.ndarray | None:
        """Tree sum to ``root``; returns the sum on root, None elsewhere."""
        acc = np.ascontiguousarray(buf, dtype=np.float64).ravel().copy()
        tag = self._next_tag()
        v = (self.slot - root) % self.size
        for k in range(tree_rounds(self.size)):
            span = 1 << k
            pos = v % (2 * span)
            if pos == span:
                self._send(v - span, root, acc.astype("<f8").tobytes(), tag, category)
                return None
            if pos == 0 and v + span < self.size:
                other = self._as_array(self._recv(v + span, root, tag), acc.size, "reduce")
                acc = acc + other
        return acc

    def broadcast(self, buf: np.ndarray | None, root: int = 0, category: str = "control", n: int | None = None) -> np.ndarray:
        """Tree broadcast from slot ``root``; non-roots pass ``n`` (or a same-length buf)."""
        tag = self._next_tag()
        v = (self.slot - root) % self.size
        if v == 0:
            data = np.ascontiguousarray(buf, dtype=np.float64).ravel().copy()
        else:
            n = buf.size if n is None else n
            data = None
        payload = None if data is None else data.astype("<f8").tobytes()
        for k in reversed(range(tree_rounds(self.size))):
            span = 1 << k
            pos = v % (2 * span)
            if pos == 0 and data is not None:
                if v + span < self.size:
                    self._send(v + span, root, payload, tag, category)
            elif pos == span:
                payload = self._recv(v - span, root, tag)
                data = self._as_array(payload, n, "broadcast")
        return data

    def allreduce_sum(self, buf: np.ndarray, category: str) -> np.ndarray:
        if self.size == 1:
            return np.array(buf, dtype=np.float64).ravel()
        total = self.reduce_sum(buf, category)
        return self.broadcast(total, 0, category, n=np.size(buf))

    def allreduce_mean(self, buf: np.ndarray, category: str) -> np.ndarray:
        if self.size == 1:
            return np.array(buf, dtype=np.float64).ravel()
        total = self.reduce_sum(buf, category)
        if total is not None:
            total /= self.size
        return self.broadcast(total, 0, category, n=np.size(buf))

    def barrier(self) -> None:
        if self.size == 1:
            return
        self.allreduce_sum(np.zeros(0), "control")

    def gather_objects(self, obj, root: int = 0):
        """Pickle-based gather (control traffic); returns the list on root."""
        tag = self._next_tag()
        if self.slot == root:
            out = [None] * self.size
            out[root] = obj
            for s in range(self.size):
                if s != root:
                    out[s] = pickle.loads(self.ep.recv(self.ranks[s], tag))
            return out
        self.ep.send(self.ranks[root], pickle.dumps(obj), tag, "control")
        return None


@dataclass
class RankContext:
    rank: int
    mesh: Mesh
    endpoint: Endpoint
    world: RankGroup
    group: RankGroup

    @property
    def group_id(self) -> int:
        return self.mesh.coords(self.rank)[0]

    @property
    def slot(self) -> int:
        return self.mesh.coords(self.rank)[1]

    @property
    def stats(self) -> CommStats:
        return self.endpoint.stats

    def send(self, dst, payload: bytes, tag: int, category: str = "control"):
        self.endpoint.send(dst, payload, tag, category)

    def recv(self, src, tag: int) -> bytes:
        return self.endpoint.recv(src, tag)


def make_context(endpoint: Endpoint) -> RankContext:
    mesh = endpoint.mesh
    g, _ = mesh.coords(endpoint.rank)
    world = RankGroup(endpoint, list(range(mesh.world_size)), 0)
    group = RankGroup(endpoint, mesh.group_ranks(g), 1 + g)
    return RankContext(endpoint.rank, mesh, endpoint, world, group)


# -- launching ------------------------------------------------------------------


@dataclass
class RankResult:
    rank: int
    value: object
    stats: CommStats


class RankFailure(RuntimeError):
    pass


def _finish(ctx: RankContext, fn, args) -> RankResult:
    value = fn(ctx, *args)
    # nobody tears down links while a peer may still need them
    ctx.world.barrier()
    return RankResult(ctx.rank, value, ctx.stats.snapshot())


def _run_threads(mesh: Mesh, fn, args, timeout: float) -> list[RankResult]:
    hub = Hub(mesh, timeout)
    results: list = [None] * mesh.world_size
    errors: list = []

    def body(r):
        try:
            results[r] = _finish(make_context(hub.endpoints[r]), fn, args)
        except BaseException as exc:  # noqa: BLE001 -- propagate to the launcher
            errors.append((r, exc, traceback.format_exc()))
            hub.abort(CommError(f"rank {r} failed: {exc!r}"))

    threads = [threading.Thread(target=body, args=(r,), name=f"rank{r}") for r in range(mesh.world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        # the root cause is the error that is not a secondary abort
        errors.sort(key=lambda e: isinstance(e[1], CommError))
        r, exc, tb = errors[0]
        raise RankFailure(f"rank {r} failed: {exc!r}\n{tb}") from exc
    return results


def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks, ports = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind((host, 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def connect_rank(rank: int, mesh: Mesh, addresses: list[tuple[str, int]], timeout: float = DEFAULT_TIMEOUT) -> RankContext:
    """Join a socket world (used by the local launcher and host-list runs)."""
    if len(addresses) != mesh.world_size:
        raise ContractError(f"need {mesh.world_size} addresses, got {len(addresses)}")
    ep = SocketEndpoint(rank, mesh, addresses, timeout)
    ctx = make_context(ep)
    ctx.world.barrier()
    return ctx


def _process_main(rank, mesh, addresses, timeout, fn, args, out_q):
    ctx = None
    try:
        ctx = connect_rank(rank, mesh, addresses, timeout)
        out_q.put((rank, True, _finish(ctx, fn, args)))
    except BaseException as exc:  # noqa: BLE001
        if ctx is not None:
            ctx.endpoint.abort(repr(exc))
        out_q.put((rank, False, f"{exc!r}\n{traceback.format_exc()}"))
    finally:
        if ctx is not None:
            ctx.endpoint.close()


def _run_processes(mesh: Mesh, fn, args, timeout: float, host: str) -> list[RankResult]:
    mpc = mp.get_context("spawn")
    out_q = mpc.Queue()
    addresses = [(host, p) for p in free_ports(mesh.world_size, host)]
    procs = [
        mpc.Process(target=_process_main, args=(r, mesh, addresses, timeout, fn, args, out_q), name=f"rank{r}")
        for r in range(mesh.world_size)
    ]
    for p in procs:
        p.start()
    results: list = [None] * mesh.world_size
    reported: set[int] = set()
    deadline = time.monotonic() + max(timeout * 20, 600)
    try:
        while len(reported) < len(procs):
            try:
                r, ok, payload = out_q.get(timeout=0.5)
            except queue.Empty:
                dead = [i for i, p in enumerate(procs) if i not in reported and p.exitcode not in (None, 0)]
                if dead:
                    raise RankFailure(f"rank {dead[0]} exited with code {procs[dead[0]].exitcode} before reporting")
                if time.monotonic() > deadline:
                    raise RankFailure("ranks stopped reporting")
                continue
            if not ok:
                raise RankFailure(f"rank {r} failed: {payload}")
            results[r] = payload
            reported.add(r)
    finally:
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
    return results


def spawn_world(
    n_groups: int,
    replicas: int,
    fn,
    args: tuple = (),
    backend: str = "thread",
    timeout: float = DEFAULT_TIMEOUT,
    host: str = "127.0.0.1",
) -> list[RankResult]:
    """Run ``fn(ctx, *args)`` on every rank of an ``n_groups x replicas`` world.

    ``backend="thread"`` simulates ranks in-process; ``"process"`` starts one OS
    process per rank connected over localhost TCP (``fn`` must be importable).
    Any rank failure aborts the whole world.
    """
    mesh = Mesh(n_groups, replicas)
    if backend == "thread":
        return _run_threads(mesh, fn, args, timeout)
    if backend == "process":
        return _run_processes(mesh, fn, args, timeout, host)
    raise ContractError(f"unknown backend {backend!r}")
